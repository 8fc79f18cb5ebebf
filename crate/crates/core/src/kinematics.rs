//! Constant-curvature forward kinematics for a single-section continuum robot.
//!
//! Two antagonistic tendon pairs sit at 90° around the backbone, at radial
//! offset `d`. The `q1` pair bends the robot in the base-frame x-z plane, the
//! `q2` pair in the y-z plane. Under the constant-curvature assumption the
//! backbone is a circular arc with
//!
//! ```text
//! phi   = atan2(q2, q1)
//! kappa = |q| / (d * L)
//! ```
//!
//! and the tip frame is `Rz(phi) * Ry(kappa * L) * Rz(-phi)` with the tip at
//! `Rz(phi) * [(1 - cos(kappa L)) / kappa, 0, sin(kappa L) / kappa]`.
//!
//! Joint values cross the public API in millimetres; geometry is in metres.

use nalgebra::{Matrix3, Rotation3, Vector3};

/// Below this bend angle `kappa * L` the translation is evaluated from its
/// Taylor series instead of the closed form.
pub const STRAIGHT_THRESHOLD: f64 = 1e-6;

/// Default tendon travel limit in millimetres.
pub const DEFAULT_ACTUATION_LIMIT_MM: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobotGeometry {
    /// Backbone length `L` in metres.
    pub backbone_length: f64,
    /// Radial tendon offset `d` in metres.
    pub tendon_offset: f64,
    /// Backbone radius in metres. Metadata only.
    pub backbone_radius: f64,
    /// Young's modulus in pascals. Metadata only.
    pub youngs_modulus: f64,
    /// Backbone density in kg/m^3. Metadata only.
    pub density: f64,
}

impl Default for RobotGeometry {
    /// The physical prototype: 0.4 m spring-steel backbone, tendons at 1.8 mm.
    fn default() -> Self {
        Self {
            backbone_length: 0.4,
            tendon_offset: 0.0018,
            backbone_radius: 0.0009,
            youngs_modulus: 207e9,
            density: 7800.0,
        }
    }
}

impl RobotGeometry {
    pub fn with_tendon_offset(mut self, offset_m: f64) -> Self {
        self.tendon_offset = offset_m;
        self
    }

    pub fn is_valid(&self) -> bool {
        self.backbone_length > 0.0
            && self.tendon_offset > 0.0
            && self.backbone_length.is_finite()
            && self.tendon_offset.is_finite()
    }
}

/// Tendon displacement `(q1, q2)` in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TendonDisplacement {
    pub q1: f64,
    pub q2: f64,
}

impl TendonDisplacement {
    pub const ZERO: Self = Self { q1: 0.0, q2: 0.0 };

    pub fn new(q1: f64, q2: f64) -> Self {
        Self { q1, q2 }
    }

    pub fn is_finite(&self) -> bool {
        self.q1.is_finite() && self.q2.is_finite()
    }

    pub fn norm(&self) -> f64 {
        self.q1.hypot(self.q2)
    }

    pub fn max_abs(&self) -> f64 {
        self.q1.abs().max(self.q2.abs())
    }

    pub fn within(&self, limit_mm: f64) -> bool {
        self.max_abs() <= limit_mm
    }

    pub fn clamp(&self, limit_mm: f64) -> Self {
        Self {
            q1: self.q1.clamp(-limit_mm, limit_mm),
            q2: self.q2.clamp(-limit_mm, limit_mm),
        }
    }

    /// Rotates the joint vector by `theta` radians in the (q1, q2) plane.
    pub fn rotated(&self, theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self {
            q1: c * self.q1 - s * self.q2,
            q2: s * self.q1 + c * self.q2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArcParameters {
    /// Curvature in 1/m, never negative.
    pub curvature: f64,
    /// Bending-plane angle in (-pi, pi].
    pub bending_plane: f64,
    /// Arc length in metres, always the backbone length.
    pub arc_length: f64,
}

impl ArcParameters {
    pub fn bend_angle(&self) -> f64 {
        self.curvature * self.arc_length
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidPose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// `‖RᵀR − I‖∞ < tol` and `|det R − 1| < tol`.
    pub fn is_orthonormal(&self, tol: f64) -> bool {
        let err = self.rotation.transpose() * self.rotation - Matrix3::identity();
        err.amax() < tol && (self.rotation.determinant() - 1.0).abs() < tol
    }

    /// Largest absolute entry difference across rotation and translation.
    pub fn max_discrepancy(&self, other: &RigidPose) -> f64 {
        (self.rotation - other.rotation)
            .amax()
            .max((self.translation - other.translation).amax())
    }

    pub fn rotation_rows(&self) -> [[f64; 3]; 3] {
        let r = &self.rotation;
        [
            [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
            [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
            [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
        ]
    }
}

fn rot_z(angle: f64) -> Matrix3<f64> {
    *Rotation3::from_axis_angle(&Vector3::z_axis(), angle).matrix()
}

fn rot_y(angle: f64) -> Matrix3<f64> {
    *Rotation3::from_axis_angle(&Vector3::y_axis(), angle).matrix()
}

pub fn tendons_to_arc(q: TendonDisplacement, geom: &RobotGeometry) -> ArcParameters {
    let q1 = q.q1 * 1e-3;
    let q2 = q.q2 * 1e-3;
    let magnitude = q1.hypot(q2);
    let (curvature, bending_plane) = if magnitude == 0.0 {
        (0.0, 0.0)
    } else {
        let phi = q2.atan2(q1);
        // atan2 may return -pi; the convention is (-pi, pi].
        let phi = if phi <= -std::f64::consts::PI {
            std::f64::consts::PI
        } else {
            phi
        };
        (magnitude / (geom.tendon_offset * geom.backbone_length), phi)
    };
    ArcParameters {
        curvature,
        bending_plane,
        arc_length: geom.backbone_length,
    }
}

pub fn arc_to_pose(arc: &ArcParameters) -> RigidPose {
    let length = arc.arc_length;
    let theta = arc.bend_angle();
    // In-plane tip offset: L(1 - cos θ)/θ and L sin θ/θ.
    let (lateral, axial) = if theta < STRAIGHT_THRESHOLD {
        let t2 = theta * theta;
        (
            length * theta * (0.5 - t2 / 24.0 + t2 * t2 / 720.0),
            length * (1.0 - t2 / 6.0 + t2 * t2 / 120.0),
        )
    } else {
        ((1.0 - theta.cos()) / arc.curvature, theta.sin() / arc.curvature)
    };
    let (s, c) = arc.bending_plane.sin_cos();
    let rz = rot_z(arc.bending_plane);
    RigidPose {
        rotation: rz * rot_y(theta) * rz.transpose(),
        translation: Vector3::new(c * lateral, s * lateral, axial),
    }
}

pub fn forward_kinematics(q: TendonDisplacement, geom: &RobotGeometry) -> RigidPose {
    arc_to_pose(&tendons_to_arc(q, geom))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn geom() -> RobotGeometry {
        RobotGeometry::default()
    }

    #[test]
    fn straight_robot_has_zero_curvature() {
        let arc = tendons_to_arc(TendonDisplacement::ZERO, &geom());
        assert_eq!(arc.curvature, 0.0);
        assert_eq!(arc.bending_plane, 0.0);
        assert_eq!(arc.arc_length, 0.4);
    }

    #[test]
    fn one_millimetre_pull_curvature() {
        let arc = tendons_to_arc(TendonDisplacement::new(1.0, 0.0), &geom());
        assert_abs_diff_eq!(arc.curvature, 1e-3 / (0.0018 * 0.4), epsilon = 1e-12);
        assert_abs_diff_eq!(arc.curvature, 1.3889, epsilon = 1e-4);
        assert_eq!(arc.bending_plane, 0.0);

        let arc = tendons_to_arc(TendonDisplacement::new(0.0, 1.0), &geom());
        assert_abs_diff_eq!(arc.curvature, 1.3889, epsilon = 1e-4);
        assert_abs_diff_eq!(arc.bending_plane, FRAC_PI_2, epsilon = 1e-15);
    }

    #[test]
    fn bending_plane_is_in_half_open_range() {
        let arc = tendons_to_arc(TendonDisplacement::new(-1.0, -0.0), &geom());
        assert_eq!(arc.bending_plane, PI);
    }

    #[test]
    fn straight_pose_is_identity_at_length() {
        let pose = forward_kinematics(TendonDisplacement::ZERO, &geom());
        assert_eq!(pose.rotation, Matrix3::identity());
        assert_eq!(pose.translation, Vector3::new(0.0, 0.0, 0.4));
    }

    #[test]
    fn closed_form_tip_for_known_arc() {
        let arc = ArcParameters {
            curvature: 1.3889,
            bending_plane: 0.0,
            arc_length: 0.4,
        };
        let pose = arc_to_pose(&arc);
        assert_abs_diff_eq!(pose.translation.x, 0.1083, epsilon = 1e-4);
        assert_abs_diff_eq!(pose.translation.y, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(pose.translation.z, 0.3797, epsilon = 1e-4);
    }

    #[test]
    fn straight_limit_is_continuous() {
        let length = 0.4;
        let at = |theta: f64| {
            arc_to_pose(&ArcParameters {
                curvature: theta / length,
                bending_plane: 0.7,
                arc_length: length,
            })
        };
        let below = at(STRAIGHT_THRESHOLD * (1.0 - 1e-9));
        let above = at(STRAIGHT_THRESHOLD * (1.0 + 1e-9));
        assert!(below.max_discrepancy(&above) < 1e-9);
        for k in 0..50 {
            let theta = STRAIGHT_THRESHOLD * 10f64.powf(-3.0 + 0.1 * k as f64);
            let a = at(theta);
            let b = at(theta * (1.0 + 1e-7));
            assert!(a.max_discrepancy(&b) < 1e-9, "jump at theta={theta}");
        }
    }

    #[test]
    fn half_turn_bends_camera_backwards() {
        // kappa L = pi puts the tip on the x axis at 2L/pi with the frame flipped.
        let g = geom();
        let q1 = PI * g.tendon_offset * 1e3;
        let pose = forward_kinematics(TendonDisplacement::new(q1, 0.0), &g);
        assert_abs_diff_eq!(pose.translation.x, 2.0 * 0.4 / PI, epsilon = 1e-12);
        assert_abs_diff_eq!(pose.translation.z, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pose.rotation[(2, 2)], -1.0, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn rotations_are_orthonormal(q1 in -10.0f64..10.0, q2 in -10.0f64..10.0) {
            let pose = forward_kinematics(TendonDisplacement::new(q1, q2), &geom());
            prop_assert!(pose.is_orthonormal(1e-9));
        }

        #[test]
        fn joint_rotation_is_equivariant(
            q1 in -10.0f64..10.0,
            q2 in -10.0f64..10.0,
            theta in -PI..PI,
        ) {
            let g = geom();
            let q = TendonDisplacement::new(q1, q2);
            let base = forward_kinematics(q, &g);
            let turned = forward_kinematics(q.rotated(theta), &g);
            let rz = rot_z(theta);
            let expected = RigidPose {
                rotation: rz * base.rotation * rz.transpose(),
                translation: rz * base.translation,
            };
            prop_assert!(turned.max_discrepancy(&expected) < 1e-9);
        }
    }
}
