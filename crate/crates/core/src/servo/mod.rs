//! Closed-loop image-based control of the tendon displacements.
//!
//! Each iteration renders the view at the current `q`, runs the network on
//! it and moves the tendons by `v = -lambda * s * f`, where `f` is the
//! network output and `s` an optional random gain scale.

pub mod metrics;

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::image::{resize_bilinear, ImageBuffer};
use crate::kinematics::{forward_kinematics, RobotGeometry, TendonDisplacement, DEFAULT_ACTUATION_LIMIT_MM};
use crate::nn::{forward, NetworkSpec, NnError, ParameterSet, Tensor};
use crate::render::{
    render, sample_augmentation, Augmentation, AugmentationConfig, CameraIntrinsics, Interval, PlanarScene, RenderError,
};
use crate::seed;

pub use metrics::{difference_image, normalize_for_sad, sad, MetricError, NormalizedImage};

#[derive(Debug, Error)]
pub enum ServoError {
    #[error("invalid servo config: {0}")]
    Config(String),
    #[error("start {q:?} lies outside the actuation limit of {limit} mm")]
    StartOutOfRange { q: TendonDisplacement, limit: f64 },
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("target view: {0}")]
    Target(MetricError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServoConfig {
    /// Millimetres of tendon travel per unit network output per step.
    pub lambda: f64,
    pub dt: f64,
    pub max_iterations: usize,
    /// Threshold on the infinity norm of the network output.
    pub convergence_epsilon: f64,
    /// Consecutive iterations below the threshold needed to stop.
    pub hold_count: usize,
    pub actuation_limit_mm: f64,
}

impl Default for ServoConfig {
    fn default() -> Self {
        Self {
            lambda: 0.4,
            dt: 1.0,
            max_iterations: 300,
            convergence_epsilon: 0.05,
            hold_count: 10,
            actuation_limit_mm: DEFAULT_ACTUATION_LIMIT_MM,
        }
    }
}

impl ServoConfig {
    pub fn validate(&self) -> Result<(), ServoError> {
        if !(self.lambda > 0.0) || !(self.dt > 0.0) {
            return Err(ServoError::Config("lambda and dt must be positive".into()));
        }
        if !(self.convergence_epsilon > 0.0) || self.hold_count == 0 {
            return Err(ServoError::Config(
                "convergence epsilon and hold count must be positive".into(),
            ));
        }
        if !(self.actuation_limit_mm > 0.0) {
            return Err(ServoError::Config("actuation limit must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationConfig {
    /// Standard deviation of the Gaussian noise added to `q` per step, mm.
    pub joint_noise_std: f64,
    pub gain_scale: Interval<f64>,
    /// Iterations between redraws of the gain scale and scene perturbations.
    pub refresh_period: usize,
    pub scene: AugmentationConfig,
    pub joint_noise: bool,
    pub gain_scaling: bool,
    pub scene_perturbation: bool,
}

impl Default for PerturbationConfig {
    /// Perturbation magnitudes of the robustness study, all switched off.
    fn default() -> Self {
        Self {
            joint_noise_std: 0.01,
            gain_scale: Interval::new(0.25, 4.0),
            refresh_period: 20,
            scene: AugmentationConfig {
                occlusion_count: Interval::new(0, 1),
                occlusion_area_fraction: Interval::new(0.0, 0.8),
                ..AugmentationConfig::default()
            },
            joint_noise: false,
            gain_scaling: false,
            scene_perturbation: false,
        }
    }
}

impl PerturbationConfig {
    pub fn all_enabled() -> Self {
        Self {
            joint_noise: true,
            gain_scaling: true,
            scene_perturbation: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ServoError> {
        if !(self.joint_noise_std >= 0.0) {
            return Err(ServoError::Config("joint noise std must be non-negative".into()));
        }
        if !self.gain_scale.is_valid() || !(self.gain_scale.min > 0.0) {
            return Err(ServoError::Config(
                "gain scale range must be nonempty and positive".into(),
            ));
        }
        if self.refresh_period == 0 {
            return Err(ServoError::Config("refresh period must be positive".into()));
        }
        self.scene.validate().map_err(ServoError::Config)
    }
}

/// The perturbations in force during one refresh window.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivePerturbation {
    pub gain_scale: f64,
    pub scene: Augmentation,
}

impl ActivePerturbation {
    pub fn none() -> Self {
        Self {
            gain_scale: 1.0,
            scene: Augmentation::identity(),
        }
    }
}

/// The simulated robot, camera and scene.
#[derive(Debug, Clone, Copy)]
pub struct Plant<'a> {
    pub scene: &'a PlanarScene,
    pub geometry: RobotGeometry,
    pub intrinsics: CameraIntrinsics,
}

impl Plant<'_> {
    pub fn view(&self, q: TendonDisplacement) -> Result<ImageBuffer, RenderError> {
        render(self.scene, &forward_kinematics(q, &self.geometry), &self.intrinsics)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Controller<'a> {
    pub spec: &'a NetworkSpec,
    pub params: &'a ParameterSet<f32>,
}

impl Controller<'_> {
    /// Network output for one camera frame.
    pub fn output(&self, frame: &ImageBuffer) -> Result<[f64; 2], NnError> {
        let x = preprocess(frame, self.spec.input_width, self.spec.input_height)?;
        let (y, _) = forward(self.spec, self.params, &x)?;
        Ok([f64::from(y.data[0]), f64::from(y.data[1])])
    }
}

/// Resizes a frame to the network input and quantises it to 8 bits, the
/// same treatment dataset images receive.
pub fn preprocess(img: &ImageBuffer, width: usize, height: usize) -> Result<Tensor<f32>, NnError> {
    let small = resize_bilinear(img, width, height).quantized();
    Tensor::new(
        1,
        crate::nn::Shape::Spatial {
            height,
            width,
            channels: ImageBuffer::CHANNELS,
        },
        small.into_data(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServoRecord {
    pub iteration: usize,
    /// Displacement at which the frame was taken.
    pub q: TendonDisplacement,
    /// Network output before gain scaling.
    pub f: [f64; 2],
    pub v: [f64; 2],
    /// SAD of the observed frame against the target; NaN when the frame is
    /// constant.
    pub sad: f64,
    /// SAD of the unperturbed view at `q`.
    pub sad_clean: f64,
    pub perturbation: ActivePerturbation,
}

pub const TRACE_COLUMNS: &str =
    "iteration,q1_mm,q2_mm,f1,f2,v1,v2,sad,sad_clean,gain_scale,light_gain,light_gradient,occlusion";

#[derive(Debug, Clone, PartialEq)]
pub struct ServoTrace {
    pub start: TendonDisplacement,
    pub records: Vec<ServoRecord>,
    pub converged: bool,
    /// Iteration at which the hold condition was first met.
    pub converged_at: Option<usize>,
    /// Displacement after the final update.
    pub final_q: TendonDisplacement,
}

impl ServoTrace {
    pub fn initial_sad(&self) -> Option<f64> {
        self.records.first().map(|r| r.sad_clean)
    }

    pub fn final_sad(&self) -> Option<f64> {
        self.records.last().map(|r| r.sad_clean)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{TRACE_COLUMNS}\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.iteration,
                r.q.q1,
                r.q.q2,
                r.f[0],
                r.f[1],
                r.v[0],
                r.v[1],
                r.sad,
                r.sad_clean,
                r.perturbation.gain_scale,
                r.perturbation.scene.gain,
                r.perturbation.scene.gradient,
                r.perturbation.scene.rects_string()
            );
        }
        out
    }
}

/// Everything fixed for the duration of a run.
pub struct ServoContext<'a> {
    pub plant: Plant<'a>,
    pub controller: Controller<'a>,
    pub servo: ServoConfig,
    pub perturbation: PerturbationConfig,
    pub target: NormalizedImage,
}

impl<'a> ServoContext<'a> {
    /// Uses the home view (`q = 0`) as the target.
    pub fn new(
        plant: Plant<'a>,
        controller: Controller<'a>,
        servo: ServoConfig,
        perturbation: PerturbationConfig,
    ) -> Result<Self, ServoError> {
        servo.validate()?;
        perturbation.validate()?;
        controller.params.check_against(controller.spec)?;
        let target = normalize_for_sad(&plant.view(TendonDisplacement::ZERO)?).map_err(ServoError::Target)?;
        Ok(Self {
            plant,
            controller,
            servo,
            perturbation,
            target,
        })
    }

    fn sad_or_nan(&self, frame: &ImageBuffer) -> f64 {
        normalize_for_sad(frame)
            .and_then(|n| sad(&n, &self.target))
            .unwrap_or(f64::NAN)
    }
}

/// One control iteration. Redraws `active` when `iteration` starts a refresh
/// window and returns the next displacement with the iteration's record.
pub fn servo_step(
    ctx: &ServoContext,
    q: TendonDisplacement,
    active: &mut ActivePerturbation,
    rng: &mut impl Rng,
    iteration: usize,
) -> Result<(TendonDisplacement, ServoRecord, ImageBuffer), ServoError> {
    let p = &ctx.perturbation;
    if iteration.is_multiple_of(p.refresh_period) {
        if p.gain_scaling {
            active.gain_scale = if p.gain_scale.min == p.gain_scale.max {
                p.gain_scale.min
            } else {
                rng.random_range(p.gain_scale.min..=p.gain_scale.max)
            };
        }
        if p.scene_perturbation {
            let intr = &ctx.plant.intrinsics;
            active.scene = sample_augmentation(&p.scene, intr.width, intr.height, rng);
        }
    }
    let clean = ctx.plant.view(q)?;
    let observed = if p.scene_perturbation {
        active.scene.apply(&clean)
    } else {
        clean.clone()
    };
    let f = ctx.controller.output(&observed)?;
    let step = -ctx.servo.lambda * active.gain_scale * ctx.servo.dt;
    let v = [step * f[0], step * f[1]];
    let mut next = TendonDisplacement::new(q.q1 + v[0], q.q2 + v[1]);
    if p.joint_noise && p.joint_noise_std > 0.0 {
        let noise = Normal::new(0.0, p.joint_noise_std).expect("validated std");
        next = TendonDisplacement::new(next.q1 + noise.sample(rng), next.q2 + noise.sample(rng));
    }
    let sad_observed = ctx.sad_or_nan(&observed);
    let sad_clean = if p.scene_perturbation {
        ctx.sad_or_nan(&clean)
    } else {
        sad_observed
    };
    let record = ServoRecord {
        iteration,
        q,
        f,
        v,
        sad: sad_observed,
        sad_clean,
        perturbation: active.clone(),
    };
    Ok((next.clamp(ctx.servo.actuation_limit_mm), record, observed))
}

/// Runs the loop from `start` until the output stays below the threshold for
/// the hold count or the iteration budget runs out. Randomness comes from
/// the `(seed, "servo", run)` stream. `on_frame` sees every observed frame.
pub fn run_servo_with(
    ctx: &ServoContext,
    start: TendonDisplacement,
    seed: u64,
    run: u64,
    mut on_frame: impl FnMut(&ServoRecord, &ImageBuffer),
) -> Result<ServoTrace, ServoError> {
    if !start.is_finite() || !start.within(ctx.servo.actuation_limit_mm) {
        return Err(ServoError::StartOutOfRange {
            q: start,
            limit: ctx.servo.actuation_limit_mm,
        });
    }
    let mut rng = seed::stream(seed, seed::TAG_SERVO, run);
    let mut active = ActivePerturbation::none();
    let mut q = start;
    let mut records = Vec::with_capacity(ctx.servo.max_iterations);
    let mut below = 0;
    let mut converged_at = None;
    for iteration in 0..ctx.servo.max_iterations {
        let (next, record, frame) = servo_step(ctx, q, &mut active, &mut rng, iteration)?;
        on_frame(&record, &frame);
        let small = record.f.iter().all(|f| f.abs() < ctx.servo.convergence_epsilon);
        below = if small { below + 1 } else { 0 };
        records.push(record);
        q = next;
        if below >= ctx.servo.hold_count {
            converged_at = Some(iteration);
            break;
        }
    }
    Ok(ServoTrace {
        start,
        records,
        converged: converged_at.is_some(),
        converged_at,
        final_q: q,
    })
}

pub fn run_servo(ctx: &ServoContext, start: TendonDisplacement, seed: u64, run: u64) -> Result<ServoTrace, ServoError> {
    run_servo_with(ctx, start, seed, run, |_, _| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerParams;
    use crate::render::procedural_texture;

    /// A linear head on a 1x1 input with all-zero weights outputs its bias.
    fn constant_net(bias: [f32; 2]) -> (NetworkSpec, ParameterSet<f32>) {
        let spec = NetworkSpec::parse(1, 1, "out2").unwrap();
        let params = ParameterSet {
            layers: vec![Some(LayerParams {
                weight_dims: vec![2, 3],
                weight: vec![0.0; 6],
                bias: bias.to_vec(),
            })],
        };
        (spec, params)
    }

    fn scene() -> PlanarScene {
        PlanarScene::new(procedural_texture(128, 128, 1), 0.9, 0.35)
    }

    fn plant(scene: &PlanarScene) -> Plant<'_> {
        Plant {
            scene,
            geometry: RobotGeometry::default().with_tendon_offset(0.033),
            intrinsics: CameraIntrinsics::new(32, 24, 19.0).unwrap(),
        }
    }

    #[test]
    fn unit_output_moves_by_lambda() {
        let s = scene();
        let (spec, params) = constant_net([1.0, 1.0]);
        let servo = ServoConfig {
            lambda: 0.2,
            ..ServoConfig::default()
        };
        let ctx = ServoContext::new(
            plant(&s),
            Controller {
                spec: &spec,
                params: &params,
            },
            servo,
            PerturbationConfig::default(),
        )
        .unwrap();
        let mut rng = seed::stream(0, "test", 0);
        let q = TendonDisplacement::new(1.0, 2.0);
        let (next, rec, _) = servo_step(&ctx, q, &mut ActivePerturbation::none(), &mut rng, 0).unwrap();
        assert!((next.q1 - 0.8).abs() < 1e-12 && (next.q2 - 1.8).abs() < 1e-12);
        assert_eq!(rec.v, [-0.2, -0.2]);
    }

    #[test]
    fn zero_output_converges_after_hold_count() {
        let s = scene();
        let (spec, params) = constant_net([0.0, 0.0]);
        let ctx = ServoContext::new(
            plant(&s),
            Controller {
                spec: &spec,
                params: &params,
            },
            ServoConfig::default(),
            PerturbationConfig::default(),
        )
        .unwrap();
        let trace = run_servo(&ctx, TendonDisplacement::ZERO, 1, 0).unwrap();
        assert!(trace.converged);
        assert_eq!(trace.converged_at, Some(ctx.servo.hold_count - 1));
        assert_eq!(trace.records.len(), ctx.servo.hold_count);
        assert_eq!(trace.records[0].sad, 0.0);
    }

    #[test]
    fn constant_push_saturates_at_limit() {
        let s = scene();
        let (spec, params) = constant_net([-1.0, 1.0]);
        let servo = ServoConfig {
            max_iterations: 40,
            ..ServoConfig::default()
        };
        let ctx = ServoContext::new(
            plant(&s),
            Controller {
                spec: &spec,
                params: &params,
            },
            servo,
            PerturbationConfig::default(),
        )
        .unwrap();
        let trace = run_servo(&ctx, TendonDisplacement::ZERO, 1, 0).unwrap();
        assert!(!trace.converged);
        assert_eq!(trace.records.len(), 40);
        assert_eq!(trace.final_q, TendonDisplacement::new(10.0, -10.0));
    }

    #[test]
    fn perturbations_change_only_at_refresh_boundaries() {
        let s = scene();
        let (spec, params) = constant_net([0.5, -0.5]);
        let servo = ServoConfig {
            max_iterations: 65,
            lambda: 0.01,
            ..ServoConfig::default()
        };
        let ctx = ServoContext::new(
            plant(&s),
            Controller {
                spec: &spec,
                params: &params,
            },
            servo,
            PerturbationConfig::all_enabled(),
        )
        .unwrap();
        let trace = run_servo(&ctx, TendonDisplacement::ZERO, 3, 0).unwrap();
        assert_eq!(trace.records.len(), 65);
        for w in trace.records.windows(2) {
            if w[1].iteration % 20 != 0 {
                assert_eq!(w[0].perturbation, w[1].perturbation);
            }
        }
        let windows: Vec<_> = trace
            .records
            .iter()
            .step_by(20)
            .map(|r| r.perturbation.gain_scale)
            .collect();
        assert!(windows.iter().all(|s| (0.25..=4.0).contains(s)));
        assert!(windows.windows(2).any(|w| w[0] != w[1]));
        for r in &trace.records {
            // Direction is unchanged by a positive gain scale.
            assert!(r.v[0] < 0.0 && r.v[1] > 0.0);
        }
    }

    #[test]
    fn same_seed_same_trace() {
        let s = scene();
        let (spec, params) = constant_net([0.3, 0.1]);
        let servo = ServoConfig {
            max_iterations: 30,
            ..ServoConfig::default()
        };
        let ctx = ServoContext::new(
            plant(&s),
            Controller {
                spec: &spec,
                params: &params,
            },
            servo,
            PerturbationConfig::all_enabled(),
        )
        .unwrap();
        let a = run_servo(&ctx, TendonDisplacement::new(2.0, -1.0), 7, 0).unwrap();
        let b = run_servo(&ctx, TendonDisplacement::new(2.0, -1.0), 7, 0).unwrap();
        let c = run_servo(&ctx, TendonDisplacement::new(2.0, -1.0), 7, 1).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_ne!(a.to_csv(), c.to_csv());
        assert_eq!(a.to_csv().lines().next().unwrap(), TRACE_COLUMNS);
    }

    #[test]
    fn rejects_start_outside_limits_and_bad_config() {
        let s = scene();
        let (spec, params) = constant_net([0.0, 0.0]);
        let ctx = ServoContext::new(
            plant(&s),
            Controller {
                spec: &spec,
                params: &params,
            },
            ServoConfig::default(),
            PerturbationConfig::default(),
        )
        .unwrap();
        assert!(matches!(
            run_servo(&ctx, TendonDisplacement::new(10.5, 0.0), 0, 0),
            Err(ServoError::StartOutOfRange { .. })
        ));
        let bad = ServoConfig {
            lambda: 0.0,
            ..ServoConfig::default()
        };
        assert!(ServoContext::new(
            plant(&s),
            Controller {
                spec: &spec,
                params: &params
            },
            bad,
            PerturbationConfig::default()
        )
        .is_err());
    }

    #[test]
    fn preprocess_keeps_input_sized_quantised_frames() {
        let img = procedural_texture(16, 16, 4);
        let t = preprocess(&img, 16, 16).unwrap();
        assert_eq!(t.data, img.data());
        let flat = ImageBuffer::filled(40, 30, [0.2, 0.4, 0.6]).quantized();
        let t = preprocess(&flat, 8, 8).unwrap();
        for px in t.data.chunks(3) {
            assert_eq!(px, flat.pixel(0, 0));
        }
    }
}
