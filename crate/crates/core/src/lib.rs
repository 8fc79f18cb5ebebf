//! Simulation toolkit for deep direct visual servoing of a single-section,
//! tendon-driven continuum robot with an eye-in-hand camera.
//!
//! The pipeline stages are:
//!
//! 1. **Kinematics** – tendon displacements to tip pose under constant curvature.
//! 2. **Render** – pinhole ray casting of one textured plane, plus lighting and
//!    occlusion augmentation.
//! 3. **Dataset** – spiral joint-space traversal with tanh-mapped labels.
//! 4. **Nn** – a small VGG-style CNN with exact backpropagation.
//! 5. **Train** – mini-batch Adam on mean squared error.
//! 6. **Servo** – the proportional image-to-joint controller and its metrics.
//! 7. **Cli** – config parsing and the `dvs` command implementations.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod dataset;
pub mod image;
pub mod kinematics;
pub mod nn;
pub mod render;
pub mod seed;
pub mod servo;
pub mod train;

pub use crate::image::ImageBuffer;
pub use crate::kinematics::{forward_kinematics, RigidPose, RobotGeometry, TendonDisplacement};
pub use crate::nn::{NetworkSpec, ParameterSet};
pub use crate::render::{render, CameraIntrinsics, PlanarScene};
