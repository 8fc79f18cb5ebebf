//! Flat `key = value` run configuration shared by every `dvs` command.
//!
//! One assignment per line; lines starting with `#` and blank lines are
//! ignored. Unknown and repeated keys are errors. Every key has a default, so
//! an empty file is a complete configuration. [`RunConfig::to_text`] writes
//! every key back out, which is how commands echo their effective settings.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::dataset::{DatasetConfig, LabelMap, SpiralConfig};
use crate::image::ImageBuffer;
use crate::kinematics::{RobotGeometry, TendonDisplacement};
use crate::nn::{NetworkSpec, REFERENCE_LAYERS};
use crate::render::{procedural_texture, AugmentationConfig, CameraIntrinsics, Interval, PlanarScene};
use crate::seed;
use crate::servo::{PerturbationConfig, ServoConfig};
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`, found `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key `{key}` given more than once")]
    DuplicateKey { line: usize, key: String },
    #[error("key `{key}`: expected {expected}, found `{found}`")]
    Value {
        key: &'static str,
        expected: String,
        found: String,
    },
    #[error("key `{key}`: {message}")]
    Invalid { key: &'static str, message: String },
    #[error("key `scene.texture`: {0}")]
    Texture(String),
}

/// Parsing and printing of one config value.
pub trait ConfigValue: Sized {
    /// On failure returns a description of the expected form.
    fn parse_value(s: &str) -> Result<Self, String>;
    fn format_value(&self) -> String;
}

impl ConfigValue for f64 {
    fn parse_value(s: &str) -> Result<Self, String> {
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| "a finite number".into())
    }

    fn format_value(&self) -> String {
        self.to_string()
    }
}

macro_rules! integer_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Result<Self, String> {
                s.parse::<$t>().map_err(|_| concat!("a non-negative integer (", stringify!($t), ")").into())
            }

            fn format_value(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

integer_value!(u32, u64, usize);

impl ConfigValue for bool {
    fn parse_value(s: &str) -> Result<Self, String> {
        match s {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err("`true` or `false`".into()),
        }
    }

    fn format_value(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for String {
    fn parse_value(s: &str) -> Result<Self, String> {
        Ok(s.to_string())
    }

    fn format_value(&self) -> String {
        self.clone()
    }
}

/// Servo start points written `q1:q2` and separated by commas.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StartList(pub Vec<TendonDisplacement>);

impl ConfigValue for StartList {
    fn parse_value(s: &str) -> Result<Self, String> {
        let expected = || "a comma-separated list of `q1:q2` pairs in mm, e.g. `6:-4, 5:-7`".to_string();
        if s.trim().is_empty() {
            return Ok(Self(Vec::new()));
        }
        s.split(',')
            .map(|item| {
                let (a, b) = item.trim().split_once(':').ok_or_else(expected)?;
                let a = f64::parse_value(a.trim()).map_err(|_| expected())?;
                let b = f64::parse_value(b.trim()).map_err(|_| expected())?;
                Ok(TendonDisplacement::new(a, b))
            })
            .collect::<Result<_, _>>()
            .map(Self)
    }

    fn format_value(&self) -> String {
        self.0
            .iter()
            .map(|q| format!("{}:{}", q.q1, q.q2))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

/// A documented config key.
#[derive(Debug, Clone, Copy)]
pub struct KeyDoc {
    pub key: &'static str,
    pub doc: &'static str,
}

macro_rules! run_config {
    ($( $field:ident : $ty:ty = $default:expr, $key:literal, $doc:literal; )*) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $( pub $field: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $( $field: $default, )* }
            }
        }

        pub const KEYS: &[KeyDoc] = &[ $( KeyDoc { key: $key, doc: $doc }, )* ];

        impl RunConfig {
            /// Returns `Ok(false)` for an unknown key.
            fn set(&mut self, key: &str, value: &str) -> Result<bool, ConfigError> {
                match key {
                    $( $key => {
                        self.$field = <$ty as ConfigValue>::parse_value(value).map_err(|expected| ConfigError::Value {
                            key: $key,
                            expected,
                            found: value.to_string(),
                        })?;
                    } )*
                    _ => return Ok(false),
                }
                Ok(true)
            }

            /// Every key with its current value, in documentation order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![ $( ($key, self.$field.format_value()), )* ]
            }
        }
    };
}

run_config! {
    seed: u64 = 0, "seed", "Top-level seed; every random stream is derived from it.";

    texture: String = String::new(), "scene.texture", "Target image PNG. Empty selects the built-in procedural texture.";
    texture_size: usize = 1024, "scene.texture_size", "Side length in pixels of the procedural texture.";
    plane_distance_m: f64 = 0.9, "scene.plane_distance_m", "Base-frame z of the target plane, m.";
    plane_halfwidth_m: f64 = 0.35, "scene.plane_halfwidth_m", "Half the physical width of the target image, m.";

    backbone_length_m: f64 = 0.4, "robot.length_m", "Backbone length L, m.";
    tendon_offset_mm: f64 = 33.0, "robot.tendon_offset_mm", "Radial tendon offset d used by the curvature map, mm.";
    actuation_limit_mm: f64 = 10.0, "robot.limit_mm", "Tendon travel limit, mm.";

    camera_width: usize = 640, "camera.width", "Rendered frame width, px.";
    camera_height: usize = 480, "camera.height", "Rendered frame height, px.";
    camera_fov_deg: f64 = 19.0, "camera.fov_deg", "Horizontal field of view, degrees.";

    spiral_amplitude_mm: f64 = 7.0, "dataset.amplitude_mm", "Spiral amplitude A, mm.";
    spiral_periods: f64 = 20.0, "dataset.periods", "Spiral turns P.";
    spiral_samples: usize = 5000, "dataset.samples", "Number of spiral samples n.";
    label_beta: f64 = 1.0, "dataset.beta", "Label scale: label = tanh(beta * q_mm).";
    aug_gain_min: f64 = 0.6, "augment.gain_min", "Dataset lighting gain, lower bound.";
    aug_gain_max: f64 = 1.4, "augment.gain_max", "Dataset lighting gain, upper bound.";
    aug_gradient_min: f64 = -0.4, "augment.gradient_min", "Dataset lighting gradient per image width, lower bound.";
    aug_gradient_max: f64 = 0.4, "augment.gradient_max", "Dataset lighting gradient per image width, upper bound.";
    aug_occlusion_min: u32 = 0, "augment.occlusion_min", "Dataset occluding rectangles per image, lower bound.";
    aug_occlusion_max: u32 = 2, "augment.occlusion_max", "Dataset occluding rectangles per image, upper bound.";
    aug_area_min: f64 = 0.02, "augment.area_min", "Dataset area fraction of each rectangle, lower bound.";
    aug_area_max: f64 = 0.3, "augment.area_max", "Dataset area fraction of each rectangle, upper bound.";

    input_size: usize = 64, "net.input_size", "Square network input size, px.";
    layers: String = REFERENCE_LAYERS.to_string(), "net.layers", "Layer tokens: convN relu pool flatten denseN out2.";
    frozen_layers: usize = 0, "net.frozen", "Number of leading layers excluded from training.";

    dataset_dir: String = "dataset".to_string(), "train.dataset", "Dataset directory read by `train`.";
    epochs: usize = 50, "train.epochs", "Training epochs.";
    batch_size: usize = 32, "train.batch_size", "Mini-batch size.";
    learning_rate: f64 = 1e-3, "train.learning_rate", "Adam step size.";
    beta1: f64 = 0.9, "train.beta1", "Adam first-moment decay.";
    beta2: f64 = 0.999, "train.beta2", "Adam second-moment decay.";
    adam_epsilon: f64 = 1e-8, "train.epsilon", "Adam denominator offset.";

    checkpoint: String = "train/model.cnnp".to_string(), "servo.checkpoint", "Checkpoint read by `servo` and `eval`.";
    start: StartList = StartList(vec![TendonDisplacement::new(6.0, -4.0)]), "servo.start", "Start displacement `q1:q2`, mm. `servo` uses the first entry.";
    lambda: f64 = 0.4, "servo.lambda", "Control gain, mm per unit network output per step.";
    dt: f64 = 1.0, "servo.dt", "Step interval.";
    max_iterations: usize = 300, "servo.max_iterations", "Iteration budget.";
    convergence_epsilon: f64 = 0.05, "servo.epsilon", "Convergence threshold on the largest network output.";
    hold_count: usize = 10, "servo.hold", "Consecutive iterations below the threshold needed to stop.";
    frame_every: usize = 0, "servo.frame_every", "Write the view and difference image every N iterations; 0 disables.";

    joint_noise: bool = false, "perturb.joint_noise", "Add Gaussian noise to q each step.";
    joint_noise_std_mm: f64 = 0.01, "perturb.joint_noise_std_mm", "Joint noise standard deviation, mm.";
    gain_scaling: bool = false, "perturb.gain_scaling", "Scale the network output by a random factor.";
    gain_scale_min: f64 = 0.25, "perturb.gain_min", "Output scale factor, lower bound.";
    gain_scale_max: f64 = 4.0, "perturb.gain_max", "Output scale factor, upper bound.";
    scene_perturbation: bool = false, "perturb.scene", "Apply random lighting and occlusion to observed frames.";
    refresh_period: usize = 20, "perturb.refresh_period", "Iterations between redraws of the output scale and scene perturbations.";
    pert_gain_min: f64 = 0.6, "perturb.light_gain_min", "Servo lighting gain, lower bound.";
    pert_gain_max: f64 = 1.4, "perturb.light_gain_max", "Servo lighting gain, upper bound.";
    pert_gradient_min: f64 = -0.4, "perturb.light_gradient_min", "Servo lighting gradient, lower bound.";
    pert_gradient_max: f64 = 0.4, "perturb.light_gradient_max", "Servo lighting gradient, upper bound.";
    pert_occlusion_min: u32 = 0, "perturb.occlusion_min", "Servo occluding rectangles, lower bound.";
    pert_occlusion_max: u32 = 1, "perturb.occlusion_max", "Servo occluding rectangles, upper bound.";
    pert_area_min: f64 = 0.0, "perturb.area_min", "Servo rectangle area fraction, lower bound.";
    pert_area_max: f64 = 0.8, "perturb.area_max", "Servo rectangle area fraction, upper bound.";

    eval_runs: u64 = 10, "eval.runs", "Seeded runs per start point in `eval`.";
}

fn check(ok: bool, key: &'static str, message: &str) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(ConfigError::Invalid {
            key,
            message: message.to_string(),
        })
    }
}

fn range(min: f64, max: f64, key: &'static str) -> Result<Interval<f64>, ConfigError> {
    check(min <= max, key, "lower bound exceeds upper bound")?;
    Ok(Interval::new(min, max))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: n + 1,
                text: raw.to_string(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::DuplicateKey {
                    line: n + 1,
                    key: key.to_string(),
                });
            }
            if !cfg.set(key, value)? {
                return Err(ConfigError::UnknownKey {
                    line: n + 1,
                    key: key.to_string(),
                });
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Every key and value, one `key = value` line each.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# dvs effective configuration\n");
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Key reference with defaults.
    pub fn documentation() -> String {
        let defaults = Self::default().entries();
        let mut out = String::new();
        for (doc, (key, value)) in KEYS.iter().zip(defaults) {
            let _ = writeln!(out, "{key} = {value}\n    {}", doc.doc);
        }
        out
    }

    /// Checks every value and every derived module config.
    pub fn validate(&self) -> Result<(), ConfigError> {
        check(self.texture_size >= 2, "scene.texture_size", "must be at least 2")?;
        check(
            self.plane_halfwidth_m > 0.0,
            "scene.plane_halfwidth_m",
            "must be positive",
        )?;
        check(self.backbone_length_m > 0.0, "robot.length_m", "must be positive")?;
        check(
            self.tendon_offset_mm > 0.0,
            "robot.tendon_offset_mm",
            "must be positive",
        )?;
        check(self.actuation_limit_mm > 0.0, "robot.limit_mm", "must be positive")?;
        check(
            self.plane_distance_m > self.backbone_length_m,
            "scene.plane_distance_m",
            "must exceed robot.length_m",
        )?;
        check(self.camera_width > 0, "camera.width", "must be positive")?;
        check(self.camera_height > 0, "camera.height", "must be positive")?;
        check(
            self.camera_fov_deg > 0.0 && self.camera_fov_deg < 180.0,
            "camera.fov_deg",
            "must lie in (0, 180)",
        )?;
        check(
            self.spiral_amplitude_mm >= 0.0,
            "dataset.amplitude_mm",
            "must be non-negative",
        )?;
        check(self.spiral_samples > 0, "dataset.samples", "must be positive")?;
        check(self.label_beta > 0.0, "dataset.beta", "must be positive")?;
        check(self.aug_gain_min > 0.0, "augment.gain_min", "must be positive")?;
        range(self.aug_gain_min, self.aug_gain_max, "augment.gain_max")?;
        range(self.aug_gradient_min, self.aug_gradient_max, "augment.gradient_max")?;
        check(
            self.aug_occlusion_min <= self.aug_occlusion_max,
            "augment.occlusion_max",
            "lower bound exceeds upper bound",
        )?;
        check(self.aug_area_min >= 0.0, "augment.area_min", "must be non-negative")?;
        check(self.aug_area_max <= 1.0, "augment.area_max", "must not exceed 1")?;
        range(self.aug_area_min, self.aug_area_max, "augment.area_max")?;
        check(self.input_size > 0, "net.input_size", "must be positive")?;
        let spec =
            NetworkSpec::parse(self.input_size, self.input_size, &self.layers).map_err(|e| ConfigError::Invalid {
                key: "net.layers",
                message: e.to_string(),
            })?;
        check(
            self.frozen_layers <= spec.layers.len(),
            "net.frozen",
            "exceeds the number of layers",
        )?;
        check(self.batch_size > 0, "train.batch_size", "must be positive")?;
        check(self.learning_rate > 0.0, "train.learning_rate", "must be positive")?;
        check(
            self.beta1 > 0.0 && self.beta1 < 1.0,
            "train.beta1",
            "must lie in (0, 1)",
        )?;
        check(
            self.beta2 > 0.0 && self.beta2 < 1.0,
            "train.beta2",
            "must lie in (0, 1)",
        )?;
        check(self.adam_epsilon > 0.0, "train.epsilon", "must be positive")?;
        check(self.lambda > 0.0, "servo.lambda", "must be positive")?;
        check(self.dt > 0.0, "servo.dt", "must be positive")?;
        check(self.convergence_epsilon > 0.0, "servo.epsilon", "must be positive")?;
        check(self.hold_count > 0, "servo.hold", "must be positive")?;
        for q in &self.start.0 {
            check(
                q.within(self.actuation_limit_mm),
                "servo.start",
                "start lies outside robot.limit_mm",
            )?;
        }
        check(
            self.joint_noise_std_mm >= 0.0,
            "perturb.joint_noise_std_mm",
            "must be non-negative",
        )?;
        check(self.gain_scale_min > 0.0, "perturb.gain_min", "must be positive")?;
        range(self.gain_scale_min, self.gain_scale_max, "perturb.gain_max")?;
        check(self.refresh_period > 0, "perturb.refresh_period", "must be positive")?;
        check(self.pert_gain_min > 0.0, "perturb.light_gain_min", "must be positive")?;
        range(self.pert_gain_min, self.pert_gain_max, "perturb.light_gain_max")?;
        range(
            self.pert_gradient_min,
            self.pert_gradient_max,
            "perturb.light_gradient_max",
        )?;
        check(
            self.pert_occlusion_min <= self.pert_occlusion_max,
            "perturb.occlusion_max",
            "lower bound exceeds upper bound",
        )?;
        check(self.pert_area_min >= 0.0, "perturb.area_min", "must be non-negative")?;
        check(self.pert_area_max <= 1.0, "perturb.area_max", "must not exceed 1")?;
        range(self.pert_area_min, self.pert_area_max, "perturb.area_max")?;
        Ok(())
    }

    pub fn geometry(&self) -> RobotGeometry {
        RobotGeometry {
            backbone_length: self.backbone_length_m,
            ..RobotGeometry::default().with_tendon_offset(self.tendon_offset_mm * 1e-3)
        }
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics {
            width: self.camera_width,
            height: self.camera_height,
            horizontal_fov_deg: self.camera_fov_deg,
        }
    }

    pub fn texture(&self) -> Result<ImageBuffer, ConfigError> {
        if self.texture.is_empty() {
            let s = seed::derive_seed(self.seed, seed::TAG_TEXTURE, 0);
            Ok(procedural_texture(self.texture_size, self.texture_size, s))
        } else {
            ImageBuffer::load_png(Path::new(&self.texture))
                .map_err(|e| ConfigError::Texture(format!("{}: {e}", self.texture)))
        }
    }

    /// The target plane. Fails when the texture cannot be loaded or the
    /// home view would see past the texture edge.
    pub fn scene(&self) -> Result<PlanarScene, ConfigError> {
        let scene = PlanarScene::new(self.texture()?, self.plane_distance_m, self.plane_halfwidth_m);
        scene
            .validate_home_view(&self.intrinsics(), self.backbone_length_m)
            .map_err(|e| ConfigError::Invalid {
                key: "scene.plane_halfwidth_m",
                message: e.to_string(),
            })?;
        Ok(scene)
    }

    pub fn augmentation(&self) -> AugmentationConfig {
        AugmentationConfig {
            lighting_gain: Interval::new(self.aug_gain_min, self.aug_gain_max),
            lighting_gradient: Interval::new(self.aug_gradient_min, self.aug_gradient_max),
            occlusion_count: Interval::new(self.aug_occlusion_min, self.aug_occlusion_max),
            occlusion_area_fraction: Interval::new(self.aug_area_min, self.aug_area_max),
        }
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            geometry: self.geometry(),
            intrinsics: self.intrinsics(),
            spiral: SpiralConfig {
                amplitude_mm: self.spiral_amplitude_mm,
                periods: self.spiral_periods,
                samples: self.spiral_samples,
            },
            augmentation: self.augmentation(),
            labels: LabelMap { beta: self.label_beta },
            input_size: self.input_size,
            seed: self.seed,
        }
    }

    pub fn network_spec(&self) -> NetworkSpec {
        NetworkSpec::parse(self.input_size, self.input_size, &self.layers)
            .expect("validated layers")
            .freeze_first(self.frozen_layers)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.adam_epsilon,
            seed: self.seed,
        }
    }

    pub fn servo_config(&self) -> ServoConfig {
        ServoConfig {
            lambda: self.lambda,
            dt: self.dt,
            max_iterations: self.max_iterations,
            convergence_epsilon: self.convergence_epsilon,
            hold_count: self.hold_count,
            actuation_limit_mm: self.actuation_limit_mm,
        }
    }

    pub fn perturbation_config(&self) -> PerturbationConfig {
        PerturbationConfig {
            joint_noise_std: self.joint_noise_std_mm,
            gain_scale: Interval::new(self.gain_scale_min, self.gain_scale_max),
            refresh_period: self.refresh_period,
            scene: AugmentationConfig {
                lighting_gain: Interval::new(self.pert_gain_min, self.pert_gain_max),
                lighting_gradient: Interval::new(self.pert_gradient_min, self.pert_gradient_max),
                occlusion_count: Interval::new(self.pert_occlusion_min, self.pert_occlusion_max),
                occlusion_area_fraction: Interval::new(self.pert_area_min, self.pert_area_max),
            },
            joint_noise: self.joint_noise,
            gain_scaling: self.gain_scaling,
            scene_perturbation: self.scene_perturbation,
        }
    }
}
