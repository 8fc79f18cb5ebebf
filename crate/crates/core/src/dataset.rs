//! Spiral-path dataset generation with tanh-mapped labels.
//!
//! Sample `x` (1-based) of an `n`-point spiral with amplitude `A` and `P`
//! turns sits at
//!
//! ```text
//! q1 = (A / n) x cos(2 pi P x / n)
//! q2 = (A / n) x sin(2 pi P x / n)
//! ```
//!
//! so samples crowd towards the origin. Each point is rendered, perturbed with
//! a sampled [`Augmentation`], downscaled to the network input size and
//! labelled with `tanh(beta q)`.
//!
//! On disk a dataset is a directory of PNGs plus `manifest.csv`: `#`-prefixed
//! `key = value` header lines echoing the generating configuration, then a
//! CSV table with one row per sample.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::image::{resize_bilinear, ImageBuffer, ImageError};
use crate::kinematics::{forward_kinematics, RobotGeometry, TendonDisplacement};
use crate::render::{
    render, sample_augmentation, Augmentation, AugmentationConfig, CameraIntrinsics, PlanarScene, RenderError,
};
use crate::seed;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const MANIFEST_COLUMNS: &str = "index,q1_mm,q2_mm,label1,label2,gain,gradient,occlusion,file";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid dataset config: {0}")]
    Config(String),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpiralConfig {
    /// Final radius `A`, millimetres.
    pub amplitude_mm: f64,
    /// Number of turns `P`.
    pub periods: f64,
    /// Number of points `n`.
    pub samples: usize,
}

impl Default for SpiralConfig {
    /// 5000 points, 7 mm amplitude, 20 turns.
    fn default() -> Self {
        Self {
            amplitude_mm: 7.0,
            periods: 20.0,
            samples: 5000,
        }
    }
}

impl SpiralConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if !(self.amplitude_mm > 0.0) || !(self.periods > 0.0) || self.samples == 0 {
            return Err(DatasetError::Config(
                "spiral needs amplitude > 0, periods > 0 and at least one sample".into(),
            ));
        }
        Ok(())
    }
}

pub fn spiral_point(cfg: &SpiralConfig, x: usize) -> TendonDisplacement {
    let n = cfg.samples as f64;
    let x = x as f64;
    let radius = cfg.amplitude_mm / n * x;
    let angle = cfg.periods / n * x * std::f64::consts::TAU;
    TendonDisplacement::new(radius * angle.cos(), radius * angle.sin())
}

/// The `n` spiral points for `x = 1..=n`.
pub fn spiral_path(cfg: &SpiralConfig) -> Vec<TendonDisplacement> {
    (1..=cfg.samples).map(|x| spiral_point(cfg, x)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelMap {
    /// tanh sharpness, 1/mm.
    pub beta: f64,
}

impl Default for LabelMap {
    fn default() -> Self {
        Self { beta: 1.0 }
    }
}

impl LabelMap {
    pub fn label(&self, q: TendonDisplacement) -> [f64; 2] {
        label_of(q, self)
    }

    /// Inverse map from a label (or network output) back to millimetres.
    /// Values are clamped just inside (-1, 1).
    pub fn displacement(&self, label: [f64; 2]) -> TendonDisplacement {
        let inv = |v: f64| v.clamp(-1.0 + 1e-12, 1.0 - 1e-12).atanh() / self.beta;
        TendonDisplacement::new(inv(label[0]), inv(label[1]))
    }
}

/// Componentwise `tanh(beta * q_mm)`.
pub fn label_of(q: TendonDisplacement, map: &LabelMap) -> [f64; 2] {
    [(map.beta * q.q1).tanh(), (map.beta * q.q2).tanh()]
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSample {
    pub index: usize,
    /// Network-input-sized image, quantised to 8 bits.
    pub image: ImageBuffer,
    pub q: TendonDisplacement,
    pub label: [f64; 2],
    pub augmentation: Augmentation,
}

impl DatasetSample {
    pub fn file_name(&self) -> String {
        format!("sample_{:05}.png", self.index)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub geometry: RobotGeometry,
    pub intrinsics: CameraIntrinsics,
    pub spiral: SpiralConfig,
    pub augmentation: AugmentationConfig,
    pub labels: LabelMap,
    /// Square network input size in pixels.
    pub input_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub input_size: usize,
    pub samples: Vec<DatasetSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Renders and labels every spiral point. Sample `i` draws its augmentation
/// from the `(seed, "dataset", i)` stream, so the output does not depend on
/// thread scheduling.
pub fn generate_dataset(scene: &PlanarScene, cfg: &DatasetConfig) -> Result<Dataset, DatasetError> {
    cfg.spiral.validate()?;
    cfg.augmentation.validate().map_err(DatasetError::Config)?;
    cfg.intrinsics.validate()?;
    if cfg.input_size == 0 {
        return Err(DatasetError::Config("input size must be nonzero".into()));
    }
    if !(cfg.labels.beta > 0.0) {
        return Err(DatasetError::Config("label beta must be positive".into()));
    }
    let path = spiral_path(&cfg.spiral);
    let samples = path
        .par_iter()
        .enumerate()
        .map(|(index, &q)| {
            let pose = forward_kinematics(q, &cfg.geometry);
            let frame = render(scene, &pose, &cfg.intrinsics)?;
            let mut rng = seed::stream(cfg.seed, seed::TAG_DATASET, index as u64);
            let augmentation = sample_augmentation(&cfg.augmentation, frame.width(), frame.height(), &mut rng);
            let image = resize_bilinear(&augmentation.apply(&frame), cfg.input_size, cfg.input_size).quantized();
            Ok(DatasetSample {
                index,
                image,
                q,
                label: label_of(q, &cfg.labels),
                augmentation,
            })
        })
        .collect::<Result<Vec<_>, DatasetError>>()?;
    Ok(Dataset {
        input_size: cfg.input_size,
        samples,
    })
}

/// Manifest text: header lines, column names, one row per sample.
pub fn manifest_text(dataset: &Dataset, header: &[(String, String)]) -> String {
    let mut out = String::new();
    out.push_str("# dvs dataset manifest v1\n");
    let _ = writeln!(out, "# input_size = {}", dataset.input_size);
    for (k, v) in header {
        let _ = writeln!(out, "# {k} = {v}");
    }
    out.push_str(MANIFEST_COLUMNS);
    out.push('\n');
    for s in &dataset.samples {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            s.index,
            s.q.q1,
            s.q.q2,
            s.label[0],
            s.label[1],
            s.augmentation.gain,
            s.augmentation.gradient,
            s.augmentation.rects_string(),
            s.file_name()
        );
    }
    out
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes every sample PNG and the manifest into `dir`. On failure the
/// files written so far are removed.
pub fn write_dataset(dataset: &Dataset, header: &[(String, String)], dir: &Path) -> Result<(), DatasetError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written: Vec<PathBuf> = Vec::with_capacity(dataset.len() + 1);
    let result = (|| {
        for s in &dataset.samples {
            let path = dir.join(s.file_name());
            s.image.save_png(&path)?;
            written.push(path);
        }
        let manifest = dir.join(MANIFEST_FILE);
        fs::write(&manifest, manifest_text(dataset, header)).map_err(io_err(&manifest))?;
        written.push(manifest);
        Ok(())
    })();
    if result.is_err() {
        for path in &written {
            let _ = fs::remove_file(path);
        }
    }
    result
}

/// Reads a dataset directory written by [`write_dataset`]. Returns the
/// dataset and the header key-value pairs.
pub fn load_dataset(dir: &Path) -> Result<(Dataset, Vec<(String, String)>), DatasetError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let bad = |line: usize, message: String| DatasetError::Manifest {
        path: path.clone(),
        line,
        message,
    };
    let mut header = Vec::new();
    let mut input_size = None;
    let mut samples = Vec::new();
    let mut seen_columns = false;
    for (n, line) in text.lines().enumerate() {
        let lineno = n + 1;
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = rest.split_once('=') {
                let (k, v) = (k.trim().to_string(), v.trim().to_string());
                if k == "input_size" {
                    input_size = Some(
                        v.parse::<usize>()
                            .map_err(|_| bad(lineno, format!("bad input_size `{v}`")))?,
                    );
                } else {
                    header.push((k, v));
                }
            }
            continue;
        }
        if !seen_columns {
            if line != MANIFEST_COLUMNS {
                return Err(bad(lineno, format!("expected column header `{MANIFEST_COLUMNS}`")));
            }
            seen_columns = true;
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(bad(lineno, format!("expected 9 fields, found {}", fields.len())));
        }
        let num = |i: usize| -> Result<f64, DatasetError> {
            fields[i]
                .parse::<f64>()
                .map_err(|_| bad(lineno, format!("field {} is not a number: `{}`", i + 1, fields[i])))
        };
        let index = fields[0]
            .parse::<usize>()
            .map_err(|_| bad(lineno, format!("bad index `{}`", fields[0])))?;
        let rects = Augmentation::parse_rects(fields[7])
            .ok_or_else(|| bad(lineno, format!("bad occlusion `{}`", fields[7])))?;
        let image = ImageBuffer::load_png(&dir.join(fields[8]))?;
        samples.push(DatasetSample {
            index,
            image,
            q: TendonDisplacement::new(num(1)?, num(2)?),
            label: [num(3)?, num(4)?],
            augmentation: Augmentation {
                gain: num(5)?,
                gradient: num(6)?,
                rects,
            },
        });
    }
    let input_size = input_size.ok_or_else(|| bad(1, "missing `input_size` header".into()))?;
    if let Some(s) = samples
        .iter()
        .find(|s| s.image.width() != input_size || s.image.height() != input_size)
    {
        return Err(bad(0, format!("{} is not {input_size}x{input_size}", s.file_name())));
    }
    Ok((Dataset { input_size, samples }, header))
}
