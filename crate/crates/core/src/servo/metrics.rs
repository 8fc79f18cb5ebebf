//! Image-similarity metrics for judging convergence.

use thiserror::Error;

use crate::image::ImageBuffer;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("cannot normalise a constant image")]
    ConstantImage,
    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
}

/// An image shifted and scaled to zero mean and unit standard deviation over
/// all pixels and channels.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl NormalizedImage {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Test hook for building arbitrary normalised images.
    pub fn from_raw(width: usize, height: usize, data: Vec<f64>) -> Option<Self> {
        (data.len() == width * height * ImageBuffer::CHANNELS).then_some(Self { width, height, data })
    }
}

pub fn normalize_for_sad(img: &ImageBuffer) -> Result<NormalizedImage, MetricError> {
    let values: Vec<f64> = img.data().iter().map(|&v| f64::from(v)).collect();
    if values.is_empty() {
        return Err(MetricError::ConstantImage);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 1e-12) {
        return Err(MetricError::ConstantImage);
    }
    Ok(NormalizedImage {
        width: img.width(),
        height: img.height(),
        data: values.iter().map(|v| (v - mean) / std).collect(),
    })
}

fn check_dims(a: &NormalizedImage, b: &NormalizedImage) -> Result<(), MetricError> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(MetricError::DimensionMismatch(a.width, a.height, b.width, b.height));
    }
    Ok(())
}

/// Sum of absolute differences between two normalised images.
pub fn sad(current: &NormalizedImage, target: &NormalizedImage) -> Result<f64, MetricError> {
    check_dims(current, target)?;
    Ok(current.data.iter().zip(&target.data).map(|(a, b)| (a - b).abs()).sum())
}

/// `|current - target|` rescaled so the largest difference is white.
pub fn difference_image(current: &NormalizedImage, target: &NormalizedImage) -> Result<ImageBuffer, MetricError> {
    check_dims(current, target)?;
    let diff: Vec<f64> = current
        .data
        .iter()
        .zip(&target.data)
        .map(|(a, b)| (a - b).abs())
        .collect();
    let max = diff.iter().cloned().fold(0.0, f64::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let data = diff.iter().map(|d| (d * scale) as f32).collect();
    Ok(ImageBuffer::from_vec(current.width, current.height, data).expect("matching length"))
}
