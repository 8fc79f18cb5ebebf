//! RGB raster with values in [0, 1] and the resampling shared by the dataset
//! generator and the servo loop.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image buffer has {actual} values, expected {expected} for {width}x{height}x3")]
    BadLength {
        width: usize,
        height: usize,
        expected: usize,
        actual: usize,
    },
    #[error("image dimensions must be nonzero, got {width}x{height}")]
    Empty { width: usize, height: usize },
    #[error("PNG {path}: {source}")]
    Png {
        path: String,
        #[source]
        source: ::image::ImageError,
    },
}

/// Row-major interleaved RGB image. Every value is kept in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl ImageBuffer {
    pub const CHANNELS: usize = 3;

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let rgb = rgb.map(|v| v.clamp(0.0, 1.0));
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    /// Wraps raw interleaved RGB values, clamping them to [0, 1].
    /// NaN becomes 0.
    pub fn from_vec(width: usize, height: usize, mut data: Vec<f32>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::Empty { width, height });
        }
        let expected = width * height * 3;
        if data.len() != expected {
            return Err(ImageError::BadLength {
                width,
                height,
                expected,
                actual: data.len(),
            });
        }
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(x, y).map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[i + c] = v.clamp(0.0, 1.0);
        }
    }

    /// Applies `f` to every value and clamps the result.
    pub fn map_values(&mut self, mut f: impl FnMut(usize, f32) -> f32) {
        if self.width == 0 {
            return;
        }
        for row in self.data.chunks_exact_mut(self.width * Self::CHANNELS) {
            for (x, px) in row.chunks_exact_mut(Self::CHANNELS).enumerate() {
                for v in px {
                    let out = f(x, *v);
                    *v = if out.is_nan() { 0.0 } else { out.clamp(0.0, 1.0) };
                }
            }
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum::<f64>() / self.data.len() as f64
    }

    /// Rounds every value to the nearest multiple of 1/255, the exact set of
    /// values an 8-bit PNG can hold.
    pub fn quantized(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f32::from(to_u8(v)) / 255.0).collect(),
        }
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_u8(v)).collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self, ImageError> {
        Self::from_vec(width, height, bytes.iter().map(|&b| f32::from(b) / 255.0).collect())
    }

    pub fn load_png(path: &Path) -> Result<Self, ImageError> {
        let img = ::image::open(path)
            .map_err(|source| ImageError::Png {
                path: path.display().to_string(),
                source,
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Self::from_rgb8(w as usize, h as usize, img.as_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        ::image::save_buffer_with_format(
            path,
            &self.to_rgb8(),
            self.width as u32,
            self.height as u32,
            ::image::ExtendedColorType::Rgb8,
            ::image::ImageFormat::Png,
        )
        .map_err(|source| ImageError::Png {
            path: path.display().to_string(),
            source,
        })
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Per-axis resampling weights for a triangle (bilinear) filter.
///
/// When downscaling by a factor `s > 1` the triangle is widened to a
/// half-width of `s` input pixels so that every input pixel contributes. For
/// `s <= 1` this is plain bilinear interpolation between the two nearest
/// samples.
fn triangle_weights(src: usize, dst: usize) -> Vec<(usize, Vec<f64>)> {
    let scale = src as f64 / dst as f64;
    let support = scale.max(1.0);
    (0..dst)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale;
            let lo = ((center - support).floor().max(0.0)) as usize;
            let hi = ((center + support).ceil() as usize).min(src);
            let mut weights: Vec<f64> = (lo..hi)
                .map(|j| {
                    let dist = ((j as f64 + 0.5) - center).abs() / support;
                    (1.0 - dist).max(0.0)
                })
                .collect();
            let total: f64 = weights.iter().sum();
            if total > 0.0 {
                weights.iter_mut().for_each(|w| *w /= total);
                (lo, weights)
            } else {
                // center lands exactly on a sample with zero-width support
                let j = (center.floor() as usize).min(src - 1);
                (j, vec![1.0])
            }
        })
        .collect()
}

/// Separable bilinear resize with an anti-aliasing triangle filter.
///
/// The identity resize returns the input unchanged.
pub fn resize_bilinear(img: &ImageBuffer, width: usize, height: usize) -> ImageBuffer {
    if img.width == width && img.height == height {
        return img.clone();
    }
    let wx = triangle_weights(img.width, width);
    let wy = triangle_weights(img.height, height);

    // horizontal pass into f64 rows
    let mut horiz = vec![0.0f64; img.height * width * 3];
    for y in 0..img.height {
        let row = &img.data[y * img.width * 3..(y + 1) * img.width * 3];
        for (x, (start, weights)) in wx.iter().enumerate() {
            let mut acc = [0.0f64; 3];
            for (k, w) in weights.iter().enumerate() {
                let j = (start + k) * 3;
                for c in 0..3 {
                    acc[c] += w * f64::from(row[j + c]);
                }
            }
            horiz[(y * width + x) * 3..(y * width + x) * 3 + 3].copy_from_slice(&acc);
        }
    }

    let mut data = vec![0.0f32; width * height * 3];
    for (y, (start, weights)) in wy.iter().enumerate() {
        for x in 0..width {
            let mut acc = [0.0f64; 3];
            for (k, w) in weights.iter().enumerate() {
                let j = ((start + k) * width + x) * 3;
                for c in 0..3 {
                    acc[c] += w * horiz[j + c];
                }
            }
            for c in 0..3 {
                data[(y * width + x) * 3 + c] = (acc[c] as f32).clamp(0.0, 1.0);
            }
        }
    }
    ImageBuffer { width, height, data }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_length() {
        assert!(matches!(
            ImageBuffer::from_vec(2, 2, vec![0.0; 11]),
            Err(ImageError::BadLength { expected: 12, .. })
        ));
    }

    #[test]
    fn clamps_on_construction() {
        let img = ImageBuffer::from_vec(1, 1, vec![-1.0, 0.5, 7.0]).unwrap();
        assert_eq!(img.data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn identity_resize_is_exact() {
        let img = ImageBuffer::from_fn(5, 3, |x, y| [x as f32 / 5.0, y as f32 / 3.0, 0.25]);
        assert_eq!(resize_bilinear(&img, 5, 3), img);
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = ImageBuffer::filled(37, 23, [0.2, 0.4, 0.6]);
        let out = resize_bilinear(&img, 8, 8);
        for v in out.data().chunks(3) {
            assert!((v[0] - 0.2).abs() < 1e-6);
            assert!((v[1] - 0.4).abs() < 1e-6);
            assert!((v[2] - 0.6).abs() < 1e-6);
        }
    }

    #[test]
    fn checkerboard_halving_matches_hand_computation() {
        // 8x8 one-pixel checkerboard, (x + y) odd = 1, halved to 4x4.
        let img = ImageBuffer::from_fn(8, 8, |x, y| {
            let v = ((x + y) % 2) as f32;
            [v, v, v]
        });
        let out = resize_bilinear(&img, 4, 4);
        // The triangle spans two input pixels either side of the output
        // centre, giving per-axis taps (1, 3, 3, 1) / 8. The alternating sum
        // of those taps is zero, so interior outputs are exactly the mean 0.5.
        // At a border the outer tap is dropped and (3, 3, 1) / 7 remains; the
        // odd-parity products sum to (9 + 9 + 3 + 3) / 49 where the corner
        // pixel is even and (9 + 9 + 3 + 3 + 1) / 49 where it is odd.
        for y in 0..4 {
            for x in 0..4 {
                let v = out.pixel(x, y)[0];
                let interior_x = x == 1 || x == 2;
                let interior_y = y == 1 || y == 2;
                let expected = if interior_x || interior_y {
                    0.5
                } else if x == y {
                    24.0 / 49.0
                } else {
                    25.0 / 49.0
                };
                assert!((v - expected).abs() < 1e-6, "({x},{y}) = {v}");
            }
        }
    }

    #[test]
    fn quantize_is_idempotent_and_png_exact() {
        let img = ImageBuffer::from_fn(3, 2, |x, y| [x as f32 * 0.3, y as f32 * 0.77, 0.123]);
        let q = img.quantized();
        assert_eq!(q.quantized(), q);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.png");
        q.save_png(&path).unwrap();
        assert_eq!(ImageBuffer::load_png(&path).unwrap(), q);
    }
}
