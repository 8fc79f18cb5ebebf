//! Pinhole ray casting of a single textured plane, and the lighting and
//! occlusion augmentations applied to rendered frames.
//!
//! The camera looks along its local +z axis with image x to the right and
//! image y downwards. The scene is the plane `z = D` in the robot base frame
//! with the texture centred on the base z axis, texture columns running along
//! +x and rows along +y. At the home pose the rendered frame is therefore an
//! upright, axis-aligned crop of the texture.

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::image::ImageBuffer;
use crate::kinematics::RigidPose;

#[derive(Debug, Error, PartialEq)]
pub enum RenderError {
    #[error("camera rotation is not orthonormal")]
    DegeneratePose,
    #[error("invalid camera intrinsics: {0}")]
    Intrinsics(String),
    #[error("invalid scene: {0}")]
    Scene(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view in degrees.
    pub horizontal_fov_deg: f64,
}

impl Default for CameraIntrinsics {
    /// 640x480 USB camera with a 19° field of view.
    fn default() -> Self {
        Self {
            width: 640,
            height: 480,
            horizontal_fov_deg: 19.0,
        }
    }
}

impl CameraIntrinsics {
    pub fn new(width: usize, height: usize, horizontal_fov_deg: f64) -> Result<Self, RenderError> {
        let intr = Self {
            width,
            height,
            horizontal_fov_deg,
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        if self.width == 0 || self.height == 0 {
            return Err(RenderError::Intrinsics("image size must be nonzero".into()));
        }
        if !(self.horizontal_fov_deg > 0.0 && self.horizontal_fov_deg < 180.0) {
            return Err(RenderError::Intrinsics(format!(
                "field of view {} deg outside (0, 180)",
                self.horizontal_fov_deg
            )));
        }
        Ok(())
    }

    /// Focal length in pixels, `(width / 2) / tan(fov / 2)`.
    pub fn focal_px(&self) -> f64 {
        (self.width as f64 / 2.0) / (self.horizontal_fov_deg.to_radians() / 2.0).tan()
    }
}

/// Width of the region seen by a camera looking straight at a plane
/// `distance` metres away.
pub fn footprint_width(distance: f64, horizontal_fov_deg: f64) -> f64 {
    2.0 * distance * (horizontal_fov_deg.to_radians() / 2.0).tan()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanarScene {
    pub texture: ImageBuffer,
    /// Base-frame z coordinate of the plane, metres.
    pub plane_distance: f64,
    /// Half the physical texture width along x, metres. The half height
    /// follows from the texture aspect ratio.
    pub plane_halfwidth: f64,
    pub background: [f32; 3],
}

impl PlanarScene {
    pub fn new(texture: ImageBuffer, plane_distance: f64, plane_halfwidth: f64) -> Self {
        Self {
            texture,
            plane_distance,
            plane_halfwidth,
            background: [0.0; 3],
        }
    }

    pub fn plane_halfheight(&self) -> f64 {
        self.plane_halfwidth * self.texture.height() as f64 / self.texture.width() as f64
    }

    /// Checks that a camera at `(0, 0, camera_z)` looking along +z sees only
    /// textured plane.
    pub fn validate_home_view(&self, intr: &CameraIntrinsics, camera_z: f64) -> Result<(), RenderError> {
        if !(self.plane_halfwidth > 0.0) {
            return Err(RenderError::Scene("plane half-width must be positive".into()));
        }
        let standoff = self.plane_distance - camera_z;
        if !(standoff > 0.0) {
            return Err(RenderError::Scene(format!(
                "plane at z = {} is not in front of the home camera at z = {}",
                self.plane_distance, camera_z
            )));
        }
        let f = intr.focal_px();
        let half_w = standoff * (intr.width as f64 / 2.0) / f;
        let half_h = standoff * (intr.height as f64 / 2.0) / f;
        if half_w >= self.plane_halfwidth || half_h >= self.plane_halfheight() {
            return Err(RenderError::Scene(format!(
                "home view {:.4} x {:.4} m exceeds texture extent {:.4} x {:.4} m",
                2.0 * half_w,
                2.0 * half_h,
                2.0 * self.plane_halfwidth,
                2.0 * self.plane_halfheight()
            )));
        }
        Ok(())
    }
}

/// Samples `img` at continuous pixel coordinates where texel `(i, j)` has its
/// centre at `(i, j)`. Coordinates are clamped to the edge texels.
pub fn bilinear(img: &ImageBuffer, u: f64, v: f64) -> [f32; 3] {
    let max_u = (img.width() - 1) as f64;
    let max_v = (img.height() - 1) as f64;
    let u = u.clamp(0.0, max_u);
    let v = v.clamp(0.0, max_v);
    let x0 = u.floor() as usize;
    let y0 = v.floor() as usize;
    let x1 = (x0 + 1).min(img.width() - 1);
    let y1 = (y0 + 1).min(img.height() - 1);
    let fx = u - x0 as f64;
    let fy = v - y0 as f64;
    let p00 = img.pixel(x0, y0);
    let p10 = img.pixel(x1, y0);
    let p01 = img.pixel(x0, y1);
    let p11 = img.pixel(x1, y1);
    let mut out = [0.0f32; 3];
    for c in 0..3 {
        let top = f64::from(p00[c]) * (1.0 - fx) + f64::from(p10[c]) * fx;
        let bottom = f64::from(p01[c]) * (1.0 - fx) + f64::from(p11[c]) * fx;
        out[c] = (top * (1.0 - fy) + bottom * fy) as f32;
    }
    out
}

/// Bilinear texture lookup at plane coordinates, `None` outside the texture
/// extent. The texture spans `[-halfwidth, halfwidth]` along x and
/// `[-halfheight, halfheight]` along y, each texel centred in its cell.
struct TextureSampler<'a> {
    data: &'a [f32],
    width: usize,
    height: usize,
    halfwidth: f64,
    halfheight: f64,
    scale_u: f64,
    scale_v: f64,
}

impl<'a> TextureSampler<'a> {
    fn new(scene: &'a PlanarScene) -> Self {
        let (w, h) = (scene.texture.width(), scene.texture.height());
        let hw = scene.plane_halfwidth;
        let hh = scene.plane_halfheight();
        Self {
            data: scene.texture.data(),
            width: w,
            height: h,
            halfwidth: hw,
            halfheight: hh,
            scale_u: w as f64 / (2.0 * hw),
            scale_v: h as f64 / (2.0 * hh),
        }
    }

    #[inline]
    fn sample(&self, x: f64, y: f64) -> Option<[f32; 3]> {
        if !(x >= -self.halfwidth && x <= self.halfwidth && y >= -self.halfheight && y <= self.halfheight) {
            return None;
        }
        let u = ((x + self.halfwidth) * self.scale_u - 0.5).clamp(0.0, (self.width - 1) as f64);
        let v = ((y + self.halfheight) * self.scale_v - 0.5).clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (u as usize, v as usize);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let (fx, fy) = ((u - x0 as f64) as f32, (v - y0 as f64) as f32);
        let row0 = y0 * self.width;
        let row1 = y1 * self.width;
        let p = |i: usize| &self.data[i * 3..i * 3 + 3];
        let (p00, p10, p01, p11) = (p(row0 + x0), p(row0 + x1), p(row1 + x0), p(row1 + x1));
        let mut out = [0.0f32; 3];
        for c in 0..3 {
            let top = p00[c] + (p10[c] - p00[c]) * fx;
            let bottom = p01[c] + (p11[c] - p01[c]) * fx;
            out[c] = top + (bottom - top) * fy;
        }
        Some(out)
    }
}

/// Renders the view of `scene` from a camera at `camera_pose`.
///
/// Rays that miss the texture, run parallel to the plane or point away from
/// it return the scene background.
pub fn render(
    scene: &PlanarScene,
    camera_pose: &RigidPose,
    intr: &CameraIntrinsics,
) -> Result<ImageBuffer, RenderError> {
    intr.validate()?;
    if !camera_pose.is_orthonormal(1e-6) {
        return Err(RenderError::DegeneratePose);
    }
    let f = intr.focal_px();
    let cx = intr.width as f64 / 2.0;
    let cy = intr.height as f64 / 2.0;
    let r = camera_pose.rotation;
    let origin = camera_pose.translation;
    let depth = scene.plane_distance - origin.z;
    let width = intr.width;
    let sampler = TextureSampler::new(scene);

    let mut data = vec![0.0f32; intr.width * intr.height * 3];
    data.par_chunks_mut(width * 3).enumerate().for_each(|(py, row)| {
        let yn = (py as f64 + 0.5 - cy) / f;
        // Ray direction is affine in the pixel column.
        let step = [r[(0, 0)] / f, r[(1, 0)] / f, r[(2, 0)] / f];
        let x0 = (0.5 - cx) / f;
        let base = [
            r[(0, 0)] * x0 + r[(0, 1)] * yn + r[(0, 2)],
            r[(1, 0)] * x0 + r[(1, 1)] * yn + r[(1, 2)],
            r[(2, 0)] * x0 + r[(2, 1)] * yn + r[(2, 2)],
        ];
        for (px, out) in row.chunks_exact_mut(3).enumerate() {
            let t = px as f64;
            let dx = base[0] + t * step[0];
            let dy = base[1] + t * step[1];
            let dz = base[2] + t * step[2];
            let s = depth / dz;
            let rgb = if dz > 0.0 && s > 0.0 && s.is_finite() {
                sampler
                    .sample(origin.x + s * dx, origin.y + s * dy)
                    .unwrap_or(scene.background)
            } else {
                scene.background
            };
            out.copy_from_slice(&rgb);
        }
    });
    Ok(ImageBuffer::from_vec(intr.width, intr.height, data).expect("sized by intrinsics"))
}

/// `out(x, y) = clamp(img(x, y) * (gain + gradient * (x / width - 0.5)), 0, 1)`
pub fn apply_lighting(img: &ImageBuffer, gain: f64, gradient: f64) -> ImageBuffer {
    let mut out = img.clone();
    let width = img.width() as f64;
    let factor: Vec<f64> = (0..img.width())
        .map(|x| gain + gradient * (x as f64 / width - 0.5))
        .collect();
    out.map_values(|x, v| (f64::from(v) * factor[x]) as f32);
    out
}

/// Axis-aligned pixel rectangle `[x, x + width) x [y, y + height)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl PixelRect {
    pub fn clipped(&self, img_width: usize, img_height: usize) -> PixelRect {
        let x = self.x.min(img_width);
        let y = self.y.min(img_height);
        PixelRect {
            x,
            y,
            width: self.width.min(img_width - x),
            height: self.height.min(img_height - y),
        }
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }
}

/// Blackens every pixel inside any of `rects`.
pub fn apply_occlusion(img: &ImageBuffer, rects: &[PixelRect]) -> ImageBuffer {
    let mut out = img.clone();
    for rect in rects {
        let r = rect.clipped(img.width(), img.height());
        for y in r.y..r.y + r.height {
            for x in r.x..r.x + r.width {
                out.set_pixel(x, y, [0.0; 3]);
            }
        }
    }
    out
}

/// Closed interval `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval<T> {
    pub min: T,
    pub max: T,
}

impl<T: PartialOrd + Copy> Interval<T> {
    pub fn new(min: T, max: T) -> Self {
        Self { min, max }
    }

    pub fn point(v: T) -> Self {
        Self { min: v, max: v }
    }

    pub fn is_valid(&self) -> bool {
        self.min <= self.max
    }

    pub fn contains(&self, v: T) -> bool {
        self.min <= v && v <= self.max
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentationConfig {
    pub lighting_gain: Interval<f64>,
    /// Horizontal gain slope across one image width.
    pub lighting_gradient: Interval<f64>,
    pub occlusion_count: Interval<u32>,
    /// Area of each occluding rectangle as a fraction of the image.
    pub occlusion_area_fraction: Interval<f64>,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            lighting_gain: Interval::new(0.6, 1.4),
            lighting_gradient: Interval::new(-0.4, 0.4),
            occlusion_count: Interval::new(0, 2),
            occlusion_area_fraction: Interval::new(0.02, 0.3),
        }
    }
}

impl AugmentationConfig {
    /// No lighting change and no occlusion.
    pub fn identity() -> Self {
        Self {
            lighting_gain: Interval::point(1.0),
            lighting_gradient: Interval::point(0.0),
            occlusion_count: Interval::point(0),
            occlusion_area_fraction: Interval::point(0.0),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !self.lighting_gain.is_valid() || !(self.lighting_gain.min > 0.0) {
            return Err("lighting gain range must be nonempty and positive".into());
        }
        if !self.lighting_gradient.is_valid() {
            return Err("lighting gradient range is empty".into());
        }
        if !self.occlusion_count.is_valid() {
            return Err("occlusion count range is empty".into());
        }
        let a = self.occlusion_area_fraction;
        if !a.is_valid() || a.min < 0.0 || a.max > 1.0 {
            return Err("occlusion area fraction range must lie within [0, 1]".into());
        }
        Ok(())
    }
}

/// One sampled set of scene perturbations.
#[derive(Debug, Clone, PartialEq)]
pub struct Augmentation {
    pub gain: f64,
    pub gradient: f64,
    pub rects: Vec<PixelRect>,
}

impl Augmentation {
    pub fn identity() -> Self {
        Self {
            gain: 1.0,
            gradient: 0.0,
            rects: Vec::new(),
        }
    }

    pub fn apply(&self, img: &ImageBuffer) -> ImageBuffer {
        let lit = if self.gain == 1.0 && self.gradient == 0.0 {
            img.clone()
        } else {
            apply_lighting(img, self.gain, self.gradient)
        };
        if self.rects.is_empty() {
            lit
        } else {
            apply_occlusion(&lit, &self.rects)
        }
    }

    /// `x:y:w:h` entries joined by `;`.
    pub fn rects_string(&self) -> String {
        self.rects
            .iter()
            .map(|r| format!("{}:{}:{}:{}", r.x, r.y, r.width, r.height))
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn parse_rects(s: &str) -> Option<Vec<PixelRect>> {
        if s.is_empty() {
            return Some(Vec::new());
        }
        s.split(';')
            .map(|part| {
                let v: Vec<usize> = part.split(':').map(|t| t.parse().ok()).collect::<Option<_>>()?;
                match v[..] {
                    [x, y, width, height] => Some(PixelRect { x, y, width, height }),
                    _ => None,
                }
            })
            .collect()
    }
}

fn uniform(rng: &mut impl Rng, range: Interval<f64>) -> f64 {
    if range.min == range.max {
        range.min
    } else {
        rng.random_range(range.min..=range.max)
    }
}

/// Draws lighting and occlusion for an image of `width x height` pixels.
///
/// Rectangles have a log-uniform aspect ratio in [1/2, 2] and are placed
/// uniformly so that they lie entirely inside the image.
pub fn sample_augmentation(cfg: &AugmentationConfig, width: usize, height: usize, rng: &mut impl Rng) -> Augmentation {
    let gain = uniform(rng, cfg.lighting_gain);
    let gradient = uniform(rng, cfg.lighting_gradient);
    let count = rng.random_range(cfg.occlusion_count.min..=cfg.occlusion_count.max);
    let rects = (0..count)
        .map(|_| {
            let area = uniform(rng, cfg.occlusion_area_fraction);
            let aspect = uniform(rng, Interval::new(-std::f64::consts::LN_2, std::f64::consts::LN_2)).exp();
            let mut wf = (area * aspect).sqrt();
            let mut hf = (area / aspect).sqrt();
            if wf > 1.0 {
                wf = 1.0;
                hf = area;
            }
            if hf > 1.0 {
                hf = 1.0;
                wf = area;
            }
            let w = ((wf * width as f64).round() as usize).min(width);
            let h = ((hf * height as f64).round() as usize).min(height);
            let x = rng.random_range(0..=width - w);
            let y = rng.random_range(0..=height - h);
            PixelRect {
                x,
                y,
                width: w,
                height: h,
            }
        })
        .collect();
    Augmentation { gain, gradient, rects }
}

/// Deterministic synthetic target texture: a smooth colour field with soft
/// blobs and a few hard-edged shapes, so that every part of the plane looks
/// different from every other.
pub fn procedural_texture(width: usize, height: usize, seed: u64) -> ImageBuffer {
    let mut rng = crate::seed::stream(seed, crate::seed::TAG_TEXTURE, 0);
    let scale = width.max(height) as f64;
    let mut acc = vec![0.0f64; width * height * 3];

    // low-frequency base: a few random plane waves per channel
    let waves: Vec<(usize, f64, f64, f64, f64)> = (0..9)
        .map(|i| {
            let freq = rng.random_range(0.5..2.5) * std::f64::consts::TAU / scale;
            let dir = rng.random_range(0.0..std::f64::consts::TAU);
            (
                i % 3,
                freq * dir.cos(),
                freq * dir.sin(),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.08..0.18),
            )
        })
        .collect();
    for y in 0..height {
        for x in 0..width {
            let i = (y * width + x) * 3;
            for c in 0..3 {
                acc[i + c] = 0.5;
            }
            for &(c, kx, ky, phase, amp) in &waves {
                acc[i + c] += amp * (kx * x as f64 + ky * y as f64 + phase).sin();
            }
        }
    }

    let blobs = 24 * (width * height) / (256 * 256);
    for _ in 0..blobs.max(8) {
        let cx = rng.random_range(0.0..width as f64);
        let cy = rng.random_range(0.0..height as f64);
        let sigma = rng.random_range(0.01..0.04) * scale;
        let color: [f64; 3] = [
            rng.random_range(-0.45..0.45),
            rng.random_range(-0.45..0.45),
            rng.random_range(-0.45..0.45),
        ];
        let reach = 3.0 * sigma;
        let x0 = (cx - reach).floor().max(0.0) as usize;
        let x1 = ((cx + reach).ceil() as usize).min(width);
        let y0 = (cy - reach).floor().max(0.0) as usize;
        let y1 = ((cy + reach).ceil() as usize).min(height);
        for y in y0..y1 {
            for x in x0..x1 {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                let w = (-d2 / (2.0 * sigma * sigma)).exp();
                let i = (y * width + x) * 3;
                for c in 0..3 {
                    acc[i + c] += w * color[c];
                }
            }
        }
    }

    let shapes = 6 * (width * height) / (256 * 256);
    for k in 0..shapes.max(4) {
        let cx = rng.random_range(0.0..width as f64);
        let cy = rng.random_range(0.0..height as f64);
        let size = rng.random_range(0.01..0.03) * scale;
        let color: [f64; 3] = [
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
        ];
        let x0 = (cx - size).floor().max(0.0) as usize;
        let x1 = ((cx + size).ceil() as usize).min(width);
        let y0 = (cy - size).floor().max(0.0) as usize;
        let y1 = ((cy + size).ceil() as usize).min(height);
        for y in y0..y1 {
            for x in x0..x1 {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                let inside = if k % 2 == 0 {
                    dx * dx + dy * dy <= size * size
                } else {
                    dx.abs() <= size && dy.abs() <= 0.5 * size
                };
                if inside {
                    let i = (y * width + x) * 3;
                    acc[i..i + 3].copy_from_slice(&color);
                }
            }
        }
    }

    ImageBuffer::from_vec(width, height, acc.into_iter().map(|v| v as f32).collect())
        .expect("sized above")
        .quantized()
}
