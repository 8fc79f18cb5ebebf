//! C ABI over `dvs-core`.
//!
//! Every function returns a [`DvsStatus`]. On failure a message is available
//! from `dvs_last_error_message` until the next failing call on the same
//! thread. Handles are opaque and owned by the caller; release them with the
//! matching `*_free` function. Configuration is passed as run-config text
//! (`key = value` lines); a null pointer selects the defaults.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use dvs_core::config::RunConfig;
use dvs_core::dataset::{label_of, spiral_point, LabelMap, SpiralConfig};
use dvs_core::image::ImageBuffer;
use dvs_core::kinematics::{forward_kinematics, RobotGeometry, TendonDisplacement};
use dvs_core::nn::{load_parameters, NetworkSpec, ParameterSet};
use dvs_core::render::PlanarScene;
use dvs_core::servo::{normalize_for_sad, run_servo, sad, Controller, Plant, ServoContext};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DvsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Config = 4,
    Runtime = 5,
    Panic = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(DvsStatus, String);

impl Failure {
    fn new(status: DvsStatus, message: impl ToString) -> Self {
        Self(status, message.to_string())
    }
}

fn set_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DvsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DvsStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(&message);
            status
        }
        Err(_) => {
            set_error("internal panic");
            DvsStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure::new(DvsStatus::NullPointer, format!("`{name}` is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `text` is null or a valid NUL-terminated string.
unsafe fn str_arg<'a>(text: *const c_char, name: &str) -> Result<Option<&'a str>, Failure> {
    if text.is_null() {
        return Ok(None);
    }
    CStr::from_ptr(text)
        .to_str()
        .map(Some)
        .map_err(|_| Failure::new(DvsStatus::InvalidArgument, format!("`{name}` is not UTF-8")))
}

/// # Safety
/// `text` is null or a valid NUL-terminated string.
unsafe fn config_arg(text: *const c_char) -> Result<RunConfig, Failure> {
    match str_arg(text, "config_text")? {
        None => Ok(RunConfig::default()),
        Some(t) => RunConfig::parse(t).map_err(|e| Failure::new(DvsStatus::Config, e)),
    }
}

/// Message describing the most recent failure on this thread. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dvs_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Tip pose for tendon displacements in mm. Writes a row-major 3x3 rotation
/// into `rotation` and the translation in metres into `translation`.
///
/// # Safety
/// `rotation` points to 9 writable doubles and `translation` to 3.
#[no_mangle]
pub unsafe extern "C" fn dvs_forward_kinematics(
    q1_mm: f64,
    q2_mm: f64,
    backbone_length_m: f64,
    tendon_offset_m: f64,
    rotation: *mut f64,
    translation: *mut f64,
) -> DvsStatus {
    guard(|| {
        non_null(rotation, "rotation")?;
        non_null(translation, "translation")?;
        let geometry = RobotGeometry {
            backbone_length: backbone_length_m,
            tendon_offset: tendon_offset_m,
            ..RobotGeometry::default()
        };
        let q = TendonDisplacement::new(q1_mm, q2_mm);
        if !geometry.is_valid() || !q.is_finite() {
            return Err(Failure::new(
                DvsStatus::InvalidArgument,
                "non-finite displacement or invalid geometry",
            ));
        }
        let pose = forward_kinematics(q, &geometry);
        let rot = std::slice::from_raw_parts_mut(rotation, 9);
        for (dst, v) in rot.iter_mut().zip(pose.rotation_rows().iter().flatten()) {
            *dst = *v;
        }
        std::slice::from_raw_parts_mut(translation, 3).copy_from_slice(pose.translation.as_slice());
        Ok(())
    })
}

/// Point `x` (1-based) of a `samples`-point spiral.
///
/// # Safety
/// `q1_mm` and `q2_mm` are writable.
#[no_mangle]
pub unsafe extern "C" fn dvs_spiral_point(
    amplitude_mm: f64,
    periods: f64,
    samples: usize,
    x: usize,
    q1_mm: *mut f64,
    q2_mm: *mut f64,
) -> DvsStatus {
    guard(|| {
        non_null(q1_mm, "q1_mm")?;
        non_null(q2_mm, "q2_mm")?;
        let cfg = SpiralConfig {
            amplitude_mm,
            periods,
            samples,
        };
        cfg.validate()
            .map_err(|e| Failure::new(DvsStatus::InvalidArgument, e))?;
        if x == 0 || x > samples {
            return Err(Failure::new(
                DvsStatus::InvalidArgument,
                format!("x = {x} outside 1..={samples}"),
            ));
        }
        let q = spiral_point(&cfg, x);
        *q1_mm = q.q1;
        *q2_mm = q.q2;
        Ok(())
    })
}

/// Training label `tanh(beta * q)` per component.
///
/// # Safety
/// `labels` points to 2 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn dvs_label(q1_mm: f64, q2_mm: f64, beta: f64, labels: *mut f64) -> DvsStatus {
    guard(|| {
        non_null(labels, "labels")?;
        if beta.is_nan() || beta <= 0.0 {
            return Err(Failure::new(DvsStatus::InvalidArgument, "beta must be positive"));
        }
        let l = label_of(TendonDisplacement::new(q1_mm, q2_mm), &LabelMap { beta });
        std::slice::from_raw_parts_mut(labels, 2).copy_from_slice(&l);
        Ok(())
    })
}

/// Sum of absolute differences of two normalised RGB images of
/// `width x height` pixels, row-major, values in [0, 1].
///
/// # Safety
/// `a` and `b` each point to `width * height * 3` readable floats.
#[no_mangle]
pub unsafe extern "C" fn dvs_sad(
    a: *const f32,
    b: *const f32,
    width: usize,
    height: usize,
    out: *mut f64,
) -> DvsStatus {
    guard(|| {
        non_null(a, "a")?;
        non_null(b, "b")?;
        non_null(out, "out")?;
        let len = width * height * ImageBuffer::CHANNELS;
        let img = |p: *const f32| {
            ImageBuffer::from_vec(width, height, std::slice::from_raw_parts(p, len).to_vec())
                .map_err(|e| Failure::new(DvsStatus::InvalidArgument, e))
        };
        let na = normalize_for_sad(&img(a)?).map_err(|e| Failure::new(DvsStatus::InvalidArgument, e))?;
        let nb = normalize_for_sad(&img(b)?).map_err(|e| Failure::new(DvsStatus::InvalidArgument, e))?;
        *out = sad(&na, &nb).map_err(|e| Failure::new(DvsStatus::InvalidArgument, e))?;
        Ok(())
    })
}

/// A target plane with the robot and camera that view it.
pub struct DvsScene {
    cfg: RunConfig,
    scene: PlanarScene,
}

impl DvsScene {
    fn plant(&self) -> Plant<'_> {
        Plant {
            scene: &self.scene,
            geometry: self.cfg.geometry(),
            intrinsics: self.cfg.intrinsics(),
        }
    }
}

/// Builds a scene from run-config text (`scene.*`, `robot.*`, `camera.*`
/// and `seed` keys).
///
/// # Safety
/// `config_text` is null or NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn dvs_scene_new(config_text: *const c_char, out: *mut *mut DvsScene) -> DvsStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let cfg = config_arg(config_text)?;
        let scene = cfg.scene().map_err(|e| Failure::new(DvsStatus::Config, e))?;
        *out = Box::into_raw(Box::new(DvsScene { cfg, scene }));
        Ok(())
    })
}

/// # Safety
/// `scene` is null or a handle from `dvs_scene_new` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dvs_scene_free(scene: *mut DvsScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// Rendered frame size in pixels.
///
/// # Safety
/// `scene` is a live handle; `width` and `height` are writable.
#[no_mangle]
pub unsafe extern "C" fn dvs_scene_frame_size(
    scene: *const DvsScene,
    width: *mut usize,
    height: *mut usize,
) -> DvsStatus {
    guard(|| {
        non_null(scene, "scene")?;
        non_null(width, "width")?;
        non_null(height, "height")?;
        *width = (*scene).cfg.camera_width;
        *height = (*scene).cfg.camera_height;
        Ok(())
    })
}

/// Renders the view at `q` into `rgb`, row-major RGB in [0, 1]. `len` must
/// equal `width * height * 3` from `dvs_scene_frame_size`.
///
/// # Safety
/// `scene` is a live handle; `rgb` points to `len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn dvs_scene_render(
    scene: *const DvsScene,
    q1_mm: f64,
    q2_mm: f64,
    rgb: *mut f32,
    len: usize,
) -> DvsStatus {
    guard(|| {
        non_null(scene, "scene")?;
        non_null(rgb, "rgb")?;
        let scene = &*scene;
        let expected = scene.cfg.camera_width * scene.cfg.camera_height * ImageBuffer::CHANNELS;
        if len != expected {
            return Err(Failure::new(
                DvsStatus::InvalidArgument,
                format!("buffer holds {len} floats, frame needs {expected}"),
            ));
        }
        let q = TendonDisplacement::new(q1_mm, q2_mm);
        if !q.is_finite() {
            return Err(Failure::new(DvsStatus::InvalidArgument, "non-finite displacement"));
        }
        let frame = scene.plant().view(q).map_err(|e| Failure::new(DvsStatus::Runtime, e))?;
        std::slice::from_raw_parts_mut(rgb, len).copy_from_slice(frame.data());
        Ok(())
    })
}

/// A trained regressor.
pub struct DvsNetwork {
    spec: NetworkSpec,
    params: ParameterSet<f32>,
}

/// Loads a checkpoint for the network described by `config_text`
/// (`net.*` keys).
///
/// # Safety
/// `config_text` is null or NUL-terminated; `checkpoint_path` is
/// NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn dvs_network_load(
    config_text: *const c_char,
    checkpoint_path: *const c_char,
    out: *mut *mut DvsNetwork,
) -> DvsStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let cfg = config_arg(config_text)?;
        let path = str_arg(checkpoint_path, "checkpoint_path")?
            .ok_or_else(|| Failure::new(DvsStatus::NullPointer, "`checkpoint_path` is null"))?;
        let spec = cfg.network_spec();
        let params = load_parameters(&spec, Path::new(path)).map_err(|e| {
            let status = if matches!(e, dvs_core::nn::NnError::Io(_)) {
                DvsStatus::Io
            } else {
                DvsStatus::Runtime
            };
            Failure::new(status, format!("{path}: {e}"))
        })?;
        *out = Box::into_raw(Box::new(DvsNetwork { spec, params }));
        Ok(())
    })
}

/// # Safety
/// `network` is null or a handle from `dvs_network_load` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dvs_network_free(network: *mut DvsNetwork) {
    if !network.is_null() {
        drop(Box::from_raw(network));
    }
}

/// Network output for an RGB frame of any size; the frame is resized to
/// the network input first.
///
/// # Safety
/// `network` is a live handle; `rgb` points to `width * height * 3`
/// readable floats; `output` to 2 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn dvs_network_predict(
    network: *const DvsNetwork,
    rgb: *const f32,
    width: usize,
    height: usize,
    output: *mut f64,
) -> DvsStatus {
    guard(|| {
        non_null(network, "network")?;
        non_null(rgb, "rgb")?;
        non_null(output, "output")?;
        let net = &*network;
        let len = width * height * ImageBuffer::CHANNELS;
        let frame = ImageBuffer::from_vec(width, height, std::slice::from_raw_parts(rgb, len).to_vec())
            .map_err(|e| Failure::new(DvsStatus::InvalidArgument, e))?;
        let controller = Controller {
            spec: &net.spec,
            params: &net.params,
        };
        let f = controller
            .output(&frame)
            .map_err(|e| Failure::new(DvsStatus::Runtime, e))?;
        std::slice::from_raw_parts_mut(output, 2).copy_from_slice(&f);
        Ok(())
    })
}

/// A closed-loop experiment: a scene, a network and servo settings.
pub struct DvsServo {
    cfg: RunConfig,
    scene: DvsScene,
    network: DvsNetwork,
}

/// Outcome of one `dvs_servo_run`.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DvsServoResult {
    /// 1 when the loop converged, else 0.
    pub converged: i32,
    pub iterations: usize,
    pub final_q1_mm: f64,
    pub final_q2_mm: f64,
    pub initial_sad: f64,
    pub final_sad: f64,
}

/// Combines copies of `scene` and `network` with the `servo.*` and
/// `perturb.*` keys of `config_text`.
///
/// # Safety
/// `scene` and `network` are live handles; `config_text` is null or
/// NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn dvs_servo_new(
    scene: *const DvsScene,
    network: *const DvsNetwork,
    config_text: *const c_char,
    out: *mut *mut DvsServo,
) -> DvsStatus {
    guard(|| {
        non_null(scene, "scene")?;
        non_null(network, "network")?;
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let cfg = config_arg(config_text)?;
        let servo = DvsServo {
            cfg,
            scene: DvsScene {
                cfg: (*scene).cfg.clone(),
                scene: (*scene).scene.clone(),
            },
            network: DvsNetwork {
                spec: (*network).spec.clone(),
                params: (*network).params.clone(),
            },
        };
        servo.context()?;
        *out = Box::into_raw(Box::new(servo));
        Ok(())
    })
}

impl DvsServo {
    fn context(&self) -> Result<ServoContext<'_>, Failure> {
        let controller = Controller {
            spec: &self.network.spec,
            params: &self.network.params,
        };
        ServoContext::new(
            self.scene.plant(),
            controller,
            self.cfg.servo_config(),
            self.cfg.perturbation_config(),
        )
        .map_err(|e| Failure::new(DvsStatus::Config, e))
    }
}

/// # Safety
/// `servo` is null or a handle from `dvs_servo_new` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dvs_servo_free(servo: *mut DvsServo) {
    if !servo.is_null() {
        drop(Box::from_raw(servo));
    }
}

/// Runs the loop from `q` using the `(seed, "servo", run)` random stream.
///
/// # Safety
/// `servo` is a live handle; `result` is writable.
#[no_mangle]
pub unsafe extern "C" fn dvs_servo_run(
    servo: *const DvsServo,
    q1_mm: f64,
    q2_mm: f64,
    seed: u64,
    run: u64,
    result: *mut DvsServoResult,
) -> DvsStatus {
    guard(|| {
        non_null(servo, "servo")?;
        non_null(result, "result")?;
        let ctx = (*servo).context()?;
        let trace = run_servo(&ctx, TendonDisplacement::new(q1_mm, q2_mm), seed, run).map_err(|e| {
            let status = if matches!(e, dvs_core::servo::ServoError::StartOutOfRange { .. }) {
                DvsStatus::InvalidArgument
            } else {
                DvsStatus::Runtime
            };
            Failure::new(status, e)
        })?;
        *result = DvsServoResult {
            converged: i32::from(trace.converged),
            iterations: trace.records.len(),
            final_q1_mm: trace.final_q.q1,
            final_q2_mm: trace.final_q.q2,
            initial_sad: trace.initial_sad().unwrap_or(f64::NAN),
            final_sad: trace.final_sad().unwrap_or(f64::NAN),
        };
        Ok(())
    })
}
