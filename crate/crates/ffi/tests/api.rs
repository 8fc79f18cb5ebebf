use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use dvs_core::config::RunConfig;
use dvs_core::nn::{init_parameters, save_parameters, ParameterSet};
use dvs_core::servo::Controller;
use dvs_core::{forward_kinematics, render, TendonDisplacement};
use dvs_ffi::*;

const CONFIG: &str = "seed = 2\nscene.texture_size = 128\ncamera.width = 48\ncamera.height = 36\nnet.input_size = 16\nservo.max_iterations = 15\n";

fn last_error() -> String {
    unsafe { CStr::from_ptr(dvs_last_error_message()) }
        .to_string_lossy()
        .into_owned()
}

fn config_text() -> CString {
    CString::new(CONFIG).unwrap()
}

fn new_scene() -> *mut DvsScene {
    let mut scene = ptr::null_mut();
    assert_eq!(
        unsafe { dvs_scene_new(config_text().as_ptr(), &mut scene) },
        DvsStatus::Ok,
        "{}",
        last_error()
    );
    scene
}

#[test]
fn kinematics_matches_the_library() {
    let (mut rot, mut trans) = ([0.0; 9], [0.0; 3]);
    let status = unsafe { dvs_forward_kinematics(3.0, -1.5, 0.4, 0.033, rot.as_mut_ptr(), trans.as_mut_ptr()) };
    assert_eq!(status, DvsStatus::Ok);
    let geom = dvs_core::RobotGeometry::default().with_tendon_offset(0.033);
    let pose = forward_kinematics(TendonDisplacement::new(3.0, -1.5), &geom);
    assert_eq!(rot.to_vec(), pose.rotation_rows().concat());
    assert_eq!(trans.as_slice(), pose.translation.as_slice());

    let status = unsafe { dvs_forward_kinematics(f64::NAN, 0.0, 0.4, 0.033, rot.as_mut_ptr(), trans.as_mut_ptr()) };
    assert_eq!(status, DvsStatus::InvalidArgument);
}

#[test]
fn spiral_end_point_and_range_check() {
    let (mut q1, mut q2) = (0.0, 0.0);
    assert_eq!(
        unsafe { dvs_spiral_point(7.0, 20.0, 5000, 5000, &mut q1, &mut q2) },
        DvsStatus::Ok
    );
    assert!((q1 - 7.0).abs() < 1e-12 && q2.abs() < 1e-12);
    assert_eq!(
        unsafe { dvs_spiral_point(7.0, 20.0, 5000, 0, &mut q1, &mut q2) },
        DvsStatus::InvalidArgument
    );
    assert!(last_error().contains("outside"));
}

#[test]
fn sad_of_an_image_with_itself_is_zero() {
    let img: Vec<f32> = (0..4 * 3 * 3).map(|i| (i % 7) as f32 / 7.0).collect();
    let mut out = -1.0;
    assert_eq!(
        unsafe { dvs_sad(img.as_ptr(), img.as_ptr(), 4, 3, &mut out) },
        DvsStatus::Ok
    );
    assert_eq!(out, 0.0);
    let flat = vec![0.5f32; img.len()];
    assert_ne!(
        unsafe { dvs_sad(flat.as_ptr(), img.as_ptr(), 4, 3, &mut out) },
        DvsStatus::Ok
    );
}

#[test]
fn scene_renders_the_same_frame_as_the_library() {
    let scene = new_scene();
    let (mut w, mut h) = (0, 0);
    assert_eq!(unsafe { dvs_scene_frame_size(scene, &mut w, &mut h) }, DvsStatus::Ok);
    assert_eq!((w, h), (48, 36));
    let mut rgb = vec![0.0f32; w * h * 3];
    assert_eq!(
        unsafe { dvs_scene_render(scene, 2.0, 1.0, rgb.as_mut_ptr(), rgb.len()) },
        DvsStatus::Ok
    );

    let cfg = RunConfig::parse(CONFIG).unwrap();
    let pose = forward_kinematics(TendonDisplacement::new(2.0, 1.0), &cfg.geometry());
    let expected = render(&cfg.scene().unwrap(), &pose, &cfg.intrinsics()).unwrap();
    assert_eq!(rgb, expected.data());

    assert_eq!(
        unsafe { dvs_scene_render(scene, 2.0, 1.0, rgb.as_mut_ptr(), rgb.len() - 1) },
        DvsStatus::InvalidArgument
    );
    unsafe { dvs_scene_free(scene) };
    unsafe { dvs_scene_free(ptr::null_mut()) };
}

#[test]
fn bad_config_text_is_a_config_error() {
    let text = CString::new("camera.widht = 3\n").unwrap();
    let mut scene = ptr::null_mut();
    assert_eq!(unsafe { dvs_scene_new(text.as_ptr(), &mut scene) }, DvsStatus::Config);
    assert!(scene.is_null());
    assert!(last_error().contains("camera.widht"));
}

#[test]
fn network_and_servo_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::parse(CONFIG).unwrap();
    let spec = cfg.network_spec();
    let params: ParameterSet<f32> = init_parameters(&spec, 8).unwrap();
    let path = dir.path().join("model.cnnp");
    save_parameters(&params, &path).unwrap();
    let path_c = CString::new(path.to_str().unwrap()).unwrap();

    let mut network = ptr::null_mut();
    let status = unsafe { dvs_network_load(config_text().as_ptr(), path_c.as_ptr(), &mut network) };
    assert_eq!(status, DvsStatus::Ok, "{}", last_error());

    let frame = dvs_core::ImageBuffer::from_fn(40, 30, |x, y| [x as f32 / 40.0, y as f32 / 30.0, 0.3]);
    let mut output = [0.0; 2];
    let status = unsafe { dvs_network_predict(network, frame.data().as_ptr(), 40, 30, output.as_mut_ptr()) };
    assert_eq!(status, DvsStatus::Ok, "{}", last_error());
    let controller = Controller {
        spec: &spec,
        params: &params,
    };
    assert_eq!(output, controller.output(&frame).unwrap());

    let scene = new_scene();
    let mut servo = ptr::null_mut();
    let status = unsafe { dvs_servo_new(scene, network, config_text().as_ptr(), &mut servo) };
    assert_eq!(status, DvsStatus::Ok, "{}", last_error());
    unsafe {
        dvs_scene_free(scene);
        dvs_network_free(network);
    }

    let mut result = DvsServoResult {
        converged: -1,
        iterations: 0,
        final_q1_mm: 0.0,
        final_q2_mm: 0.0,
        initial_sad: 0.0,
        final_sad: 0.0,
    };
    assert_eq!(
        unsafe { dvs_servo_run(servo, 3.0, -2.0, 1, 0, &mut result) },
        DvsStatus::Ok,
        "{}",
        last_error()
    );
    assert!(result.converged == 0 || result.converged == 1);
    assert!(result.iterations >= 1 && result.iterations <= 15);
    assert!(result.initial_sad > 0.0);

    assert_eq!(
        unsafe { dvs_servo_run(servo, 30.0, 0.0, 1, 0, &mut result) },
        DvsStatus::InvalidArgument
    );
    unsafe { dvs_servo_free(servo) };
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let path = CString::new("/nonexistent/model.cnnp").unwrap();
    let mut network = ptr::null_mut();
    assert_eq!(
        unsafe { dvs_network_load(config_text().as_ptr(), path.as_ptr(), &mut network) },
        DvsStatus::Io
    );
    assert!(network.is_null());
}

#[test]
fn generated_header_compiles_as_c() {
    let dir = tempfile::tempdir().unwrap();
    let source = dir.path().join("probe.c");
    std::fs::write(
        &source,
        "#include \"dvs.h\"\nint main(void) { DvsServoResult r; DvsStatus s = DVS_STATUS_OK; (void)r; return (int)s; }\n",
    )
    .unwrap();
    let include = concat!(env!("CARGO_MANIFEST_DIR"), "/include");
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I", include])
        .arg(&source)
        .status();
    match status {
        Ok(s) => assert!(s.success(), "dvs.h does not compile"),
        Err(e) => eprintln!("skipping header check, no C compiler: {e}"),
    }
}
