use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use tactile_pose::posenet::{build, Hyperparams, PoseNet};
use tactile_pose::dataset::LabelScaler;
use tactile_pose::{ObjectType, PoseRanges};
use tactile_pose_ffi::*;

fn last_error() -> String {
    let p = tp_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn simulator(size: usize) -> *mut TpSimulator {
    let mut sim = ptr::null_mut();
    assert_eq!(unsafe { tp_simulator_new(size, &mut sim) }, TpStatus::Ok);
    assert!(!sim.is_null());
    sim
}

#[test]
fn version_and_pose_lengths() {
    let v = unsafe { CStr::from_ptr(tp_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
    assert_eq!(tp_pose_len(TpObjectType::Surface), 3);
    assert_eq!(tp_pose_len(TpObjectType::Edge), 5);
}

#[test]
fn capture_matches_library_and_checks_buffers() {
    let sim = simulator(32);
    let mut size = 0;
    assert_eq!(unsafe { tp_simulator_image_size(sim, &mut size) }, TpStatus::Ok);
    assert_eq!(size, 32);

    let pose = [-3.0, 4.0, -2.0];
    let shear = [1.0, -2.0, 0.0, 1.5, 0.5, 3.0];
    let mut pixels = vec![0u8; 32 * 32];
    let status = unsafe {
        tp_simulator_capture(sim, TpObjectType::Surface, pose.as_ptr(), 3, shear.as_ptr(), pixels.as_mut_ptr(), pixels.len())
    };
    assert_eq!(status, TpStatus::Ok);
    assert!(pixels.iter().all(|&p| p <= 1));
    assert!(pixels.iter().any(|&p| p == 1));

    let lib = tactile_pose::sim::Simulator::new(tactile_pose::sim::SimConfig {
        geometry: tactile_pose::sim::SensorGeometry::default().with_image_size(32),
        ..Default::default()
    })
    .unwrap();
    let expected = lib
        .capture(
            &tactile_pose::dataset::collection_object(ObjectType::Surface),
            &tactile_pose::Pose::from_slice(ObjectType::Surface, &pose).unwrap(),
            &tactile_pose::Perturbation::from_array(shear),
        )
        .unwrap();
    assert_eq!(pixels, expected.pixels());

    let mut small = vec![0u8; 10];
    let status = unsafe {
        tp_simulator_capture(sim, TpObjectType::Surface, pose.as_ptr(), 3, ptr::null(), small.as_mut_ptr(), small.len())
    };
    assert_eq!(status, TpStatus::BufferTooSmall);
    assert!(last_error().contains("1024"));

    let status = unsafe {
        tp_simulator_capture(sim, TpObjectType::Edge, pose.as_ptr(), 3, ptr::null(), pixels.as_mut_ptr(), pixels.len())
    };
    assert_eq!(status, TpStatus::InvalidArgument);
    unsafe { tp_simulator_free(sim) };
}

#[test]
fn null_handles_are_reported() {
    let mut size = 0;
    assert_eq!(unsafe { tp_simulator_image_size(ptr::null(), &mut size) }, TpStatus::NullPointer);
    assert!(last_error().contains("sim"));
    assert_eq!(unsafe { tp_simulator_new(32, ptr::null_mut()) }, TpStatus::NullPointer);
    let mut net = ptr::null_mut();
    assert_eq!(unsafe { tp_posenet_load(ptr::null(), &mut net) }, TpStatus::NullPointer);
    unsafe {
        tp_simulator_free(ptr::null_mut());
        tp_posenet_free(ptr::null_mut());
        tp_pi_free(ptr::null_mut());
    }
}

#[test]
fn missing_checkpoint_names_the_path() {
    let path = CString::new("/nonexistent/model.ckpt").unwrap();
    let mut net = ptr::null_mut();
    assert_eq!(unsafe { tp_posenet_load(path.as_ptr(), &mut net) }, TpStatus::Model);
    assert!(net.is_null());
    assert!(last_error().contains("/nonexistent/model.ckpt"));
}

#[test]
fn posenet_round_trip_through_checkpoint() {
    let hp = Hyperparams {
        n_conv: 1,
        n_filters: 2,
        n_dense: 1,
        n_units: 4,
        batch_size: 16,
        ..Hyperparams::published_surface()
    };
    let net = PoseNet {
        model: build(&hp, 3, 16, 5).unwrap(),
        object_type: ObjectType::Surface,
        scaler: LabelScaler::from_ranges(ObjectType::Surface, &PoseRanges::labels(ObjectType::Surface)).unwrap(),
        hyperparams: hp,
        image_size: 16,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    net.save(&path).unwrap();

    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { tp_posenet_load(c_path.as_ptr(), &mut handle) }, TpStatus::Ok);
    let (mut kind, mut n_out, mut size) = (TpObjectType::Edge, 0, 0);
    assert_eq!(unsafe { tp_posenet_info(handle, &mut kind, &mut n_out, &mut size) }, TpStatus::Ok);
    assert_eq!((kind, n_out, size), (TpObjectType::Surface, 3, 16));

    let mut pixels = vec![0u8; 256];
    for i in (0..256).step_by(7) {
        pixels[i] = 255;
    }
    let mut out = [0.0; 3];
    let status = unsafe { tp_posenet_predict(handle, pixels.as_ptr(), pixels.len(), out.as_mut_ptr(), 3) };
    assert_eq!(status, TpStatus::Ok);
    let image = tactile_pose::sim::TactileImage::from_pixels(16, pixels.clone()).unwrap();
    let expected = net.predict_images(&[&image]).unwrap().remove(0);
    assert_eq!(out.to_vec(), expected);

    let status = unsafe { tp_posenet_predict(handle, pixels.as_ptr(), 100, out.as_mut_ptr(), 3) };
    assert_eq!(status, TpStatus::InvalidArgument);
    let status = unsafe { tp_posenet_predict(handle, pixels.as_ptr(), 256, out.as_mut_ptr(), 2) };
    assert_eq!(status, TpStatus::BufferTooSmall);
    unsafe { tp_posenet_free(handle) };
}

#[test]
fn pi_controller_constant_error() {
    let (kp, ki) = ([0.5], [0.3]);
    let mut ctrl = ptr::null_mut();
    assert_eq!(unsafe { tp_pi_new(1, kp.as_ptr(), ki.as_ptr(), &mut ctrl) }, TpStatus::Ok);
    let mut d = [0.0];
    let mut seen = Vec::new();
    for _ in 0..3 {
        assert_eq!(unsafe { tp_pi_step(ctrl, [1.0].as_ptr(), d.as_mut_ptr(), 1) }, TpStatus::Ok);
        seen.push(d[0]);
    }
    assert_eq!(seen, vec![0.8, 0.5 + 0.3 * 2.0, 0.5 + 0.3 * 3.0]);
    assert_eq!(unsafe { tp_pi_reset(ctrl) }, TpStatus::Ok);
    assert_eq!(unsafe { tp_pi_step(ctrl, [1.0].as_ptr(), d.as_mut_ptr(), 1) }, TpStatus::Ok);
    assert_eq!(d[0], 0.8);
    assert_eq!(unsafe { tp_pi_step(ctrl, [1.0, 1.0].as_ptr(), d.as_mut_ptr(), 2) }, TpStatus::InvalidArgument);
    unsafe { tp_pi_free(ctrl) };

    let (mut kp, mut ki) = ([0.0; 5], [0.0; 5]);
    assert_eq!(
        unsafe { tp_pi_default_gains(TpObjectType::Edge, kp.as_mut_ptr(), ki.as_mut_ptr(), 5) },
        TpStatus::Ok
    );
    assert!(kp.iter().all(|&g| g == 0.5));
    assert_eq!(
        unsafe { tp_pi_default_gains(TpObjectType::Edge, kp.as_mut_ptr(), ki.as_mut_ptr(), 3) },
        TpStatus::BufferTooSmall
    );
}

#[test]
fn oracle_servo_on_plane_and_sphere() {
    let sim = simulator(32);
    let mut summary = TpServoSummary {
        outcome: TpServoOutcome::Failed,
        steps: 0,
        mean_depth_error_mm: f64::NAN,
        max_alignment_deg: f64::NAN,
    };
    let status = unsafe { tp_servo_run(sim, ptr::null_mut(), TpDemoObject::Plane, 50, &mut summary) };
    assert_eq!(status, TpStatus::Ok);
    assert_eq!(summary.outcome, TpServoOutcome::Completed);
    assert_eq!(summary.steps, 50);
    assert_eq!(summary.mean_depth_error_mm, 0.0);
    assert_eq!(summary.max_alignment_deg, 0.0);

    let status = unsafe { tp_servo_run(sim, ptr::null_mut(), TpDemoObject::Sphere, 60, &mut summary) };
    assert_eq!(status, TpStatus::Ok);
    assert_eq!(summary.outcome, TpServoOutcome::Completed);
    unsafe { tp_simulator_free(sim) };
}

/// The generated header is valid C and declares every exported function.
#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/tactile_pose.h");
    let text = std::fs::read_to_string(header).unwrap();
    for f in [
        "tp_last_error",
        "tp_version",
        "tp_pose_len",
        "tp_simulator_new",
        "tp_simulator_from_config",
        "tp_simulator_free",
        "tp_simulator_image_size",
        "tp_simulator_capture",
        "tp_posenet_load",
        "tp_posenet_free",
        "tp_posenet_info",
        "tp_posenet_predict",
        "tp_pi_new",
        "tp_pi_default_gains",
        "tp_pi_step",
        "tp_pi_reset",
        "tp_pi_free",
        "tp_servo_run",
    ] {
        assert!(text.contains(&format!("{f}(")), "header lacks {f}");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        format!(
            "#include \"{header}\"\n\
             int main(void) {{\n\
               TpSimulator *sim = 0;\n\
               if (tp_simulator_new(32, &sim) != TP_STATUS_OK) return 1;\n\
               size_t n = tp_pose_len(TP_OBJECT_TYPE_EDGE);\n\
               tp_simulator_free(sim);\n\
               return (int)n - 5;\n\
             }}\n"
        ),
    )
    .unwrap();
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    match Command::new(&cc).arg("-std=c99").arg("-Wall").arg("-Werror").arg("-c").arg(&src).arg("-o").arg(dir.path().join("use.o")).output() {
        Ok(out) => assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr)),
        Err(e) => eprintln!("skipping C compile check: {cc} unavailable ({e})"),
    }
}
