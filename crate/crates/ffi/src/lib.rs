//! C ABI over the tactile-pose library.
//!
//! Objects cross the boundary as opaque handles created by `*_new` or
//! `*_load` and released by the matching `*_free`. Every fallible function
//! returns a [`TpStatus`]; on failure a description is available from
//! [`tp_last_error`] on the same thread until the next failing call.
//! Panics never unwind into C: they are caught and reported as
//! `TP_STATUS_PANIC`.
//!
//! Handles are not synchronised. A handle may move between threads but must
//! not be used from two threads at once.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use tactile_pose::dataset::collection_object;
use tactile_pose::posenet::PoseNet;
use tactile_pose::servo::{self, explore, DemoObject, OracleEstimator, PiState, ServoStatus, REFERENCE_DEPTH};
use tactile_pose::sim::{SimConfig, SensorGeometry, Simulator, TactileImage};
use tactile_pose::{Component, ObjectType, Perturbation, Pose};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    Io = 4,
    Model = 5,
    Simulation = 6,
    NoContact = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TpObjectType {
    /// Three components: depth, roll, pitch.
    Surface = 0,
    /// Five components: x, depth, roll, pitch, yaw.
    Edge = 1,
}

impl From<TpObjectType> for ObjectType {
    fn from(t: TpObjectType) -> Self {
        match t {
            TpObjectType::Surface => ObjectType::Surface,
            TpObjectType::Edge => ObjectType::Edge,
        }
    }
}

impl From<ObjectType> for TpObjectType {
    fn from(t: ObjectType) -> Self {
        match t {
            ObjectType::Surface => TpObjectType::Surface,
            ObjectType::Edge => TpObjectType::Edge,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TpDemoObject {
    Plane = 0,
    Sphere = 1,
    Bump = 2,
    Edge = 3,
    Contour = 4,
}

impl From<TpDemoObject> for DemoObject {
    fn from(o: TpDemoObject) -> Self {
        match o {
            TpDemoObject::Plane => DemoObject::Plane,
            TpDemoObject::Sphere => DemoObject::Sphere,
            TpDemoObject::Bump => DemoObject::Bump,
            TpDemoObject::Edge => DemoObject::Edge,
            TpDemoObject::Contour => DemoObject::Contour,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TpServoOutcome {
    Completed = 0,
    ContactLost = 1,
    Failed = 2,
}

/// Summary of a servo run.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TpServoSummary {
    pub outcome: TpServoOutcome,
    /// Steps recorded before the run ended.
    pub steps: usize,
    /// Mean |depth - reference| over in-contact steps, NaN if none.
    pub mean_depth_error_mm: f64,
    /// Largest angle between sensor axis and surface normal, in degrees.
    pub max_alignment_deg: f64,
}

/// Tactile sensor simulator.
pub struct TpSimulator {
    sim: Simulator,
}

/// Trained pose network.
pub struct TpPoseNet {
    net: PoseNet,
}

/// PI controller with its integral state.
pub struct TpPiController {
    kp: Vec<f64>,
    ki: Vec<f64>,
    state: PiState,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(TpStatus, String);

fn fail<T>(status: TpStatus, message: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, message.into()))
}

/// Run `f`, record any failure and translate it into a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> TpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TpStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            TpStatus::Panic
        }
    }
}

unsafe fn slice_in<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return fail(TpStatus::NullPointer, format!("{what} is null"));
    }
    // SAFETY: the caller promises `ptr` points to `len` readable values.
    Ok(unsafe { std::slice::from_raw_parts(ptr, len) })
}

unsafe fn slice_out<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return fail(TpStatus::NullPointer, format!("{what} is null"));
    }
    // SAFETY: the caller promises `ptr` points to `len` writable values.
    Ok(unsafe { std::slice::from_raw_parts_mut(ptr, len) })
}

unsafe fn handle<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, Failure> {
    // SAFETY: non-null handles come from this library and are still live.
    unsafe { ptr.as_ref() }.ok_or_else(|| Failure(TpStatus::NullPointer, format!("{what} is null")))
}

unsafe fn handle_mut<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    // SAFETY: as for `handle`, plus exclusive use by the caller.
    unsafe { ptr.as_mut() }.ok_or_else(|| Failure(TpStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_ptr<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    unsafe { handle_mut(ptr, what) }
}

/// Message of the last failure on this thread, or NULL if none. The
/// pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn tp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Number of pose components for `object_type`.
#[no_mangle]
pub extern "C" fn tp_pose_len(object_type: TpObjectType) -> usize {
    ObjectType::from(object_type).n_out()
}

/// Create a simulator of the default sensor imaged at `image_size` pixels.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn tp_simulator_new(image_size: usize, out: *mut *mut TpSimulator) -> TpStatus {
    guard(|| {
        let out = unsafe { out_ptr(out, "out")? };
        if image_size < 8 {
            return fail(TpStatus::InvalidArgument, format!("image size {image_size} is below 8"));
        }
        let config = SimConfig {
            geometry: SensorGeometry::default().with_image_size(image_size),
            ..SimConfig::default()
        };
        let sim = Simulator::new(config).map_err(|e| Failure(TpStatus::InvalidArgument, e.to_string()))?;
        *out = Box::into_raw(Box::new(TpSimulator { sim }));
        Ok(())
    })
}

/// Create a simulator from a JSON config file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tp_simulator_from_config(path: *const c_char, out: *mut *mut TpSimulator) -> TpStatus {
    guard(|| {
        let out = unsafe { out_ptr(out, "out")? };
        let path = unsafe { path_arg(path)? };
        let config = SimConfig::load(Path::new(&path)).map_err(|e| Failure(TpStatus::Io, e.to_string()))?;
        let sim = Simulator::new(config).map_err(|e| Failure(TpStatus::InvalidArgument, e.to_string()))?;
        *out = Box::into_raw(Box::new(TpSimulator { sim }));
        Ok(())
    })
}

/// Release a simulator. NULL is ignored.
///
/// # Safety
/// `sim` must be NULL or a handle from `tp_simulator_new` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tp_simulator_free(sim: *mut TpSimulator) {
    if !sim.is_null() {
        // SAFETY: the handle was created by Box::into_raw in this library.
        drop(unsafe { Box::from_raw(sim) });
    }
}

/// Image side length in pixels; the image has `size * size` bytes.
///
/// # Safety
/// `sim` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tp_simulator_image_size(sim: *const TpSimulator, out: *mut usize) -> TpStatus {
    guard(|| {
        let sim = unsafe { handle(sim, "sim")? };
        *unsafe { out_ptr(out, "out")? } = sim.sim.geometry().image_size;
        Ok(())
    })
}

/// Render the tactile image of the labelled `pose` (length
/// `tp_pose_len(object_type)`) against the standard collection object,
/// after a shear `perturbation` of six values (dx, dy, d_depth, d_roll,
/// d_pitch, d_yaw) or NULL for none. Pixels are 0 (background) or 1
/// (marker), row-major.
///
/// # Safety
/// Pointers must reference buffers of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn tp_simulator_capture(
    sim: *const TpSimulator,
    object_type: TpObjectType,
    pose: *const f64,
    pose_len: usize,
    perturbation: *const f64,
    pixels: *mut u8,
    pixels_len: usize,
) -> TpStatus {
    guard(|| {
        let sim = unsafe { handle(sim, "sim")? };
        let object_type = ObjectType::from(object_type);
        let values = unsafe { slice_in(pose, pose_len, "pose")? };
        let pose = Pose::from_slice(object_type, values).map_err(|e| Failure(TpStatus::InvalidArgument, e.to_string()))?;
        let perturbation = if perturbation.is_null() {
            Perturbation::zero()
        } else {
            let p = unsafe { slice_in(perturbation, 6, "perturbation")? };
            Perturbation::from_array([p[0], p[1], p[2], p[3], p[4], p[5]])
        };
        let size = sim.sim.geometry().image_size;
        let out = unsafe { slice_out(pixels, pixels_len, "pixels")? };
        if out.len() < size * size {
            return fail(
                TpStatus::BufferTooSmall,
                format!("pixel buffer holds {} bytes, image needs {}", out.len(), size * size),
            );
        }
        let image = sim
            .sim
            .capture(&collection_object(object_type), &pose, &perturbation)
            .map_err(|e| Failure(TpStatus::Simulation, e.to_string()))?;
        out[..size * size].copy_from_slice(image.pixels());
        Ok(())
    })
}

unsafe fn path_arg(path: *const c_char) -> Result<String, Failure> {
    if path.is_null() {
        return fail(TpStatus::NullPointer, "path is null");
    }
    // SAFETY: the caller passes a NUL-terminated string.
    let s = unsafe { CStr::from_ptr(path) };
    s.to_str()
        .map(str::to_owned)
        .map_err(|_| Failure(TpStatus::InvalidArgument, "path is not valid UTF-8".into()))
}

/// Load a pose network checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tp_posenet_load(path: *const c_char, out: *mut *mut TpPoseNet) -> TpStatus {
    guard(|| {
        let out = unsafe { out_ptr(out, "out")? };
        let path = unsafe { path_arg(path)? };
        let net = PoseNet::load(Path::new(&path)).map_err(|e| Failure(TpStatus::Model, e.to_string()))?;
        *out = Box::into_raw(Box::new(TpPoseNet { net }));
        Ok(())
    })
}

/// Release a network. NULL is ignored.
///
/// # Safety
/// `net` must be NULL or a live handle from `tp_posenet_load`.
#[no_mangle]
pub unsafe extern "C" fn tp_posenet_free(net: *mut TpPoseNet) {
    if !net.is_null() {
        // SAFETY: the handle was created by Box::into_raw in this library.
        drop(unsafe { Box::from_raw(net) });
    }
}

/// Object type, output count and expected image size of a network. Any
/// output pointer may be NULL.
///
/// # Safety
/// `net` must be a live handle; non-null outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn tp_posenet_info(
    net: *const TpPoseNet,
    object_type: *mut TpObjectType,
    n_outputs: *mut usize,
    image_size: *mut usize,
) -> TpStatus {
    guard(|| {
        let net = &unsafe { handle(net, "net")? }.net;
        if let Some(o) = unsafe { object_type.as_mut() } {
            *o = net.object_type.into();
        }
        if let Some(o) = unsafe { n_outputs.as_mut() } {
            *o = net.object_type.n_out();
        }
        if let Some(o) = unsafe { image_size.as_mut() } {
            *o = net.image_size;
        }
        Ok(())
    })
}

/// Predict the pose (physical units) of one image of `size * size` bytes,
/// where any nonzero byte is a marker pixel.
///
/// # Safety
/// Pointers must reference buffers of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn tp_posenet_predict(
    net: *const TpPoseNet,
    pixels: *const u8,
    pixels_len: usize,
    pose_out: *mut f64,
    pose_len: usize,
) -> TpStatus {
    guard(|| {
        let net = &unsafe { handle(net, "net")? }.net;
        let size = net.image_size;
        let px = unsafe { slice_in(pixels, pixels_len, "pixels")? };
        if px.len() != size * size {
            return fail(
                TpStatus::InvalidArgument,
                format!("image has {} bytes, network expects {}", px.len(), size * size),
            );
        }
        let out = unsafe { slice_out(pose_out, pose_len, "pose_out")? };
        let n = net.object_type.n_out();
        if out.len() < n {
            return fail(TpStatus::BufferTooSmall, format!("pose buffer holds {}, need {n}", out.len()));
        }
        let image = TactileImage::from_pixels(size, px.to_vec()).expect("length checked");
        let pred = net
            .predict_images(&[&image])
            .map_err(|e| Failure(TpStatus::Model, e.to_string()))?;
        out[..n].copy_from_slice(&pred[0]);
        Ok(())
    })
}

/// Create a PI controller over `n` components with gains `kp` and `ki`.
///
/// # Safety
/// `kp` and `ki` must point to `n` values and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn tp_pi_new(
    n: usize,
    kp: *const f64,
    ki: *const f64,
    out: *mut *mut TpPiController,
) -> TpStatus {
    guard(|| {
        let out = unsafe { out_ptr(out, "out")? };
        if n == 0 {
            return fail(TpStatus::InvalidArgument, "controller needs at least one component");
        }
        let kp = unsafe { slice_in(kp, n, "kp")? }.to_vec();
        let ki = unsafe { slice_in(ki, n, "ki")? }.to_vec();
        if kp.iter().chain(&ki).any(|g| !g.is_finite()) {
            return fail(TpStatus::InvalidArgument, "gains must be finite");
        }
        *out = Box::into_raw(Box::new(TpPiController {
            kp,
            ki,
            state: PiState::new(n),
        }));
        Ok(())
    })
}

/// Default gains of the servo controller for `object_type`, written to
/// `kp` and `ki` (each `tp_pose_len(object_type)` long).
///
/// # Safety
/// `kp` and `ki` must point to `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn tp_pi_default_gains(
    object_type: TpObjectType,
    kp: *mut f64,
    ki: *mut f64,
    len: usize,
) -> TpStatus {
    guard(|| {
        let config = servo::ServoConfig::new(object_type.into(), 1);
        let n = config.kp.len();
        if len < n {
            return fail(TpStatus::BufferTooSmall, format!("gain buffers hold {len}, need {n}"));
        }
        let kp = unsafe { slice_out(kp, len, "kp")? };
        let ki = unsafe { slice_out(ki, len, "ki")? };
        kp[..n].copy_from_slice(&config.kp);
        ki[..n].copy_from_slice(&config.ki);
        Ok(())
    })
}

/// One control update: `delta = kp e + ki (sum of errors so far, including
/// this one)`.
///
/// # Safety
/// `error` and `delta` must point to `n` values, `n` matching the
/// controller.
#[no_mangle]
pub unsafe extern "C" fn tp_pi_step(ctrl: *mut TpPiController, error: *const f64, delta: *mut f64, n: usize) -> TpStatus {
    guard(|| {
        let c = unsafe { handle_mut(ctrl, "ctrl")? };
        if n != c.kp.len() {
            return fail(TpStatus::InvalidArgument, format!("controller has {} components, got {n}", c.kp.len()));
        }
        let e = unsafe { slice_in(error, n, "error")? };
        let d = servo::pi_step(e, &c.kp, &c.ki, &mut c.state);
        let out = unsafe { slice_out(delta, n, "delta")? };
        out.copy_from_slice(&d);
        Ok(())
    })
}

/// Zero the integral state.
///
/// # Safety
/// `ctrl` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn tp_pi_reset(ctrl: *mut TpPiController) -> TpStatus {
    guard(|| {
        let c = unsafe { handle_mut(ctrl, "ctrl")? };
        c.state = PiState::new(c.kp.len());
        Ok(())
    })
}

/// Release a controller. NULL is ignored.
///
/// # Safety
/// `ctrl` must be NULL or a live handle from `tp_pi_new`.
#[no_mangle]
pub unsafe extern "C" fn tp_pi_free(ctrl: *mut TpPiController) {
    if !ctrl.is_null() {
        // SAFETY: the handle was created by Box::into_raw in this library.
        drop(unsafe { Box::from_raw(ctrl) });
    }
}

/// Run the servo loop on a demonstration object for `steps` steps, driven
/// by `net` or, when `net` is NULL, by ground truth. Images are rendered
/// by `sim`. Contact loss is reported through `summary.outcome`, not as an
/// error status.
///
/// # Safety
/// `sim` must be a live handle, `net` NULL or live, `summary` valid.
#[no_mangle]
pub unsafe extern "C" fn tp_servo_run(
    sim: *const TpSimulator,
    net: *mut TpPoseNet,
    object: TpDemoObject,
    steps: usize,
    summary: *mut TpServoSummary,
) -> TpStatus {
    guard(|| {
        let sim = &unsafe { handle(sim, "sim")? }.sim;
        let summary = unsafe { out_ptr(summary, "summary")? };
        let demo = DemoObject::from(object);
        let body = demo.object();
        let object_type = demo.object_type();
        let (start, _) = demo.start();
        let config = demo.config(steps);
        let result = match unsafe { net.as_mut() } {
            Some(h) => {
                if h.net.object_type != object_type {
                    return fail(
                        TpStatus::InvalidArgument,
                        format!(
                            "network estimates {} poses, {} needs {}",
                            h.net.object_type.name(),
                            demo.name(),
                            object_type.name()
                        ),
                    );
                }
                explore(&mut h.net, &body, &start, &config, sim)
            }
            None => {
                let mut oracle = OracleEstimator {
                    object: &body,
                    object_type,
                };
                explore(&mut oracle, &body, &start, &config, sim)
            }
        };
        let traj = result.map_err(|e| match e {
            servo::ServoError::NoContact => Failure(TpStatus::NoContact, e.to_string()),
            servo::ServoError::Config(_) => Failure(TpStatus::InvalidArgument, e.to_string()),
            _ => Failure(TpStatus::Simulation, e.to_string()),
        })?;
        let depth_index = object_type
            .components()
            .iter()
            .position(|c| *c == Component::Depth)
            .expect("every object type has depth");
        *summary = TpServoSummary {
            outcome: match traj.status {
                ServoStatus::Completed => TpServoOutcome::Completed,
                ServoStatus::ContactLost { .. } => TpServoOutcome::ContactLost,
                ServoStatus::Failed { .. } => TpServoOutcome::Failed,
            },
            steps: traj.steps.len(),
            mean_depth_error_mm: traj.mean_depth_error(REFERENCE_DEPTH, depth_index).unwrap_or(f64::NAN),
            max_alignment_deg: traj.steps.iter().map(|s| s.alignment_deg).fold(0.0, f64::max),
        };
        Ok(())
    })
}
