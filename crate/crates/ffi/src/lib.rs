//! C ABI over the telelens core.
//!
//! Objects are opaque handles created by `tl_*_new`/`tl_config_*` and
//! released by the matching `tl_*_free`. Every fallible call returns a
//! `TlStatus`; on failure the message is kept per thread and can be read
//! with `tl_last_error`. Panics never cross the boundary.
//!
//! Poses are `{translation[3], rotation[4]}` with the quaternion stored
//! as `w, x, y, z`. Lengths are meters, angles radians, delays seconds.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use telelens::calibration::{initial_handeye_detailed, solve_calibration, CalibrationDataset};
use telelens::config::Config;
use telelens::kinematics::JointVector;
use telelens::overlay::opacity;
use telelens::se3::{Pose, Vec3};
use telelens::sim::{MasterInput, MasterSource, SimControl, Simulation};
use telelens::wire::{apply, WireMessage};
use telelens::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Parse = 4,
    Io = 5,
    /// Solver failure, degenerate geometry or unobservable parameters.
    Numeric = 6,
    State = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TlSource {
    Trajectory = 0,
    Live = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TlPose {
    pub translation: [f64; 3],
    /// w, x, y, z
    pub rotation: [f64; 4],
}

/// One arm at one sample. Missing values are NaN.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TlArmSample {
    pub sample: u64,
    pub arm: u32,
    pub alpha: f64,
    /// Overlay against the true tool at the predicted joints, pixels.
    pub pred_err_px: f64,
    pub overlay_tip: [f64; 3],
    pub slave_tip: [f64; 3],
    /// Delayed slave tool position as seen by the master.
    pub feedback_tip: [f64; 3],
    pub hand_eye_err_t: f64,
    pub hand_eye_err_r: f64,
    /// 1 if the tracker updated at this sample.
    pub tracker_update: u8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TlCalibration {
    pub hand_eye: TlPose,
    /// End-effector to board.
    pub mount: TlPose,
    /// Checkerboard square side, meters.
    pub side: f64,
    pub rms_px: f64,
    pub iterations: u32,
    pub images: u32,
}

/// Opaque configuration.
pub struct TlConfig(Config);

/// Opaque simulation.
pub struct TlSimulation(Simulation);

thread_local! {
    static LAST_ERROR: RefCell<Option<String>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(e: &Error) -> TlStatus {
    match e {
        Error::InvalidArgument(_) | Error::BehindCamera { .. } | Error::Sequencing { .. } => TlStatus::InvalidArgument,
        Error::Config(_) => TlStatus::Config,
        Error::Parse { .. } => TlStatus::Parse,
        Error::Io(_) | Error::Png(_) => TlStatus::Io,
        Error::State(_) => TlStatus::State,
        Error::OutOfDomain { .. }
        | Error::RankDeficient(_)
        | Error::NonConvergence { .. }
        | Error::InsufficientData(_)
        | Error::Unobservable(_) => TlStatus::Numeric,
    }
}

fn fail(status: TlStatus, msg: impl Into<String>) -> TlStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, records any error or panic, and clears the last error on success.
fn guard(f: impl FnOnce() -> Result<(), TlStatus>) -> TlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            TlStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(TlStatus::Panic, format!("panic: {msg}"))
        }
    }
}

trait OrStatus<T> {
    fn or_status(self) -> Result<T, TlStatus>;
}

impl<T> OrStatus<T> for telelens::Result<T> {
    fn or_status(self) -> Result<T, TlStatus> {
        self.map_err(|e| fail(status_of(&e), e.to_string()))
    }
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, TlStatus> {
    p.as_ref().ok_or_else(|| fail(TlStatus::NullPointer, format!("{what} is null")))
}

unsafe fn as_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, TlStatus> {
    p.as_mut().ok_or_else(|| fail(TlStatus::NullPointer, format!("{what} is null")))
}

unsafe fn as_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, TlStatus> {
    if p.is_null() {
        return Err(fail(TlStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(TlStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn pose_out(p: &Pose) -> TlPose {
    let q = p.rotation;
    TlPose {
        translation: [p.translation.x, p.translation.y, p.translation.z],
        rotation: [q.w, q.x, q.y, q.z],
    }
}

fn v3(v: &Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `len > 0`). Returns the full message length
/// including the NUL, or 0 if the last call succeeded.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn tl_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_deref() else { return 0 };
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len() + 1
    })
}

/// The bundled default configuration.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tl_config_default(out: *mut *mut TlConfig) -> TlStatus {
    guard(|| {
        let out = as_mut(out, "out")?;
        *out = Box::into_raw(Box::new(TlConfig(Config::default())));
        Ok(())
    })
}

/// Parses a TOML config document. Unknown keys are rejected.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tl_config_from_toml(text: *const c_char, out: *mut *mut TlConfig) -> TlStatus {
    guard(|| {
        let text = as_str(text, "text")?;
        let out = as_mut(out, "out")?;
        let cfg = Config::from_toml_str(text, "<string>").or_status()?;
        *out = Box::into_raw(Box::new(TlConfig(cfg)));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tl_config_load(path: *const c_char, out: *mut *mut TlConfig) -> TlStatus {
    guard(|| {
        let path = as_str(path, "path")?;
        let out = as_mut(out, "out")?;
        let cfg = Config::load(Path::new(path)).or_status()?;
        *out = Box::into_raw(Box::new(TlConfig(cfg)));
        Ok(())
    })
}

/// Sets the round-trip delay, seconds. The config is unchanged on error.
///
/// # Safety
/// `cfg` must come from a `tl_config_*` constructor.
#[no_mangle]
pub unsafe extern "C" fn tl_config_set_delay(cfg: *mut TlConfig, round_trip: f64) -> TlStatus {
    guard(|| {
        let cfg = as_mut(cfg, "cfg")?;
        let mut next = cfg.0.clone();
        next.delay.round_trip = round_trip;
        next.validate().or_status()?;
        cfg.0 = next;
        Ok(())
    })
}

/// # Safety
/// `cfg` must come from a `tl_config_*` constructor.
#[no_mangle]
pub unsafe extern "C" fn tl_config_set_seed(cfg: *mut TlConfig, seed: u64) -> TlStatus {
    guard(|| {
        as_mut(cfg, "cfg")?.0.scenario.seed = seed;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or come from a `tl_config_*` constructor, and is
/// invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn tl_config_free(cfg: *mut TlConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Tool pose in the base frame for `n` joint values.
///
/// # Safety
/// `joints` must point to `n` doubles and `out` to a writable pose.
#[no_mangle]
pub unsafe extern "C" fn tl_forward_kinematics(
    cfg: *const TlConfig,
    joints: *const f64,
    n: usize,
    out: *mut TlPose,
) -> TlStatus {
    guard(|| {
        let cfg = as_ref(cfg, "cfg")?;
        as_ref(joints, "joints")?;
        let out = as_mut(out, "out")?;
        let j = JointVector(std::slice::from_raw_parts(joints, n).to_vec());
        let chain = cfg.0.chain().or_status()?;
        *out = pose_out(&chain.forward_kinematics(&j).or_status()?);
        Ok(())
    })
}

/// Overlay opacity for the commanded tool position now and the delayed
/// measured one, using the config's opacity parameters.
///
/// # Safety
/// `p_now` and `p_delayed` must point to 3 doubles, `out` to one.
#[no_mangle]
pub unsafe extern "C" fn tl_opacity(
    cfg: *const TlConfig,
    p_now: *const [f64; 3],
    p_delayed: *const [f64; 3],
    out: *mut f64,
) -> TlStatus {
    guard(|| {
        let cfg = as_ref(cfg, "cfg")?;
        let a = as_ref(p_now, "p_now")?;
        let b = as_ref(p_delayed, "p_delayed")?;
        let out = as_mut(out, "out")?;
        *out = opacity(&Vec3::from(*a), &Vec3::from(*b), &cfg.0.opacity);
        Ok(())
    })
}

/// Hand-eye calibration of the left camera from a checkerboard dataset (CSV).
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable struct.
#[no_mangle]
pub unsafe extern "C" fn tl_calibrate(cfg: *const TlConfig, path: *const c_char, out: *mut TlCalibration) -> TlStatus {
    guard(|| {
        let cfg = as_ref(cfg, "cfg")?;
        let path = as_str(path, "path")?;
        let out = as_mut(out, "out")?;
        let ds = CalibrationDataset::read(Path::new(path)).or_status()?;
        let chain = cfg.0.chain().or_status()?;
        let intr = &cfg.0.intrinsics.left;
        let init = initial_handeye_detailed(&ds, intr, &chain).or_status()?;
        let r = solve_calibration(&ds, intr, &chain, init.hand_eye).or_status()?;
        *out = TlCalibration {
            hand_eye: pose_out(&r.hand_eye),
            mount: pose_out(&r.mount),
            side: r.side,
            rms_px: r.rms,
            iterations: r.iterations as u32,
            images: ds.images.len() as u32,
        };
        Ok(())
    })
}

/// A simulation of the configured scenario, driven by its trajectory.
///
/// # Safety
/// `cfg` must be valid and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tl_sim_new(cfg: *const TlConfig, out: *mut *mut TlSimulation) -> TlStatus {
    guard(|| {
        let cfg = as_ref(cfg, "cfg")?;
        let out = as_mut(out, "out")?;
        let sim = Simulation::new(&cfg.0).or_status()?;
        *out = Box::into_raw(Box::new(TlSimulation(sim)));
        Ok(())
    })
}

/// # Safety
/// `sim` must be null or come from `tl_sim_new`, and is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn tl_sim_free(sim: *mut TlSimulation) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}

/// Index of the next sample to be stepped.
///
/// # Safety
/// `sim` must be null or valid; null gives 0.
#[no_mangle]
pub unsafe extern "C" fn tl_sim_sample(sim: *const TlSimulation) -> u64 {
    sim.as_ref().map(|s| s.0.sample()).unwrap_or(0)
}

/// # Safety
/// `sim` must be null or valid; null gives 0.
#[no_mangle]
pub unsafe extern "C" fn tl_sim_arm_count(sim: *const TlSimulation) -> usize {
    sim.as_ref().map(|s| s.0.arm_count()).unwrap_or(0)
}

/// Advances one sample and writes one record per arm into `out`.
/// `cap` smaller than the arm count gives `BufferTooSmall` before stepping.
///
/// # Safety
/// `out` must point to `cap` writable records; `written` may be null.
#[no_mangle]
pub unsafe extern "C" fn tl_sim_step(
    sim: *mut TlSimulation,
    out: *mut TlArmSample,
    cap: usize,
    written: *mut usize,
) -> TlStatus {
    guard(|| {
        let sim = as_mut(sim, "sim")?;
        let arms = sim.0.arm_count();
        if cap < arms {
            return Err(fail(TlStatus::BufferTooSmall, format!("need {arms} records, got {cap}")));
        }
        as_ref(out, "out")?;
        let step = sim.0.step().or_status()?;
        let dst = std::slice::from_raw_parts_mut(out, cap);
        for (d, r) in dst.iter_mut().zip(&step.rows) {
            *d = TlArmSample {
                sample: r.sample,
                arm: r.arm as u32,
                alpha: r.alpha,
                pred_err_px: r.pred_err_px.unwrap_or(f64::NAN),
                overlay_tip: v3(&r.overlay_tip),
                slave_tip: v3(&r.slave_tip),
                feedback_tip: v3(&r.feedback.translation),
                hand_eye_err_t: r.hand_eye_err_t,
                hand_eye_err_r: r.hand_eye_err_r,
                tracker_update: r.tracker_update as u8,
            };
        }
        if let Some(w) = written.as_mut() {
            *w = step.rows.len();
        }
        Ok(())
    })
}

/// Live master input: a position delta in master meters and the clutch.
/// Takes effect only with the `Live` source.
///
/// # Safety
/// `sim` must be valid.
#[no_mangle]
pub unsafe extern "C" fn tl_sim_input(
    sim: *mut TlSimulation,
    arm: u32,
    dx: f64,
    dy: f64,
    dz: f64,
    engaged: bool,
) -> TlStatus {
    guard(|| {
        let sim = as_mut(sim, "sim")?;
        sim.0
            .input(&MasterInput {
                arm: arm as usize,
                delta: Vec3::new(dx, dy, dz),
                orientation: None,
                engaged,
            })
            .or_status()
    })
}

/// Changes the round-trip delay; commands and feedback in flight are dropped.
///
/// # Safety
/// `sim` must be valid.
#[no_mangle]
pub unsafe extern "C" fn tl_sim_set_delay(sim: *mut TlSimulation, round_trip: f64) -> TlStatus {
    guard(|| as_mut(sim, "sim")?.0.control(SimControl::SetDelay(round_trip)).or_status())
}

/// Shows or hides the predictive overlay.
///
/// # Safety
/// `sim` must be valid.
#[no_mangle]
pub unsafe extern "C" fn tl_sim_set_overlay(sim: *mut TlSimulation, enabled: bool) -> TlStatus {
    guard(|| as_mut(sim, "sim")?.0.control(SimControl::SetOverlay(enabled)).or_status())
}

/// # Safety
/// `sim` must be valid.
#[no_mangle]
pub unsafe extern "C" fn tl_sim_set_source(sim: *mut TlSimulation, source: TlSource) -> TlStatus {
    guard(|| {
        let src = match source {
            TlSource::Trajectory => MasterSource::Trajectory,
            TlSource::Live => MasterSource::Live,
        };
        as_mut(sim, "sim")?.0.control(SimControl::SetSource(src)).or_status()
    })
}

/// Applies one console message (a JSON `input` or `control` line of the
/// wire protocol) before the next step.
///
/// # Safety
/// `sim` must be valid and `line` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tl_sim_apply_message(sim: *mut TlSimulation, line: *const c_char) -> TlStatus {
    guard(|| {
        let sim = as_mut(sim, "sim")?;
        let line = as_str(line, "line")?;
        let msg = WireMessage::parse(line).or_status()?;
        apply(&mut sim.0, &msg).or_status()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_error_maps_to_a_nonzero_status() {
        let errors = [
            Error::InvalidArgument("x".into()),
            Error::BehindCamera { z: -1.0 },
            Error::OutOfDomain { iterations: 3 },
            Error::Sequencing { expected: 1, got: 2 },
            Error::State("x".into()),
            Error::RankDeficient("x".into()),
            Error::NonConvergence { residual: 1.0 },
            Error::InsufficientData("x".into()),
            Error::Unobservable(vec!["tx".into()]),
            Error::Config("x".into()),
            Error::Parse {
                path: "p".into(),
                line: 1,
                message: "m".into(),
            },
            Error::Io(std::io::Error::other("x")),
            Error::Png("x".into()),
        ];
        for e in &errors {
            assert_ne!(status_of(e), TlStatus::Ok, "{e}");
        }
    }

    #[test]
    fn panics_become_a_status() {
        let s = guard(|| panic!("boom"));
        assert_eq!(s, TlStatus::Panic);
        let mut buf = [0 as c_char; 64];
        let n = unsafe { tl_last_error(buf.as_mut_ptr(), buf.len()) };
        let msg = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap();
        assert_eq!(msg, "panic: boom");
        assert_eq!(n, msg.len() + 1);
    }
}
