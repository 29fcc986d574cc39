use std::ffi::{c_char, CStr, CString};
use std::ptr;

use telelens::config::Config;
use telelens::sim::Simulation;
use telelens_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 512];
    let n = unsafe { tl_last_error(buf.as_mut_ptr(), buf.len()) };
    if n == 0 {
        return String::new();
    }
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn default_config() -> *mut TlConfig {
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { tl_config_default(&mut cfg) }, TlStatus::Ok);
    cfg
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(tl_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn null_handles_are_rejected() {
    let mut pose = TlPose::default();
    let j = [0.0; 7];
    let s = unsafe { tl_forward_kinematics(ptr::null(), j.as_ptr(), 7, &mut pose) };
    assert_eq!(s, TlStatus::NullPointer);
    assert!(last_error().contains("cfg"));
    assert_eq!(unsafe { tl_config_default(ptr::null_mut()) }, TlStatus::NullPointer);
    assert_eq!(unsafe { tl_sim_set_delay(ptr::null_mut(), 1.0) }, TlStatus::NullPointer);
    assert_eq!(unsafe { tl_sim_sample(ptr::null()) }, 0);
    unsafe {
        tl_sim_free(ptr::null_mut());
        tl_config_free(ptr::null_mut());
    }
}

#[test]
fn success_clears_the_last_error() {
    let cfg = default_config();
    assert_eq!(unsafe { tl_config_set_delay(cfg, -1.0) }, TlStatus::Config);
    assert!(last_error().contains("delay"));
    assert_eq!(unsafe { tl_config_set_delay(cfg, 0.25) }, TlStatus::Ok);
    assert_eq!(last_error(), "");
    unsafe { tl_config_free(cfg) };
}

#[test]
fn last_error_truncates_and_reports_full_length() {
    let text = CString::new("[scenario]\nbogus = 1\n").unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { tl_config_from_toml(text.as_ptr(), &mut cfg) }, TlStatus::Config);
    assert!(cfg.is_null());
    let mut small = [0x7f as c_char; 8];
    let n = unsafe { tl_last_error(small.as_mut_ptr(), small.len()) };
    assert!(n > small.len());
    assert_eq!(small[7], 0);
    assert_eq!(unsafe { CStr::from_ptr(small.as_ptr()) }.to_bytes().len(), 7);
    assert_eq!(unsafe { tl_last_error(ptr::null_mut(), 0) }, n);
}

#[test]
fn forward_kinematics_matches_core() {
    let cfg = default_config();
    let core = Config::default();
    let j = core.reference_joints();
    let mut pose = TlPose::default();
    let s = unsafe { tl_forward_kinematics(cfg, j.0.as_ptr(), j.len(), &mut pose) };
    assert_eq!(s, TlStatus::Ok);
    let expected = core.chain.reference_pose.unwrap();
    for k in 0..3 {
        assert!((pose.translation[k] - expected.translation[k]).abs() < 1e-12);
    }
    let q = expected.rotation;
    let sign = if (pose.rotation[0] * q.w) < 0.0 { -1.0 } else { 1.0 };
    for (a, b) in pose.rotation.iter().zip([q.w, q.x, q.y, q.z]) {
        assert!((a - sign * b).abs() < 1e-12);
    }
    let s = unsafe { tl_forward_kinematics(cfg, j.0.as_ptr(), 3, &mut pose) };
    assert_eq!(s, TlStatus::InvalidArgument, "{}", last_error());
    unsafe { tl_config_free(cfg) };
}

#[test]
fn opacity_follows_the_threshold_law() {
    let cfg = default_config();
    let mut a = f64::NAN;
    let origin = [0.0; 3];
    unsafe { tl_opacity(cfg, &[0.004, 0.0, 0.0], &origin, &mut a) };
    assert_eq!(a, 0.0);
    unsafe { tl_opacity(cfg, &[0.0063, 0.0, 0.0], &origin, &mut a) };
    assert!((a - 0.1).abs() < 1e-9, "{a}");
    unsafe { tl_opacity(cfg, &[0.0, 0.5, 0.0], &origin, &mut a) };
    assert_eq!(a, 0.8);
    unsafe { tl_config_free(cfg) };
}

#[test]
fn simulation_matches_core_bit_for_bit() {
    let cfg = default_config();
    let mut sim = ptr::null_mut();
    assert_eq!(unsafe { tl_sim_new(cfg, &mut sim) }, TlStatus::Ok);
    let mut core = Simulation::new(&Config::default()).unwrap();
    let mut rows = [TlArmSample::default(); 2];
    let mut n = 0;
    for _ in 0..150 {
        assert_eq!(unsafe { tl_sim_step(sim, rows.as_mut_ptr(), rows.len(), &mut n) }, TlStatus::Ok);
        let expected = core.step().unwrap().rows;
        assert_eq!(n, 1);
        let (r, e) = (&rows[0], &expected[0]);
        assert_eq!(r.sample, e.sample);
        assert_eq!(r.alpha.to_bits(), e.alpha.to_bits());
        assert_eq!(r.overlay_tip, [e.overlay_tip.x, e.overlay_tip.y, e.overlay_tip.z]);
        match e.pred_err_px {
            Some(v) => assert_eq!(r.pred_err_px.to_bits(), v.to_bits()),
            None => assert!(r.pred_err_px.is_nan()),
        }
    }
    assert_eq!(unsafe { tl_sim_sample(sim) }, 150);
    unsafe {
        tl_sim_free(sim);
        tl_config_free(cfg);
    }
}

#[test]
fn step_needs_room_for_every_arm() {
    let text = CString::new("[scenario]\narms = 2\n").unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { tl_config_from_toml(text.as_ptr(), &mut cfg) }, TlStatus::Ok);
    let mut sim = ptr::null_mut();
    assert_eq!(unsafe { tl_sim_new(cfg, &mut sim) }, TlStatus::Ok);
    assert_eq!(unsafe { tl_sim_arm_count(sim) }, 2);
    let mut one = [TlArmSample::default(); 1];
    let s = unsafe { tl_sim_step(sim, one.as_mut_ptr(), 1, ptr::null_mut()) };
    assert_eq!(s, TlStatus::BufferTooSmall);
    assert_eq!(unsafe { tl_sim_sample(sim) }, 0, "no step on a short buffer");
    let mut two = [TlArmSample::default(); 2];
    assert_eq!(unsafe { tl_sim_step(sim, two.as_mut_ptr(), 2, ptr::null_mut()) }, TlStatus::Ok);
    assert_eq!((two[0].arm, two[1].arm), (0, 1));
    unsafe {
        tl_sim_free(sim);
        tl_config_free(cfg);
    }
}

#[test]
fn live_input_moves_the_overlay_and_the_delayed_feedback() {
    let cfg = default_config();
    let mut sim = ptr::null_mut();
    unsafe {
        assert_eq!(tl_config_set_delay(cfg, 0.2), TlStatus::Ok);
        assert_eq!(tl_sim_new(cfg, &mut sim), TlStatus::Ok);
        assert_eq!(tl_sim_set_source(sim, TlSource::Live), TlStatus::Ok);
        assert_eq!(tl_sim_input(sim, 0, 0.0, 0.0, 0.0, true), TlStatus::Ok);
    }
    let mut r = [TlArmSample::default(); 1];
    let step = |r: &mut [TlArmSample; 1]| unsafe { tl_sim_step(sim, r.as_mut_ptr(), 1, ptr::null_mut()) };
    step(&mut r);
    let (o0, f0) = (r[0].overlay_tip, r[0].feedback_tip);
    assert_eq!(unsafe { tl_sim_input(sim, 0, 0.05, 0.0, 0.0, true) }, TlStatus::Ok);
    let dist = |a: [f64; 3], b: [f64; 3]| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>().sqrt();
    let mut overlay_at = None;
    let mut feedback_at = None;
    for n in 1..80u64 {
        step(&mut r);
        if overlay_at.is_none() && dist(r[0].overlay_tip, o0) > 5e-3 {
            overlay_at = Some(n);
        }
        if feedback_at.is_none() && dist(r[0].feedback_tip, f0) > 5e-3 {
            feedback_at = Some(n);
        }
    }
    let (o, f) = (overlay_at.unwrap(), feedback_at.unwrap());
    assert!(o <= 2, "overlay at {o}");
    assert!((20..=35).contains(&(f - o)), "overlay {o} feedback {f}");
    assert_eq!(unsafe { tl_sim_input(sim, 5, 0.0, 0.0, 0.0, true) }, TlStatus::InvalidArgument);
    unsafe {
        tl_sim_free(sim);
        tl_config_free(cfg);
    }
}

#[test]
fn wire_messages_apply_through_the_abi() {
    let cfg = default_config();
    let mut sim = ptr::null_mut();
    unsafe { tl_sim_new(cfg, &mut sim) };
    let ok = CString::new(r#"{"type":"control","seq":1,"delay":0.5,"sarpd":false}"#).unwrap();
    assert_eq!(unsafe { tl_sim_apply_message(sim, ok.as_ptr()) }, TlStatus::Ok);
    let bad = CString::new(r#"{"type":"control","seq":2,"delay":"soon"}"#).unwrap();
    assert_eq!(unsafe { tl_sim_apply_message(sim, bad.as_ptr()) }, TlStatus::InvalidArgument);
    assert!(!last_error().is_empty());
    let server_side = CString::new(
        r#"{"type":"state","seq":3,"sample":0,"delay":1.0,"sarpd":true,"source":"live","alpha":[],"tracker_error":[],"overlay_tip":[],"feedback_tip":[],"malformed":0}"#,
    )
    .unwrap();
    assert_eq!(unsafe { tl_sim_apply_message(sim, server_side.as_ptr()) }, TlStatus::InvalidArgument);
    let mut r = [TlArmSample::default(); 1];
    unsafe { tl_sim_step(sim, r.as_mut_ptr(), 1, ptr::null_mut()) };
    assert_eq!(r[0].alpha, 0.0, "overlay hidden");
    unsafe {
        tl_sim_free(sim);
        tl_config_free(cfg);
    }
}

#[test]
fn calibration_reports_data_errors() {
    let cfg = default_config();
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "").unwrap();
    let path = CString::new(empty.to_str().unwrap()).unwrap();
    let mut out = TlCalibration::default();
    assert_eq!(unsafe { tl_calibrate(cfg, path.as_ptr(), &mut out) }, TlStatus::Parse);
    let missing = CString::new("/nonexistent.csv").unwrap();
    assert_eq!(unsafe { tl_calibrate(cfg, missing.as_ptr(), &mut out) }, TlStatus::Io);
    let bundled = CString::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../core/data/calibration.csv")).unwrap();
    assert_eq!(unsafe { tl_calibrate(cfg, bundled.as_ptr(), &mut out) }, TlStatus::Ok);
    assert_eq!(out.images, 15);
    assert!(out.rms_px < 0.7);
    unsafe { tl_config_free(cfg) };
}
