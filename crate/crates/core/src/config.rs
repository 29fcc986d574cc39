//! Scenario configuration file.
//!
//! One TOML document with the sections `chain`, `intrinsics`, `stereo`,
//! `delay`, `teleop`, `opacity`, `smoother`, `ekf`, `scenario`, `serve`,
//! `bench`, `checkerboard`, plus the optional `hand_eye` / `calibration`
//! block written by `telelens calibrate`. Unknown keys are rejected.
//!
//! Units: meters, seconds, radians and pixels unless a key says otherwise.
//! Poses are `{ rotation = { w, x, y, z }, translation = [x, y, z] }`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::{CalibrationRecord, CheckerboardSpec};
use crate::camera::{CameraIntrinsics, StereoRig};
use crate::delay::DelayParams;
use crate::error::{Error, Result};
use crate::kinematics::{JointVector, KinematicChain, Link};
use crate::overlay::OpacityParams;
use crate::se3::{Pose, SmootherParams, Vec3};
use crate::teleop::TeleopParams;
use crate::tracker::EkfConfig;

/// The bundled default scenario.
pub const DEFAULT_TOML: &str = include_str!("../data/default.toml");

/// Tolerance of the `chain.reference_pose` consistency check (meters and radians).
pub const REFERENCE_POSE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub chain: ChainConfig,
    #[serde(default)]
    pub intrinsics: IntrinsicsConfig,
    #[serde(default)]
    pub stereo: StereoConfig,
    #[serde(default)]
    pub delay: DelayConfig,
    #[serde(default)]
    pub teleop: TeleopParams,
    #[serde(default)]
    pub opacity: OpacityParams,
    #[serde(default)]
    pub smoother: SmootherParams,
    #[serde(default)]
    pub ekf: EkfConfig,
    #[serde(default)]
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub serve: ServeConfig,
    #[serde(default)]
    pub bench: BenchConfig,
    #[serde(default)]
    pub checkerboard: CheckerboardSpec,
    /// Calibrated left-camera hand-eye. Overrides the nominal hand-eye the
    /// scenario derives from `scenario.true_hand_eye` and `scenario.injected_error`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hand_eye: Option<Pose>,
    /// Informational; written by `telelens calibrate`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainConfig {
    pub links: Vec<Link>,
    /// Joint vector of the reference configuration (rad, or m for prismatic joints).
    pub reference_joints: Vec<f64>,
    /// Tool pose at `reference_joints`, checked against forward kinematics on load.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_pose: Option<Pose>,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            links: KinematicChain::default_instrument().links,
            reference_joints: KinematicChain::default_reference_joints().0,
            reference_pose: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntrinsicsConfig {
    pub left: CameraIntrinsics,
    pub right: CameraIntrinsics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StereoConfig {
    /// Maps left-camera coordinates into the right camera.
    pub right_from_left: Pose,
}

impl Default for StereoConfig {
    fn default() -> Self {
        StereoConfig {
            right_from_left: StereoRig::default().right_from_left,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DelayConfig {
    /// Hz.
    pub sample_rate: f64,
    /// Round-trip delay, seconds.
    pub round_trip: f64,
}

impl Default for DelayConfig {
    fn default() -> Self {
        DelayConfig {
            sample_rate: 100.0,
            round_trip: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    Lissajous,
    Step,
    Handoff,
    Hold,
}

/// Master-side motion script. Positions are master meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectoryConfig {
    pub kind: TrajectoryKind,
    /// Lissajous: per-axis amplitude (m), frequency (Hz) and phase (rad).
    pub amplitude: [f64; 3],
    pub frequency: [f64; 3],
    pub phase: [f64; 3],
    /// Lissajous: orientation wobble amplitude as a rotation vector (rad) and its frequency (Hz).
    pub wobble: [f64; 3],
    pub wobble_frequency: f64,
    /// Step: position jump (m) applied at sample `step_at`.
    pub step: [f64; 3],
    pub step_at: u64,
    /// Handoff: displacement of one transport (m), its length and the dwell length (samples).
    pub transport: [f64; 3],
    pub transport_samples: u64,
    pub dwell_samples: u64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        TrajectoryConfig {
            kind: TrajectoryKind::Lissajous,
            amplitude: [0.05, 0.04, 0.03],
            frequency: [0.2, 0.3, 0.1],
            phase: [0.0, std::f64::consts::FRAC_PI_2, 0.0],
            wobble: [0.03, 0.03, 0.1],
            wobble_frequency: 0.15,
            step: [0.05, 0.0, 0.0],
            step_at: 200,
            transport: [0.08, 0.04, 0.02],
            transport_samples: 150,
            dwell_samples: 200,
        }
    }
}

/// Hand-eye miscalibration: translation offset (m) and rotation vector (rad)
/// applied as `(t + dt, exp(dw) q)` to the true hand-eye.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InjectedError {
    pub translation: [f64; 3],
    pub rotation: [f64; 3],
}

impl Default for InjectedError {
    fn default() -> Self {
        InjectedError {
            translation: [0.006, -0.005, 0.0066],
            rotation: [0.01, -0.015, 0.02],
        }
    }
}

impl InjectedError {
    pub fn zero() -> Self {
        InjectedError {
            translation: [0.0; 3],
            rotation: [0.0; 3],
        }
    }

    pub fn apply(&self, pose: &Pose) -> Pose {
        let dq = crate::se3::Quaternion::from_rotation_vector(&Vec3::from(self.rotation));
        Pose::new(dq * pose.rotation, pose.translation + Vec3::from(self.translation))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    /// Run length, samples.
    pub duration: u64,
    pub seed: u64,
    /// 1 or 2 arms.
    pub arms: usize,
    /// Base of arm 2 relative to arm 1, along base x (m).
    pub arm_spacing: f64,
    /// Left-camera hand-eye of arm 1 (camera_from_base).
    pub true_hand_eye: Pose,
    pub injected_error: InjectedError,
    /// Online hand-eye tracking; when off the overlay uses the nominal hand-eye.
    pub tracking: bool,
    /// Std-dev of synthetic feature observations, pixels.
    pub feature_noise_px: f64,
    /// Time constant of the simulated slave joint servo, seconds.
    pub slave_lag: f64,
    /// Tracker runs every `tracker_stride` samples.
    pub tracker_stride: u64,
    /// Images are produced every `frame_stride` samples.
    pub frame_stride: u64,
    /// Node spacing of the distortion remap grid, pixels.
    pub grid_step: u32,
    pub trajectory: TrajectoryConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            duration: 1500,
            seed: 42,
            arms: 1,
            arm_spacing: 0.03,
            true_hand_eye: KinematicChain::default_hand_eye(),
            injected_error: InjectedError::default(),
            tracking: true,
            feature_noise_px: 1.0,
            slave_lag: 0.05,
            tracker_stride: 2,
            frame_stride: 3,
            grid_step: 4,
            trajectory: TrajectoryConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeConfig {
    pub bind: String,
    pub port: u16,
    /// Per-client outgoing queue length, messages.
    pub queue_len: usize,
    /// Pace the loop at the sample rate; otherwise run as fast as possible.
    pub realtime: bool,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig {
            bind: "127.0.0.1".into(),
            port: 8765,
            queue_len: 16,
            realtime: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Measured iterations per stage.
    pub iterations: usize,
    pub warmup: usize,
    /// Stereo compose floor, frames per second.
    pub compose_fps_floor: f64,
    /// Tracker update floor with the full feature atlas, Hz.
    pub tracker_hz_floor: f64,
    /// Length of the free-running run, seconds.
    pub free_run_seconds: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            iterations: 60,
            warmup: 5,
            compose_fps_floor: 30.0,
            tracker_hz_floor: 24.0,
            free_run_seconds: 2.0,
        }
    }
}

fn keyed(key: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::InvalidArgument(m) | Error::Config(m) => Error::Config(format!("{key}: {m}")),
        other => Error::Config(format!("{key}: {other}")),
    }
}

fn bad(key: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{key}: {msg}"))
}

impl Default for Config {
    /// The bundled `default.toml`.
    fn default() -> Self {
        Config::from_toml_str(DEFAULT_TOML, "default.toml").expect("bundled default config is valid")
    }
}

impl Config {
    /// Parses and validates. `origin` names the source in error messages.
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(format!("{origin}: {}", e.to_string().trim_end())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let chain = self.chain()?;
        if self.chain.reference_joints.len() != chain.dof() {
            return Err(bad(
                "chain.reference_joints",
                format!("has {} values, chain has {} joints", self.chain.reference_joints.len(), chain.dof()),
            ));
        }
        let j = self.reference_joints();
        if !chain.within_limits(&j) {
            return Err(bad("chain.reference_joints", "outside joint limits"));
        }
        if let Some(expected) = &self.chain.reference_pose {
            if !expected.rotation.is_unit() {
                return Err(bad("chain.reference_pose.rotation", "not a unit quaternion"));
            }
            let fk = chain.forward_kinematics(&j).map_err(keyed("chain"))?;
            let (dt, dr) = fk.distance(expected);
            if dt > REFERENCE_POSE_TOLERANCE || dr > REFERENCE_POSE_TOLERANCE {
                return Err(bad(
                    "chain.reference_pose",
                    format!("differs from forward kinematics at reference_joints by {dt:.3e} m / {dr:.3e} rad"),
                ));
            }
        }
        self.intrinsics.left.validate().map_err(keyed("intrinsics.left"))?;
        self.intrinsics.right.validate().map_err(keyed("intrinsics.right"))?;
        self.rig().validate().map_err(keyed("stereo.right_from_left"))?;
        self.delay_params().map_err(keyed("delay"))?;
        self.teleop.validate().map_err(keyed("teleop"))?;
        self.opacity.validate().map_err(keyed("opacity"))?;
        self.smoother.validate().map_err(keyed("smoother"))?;
        self.ekf.validate().map_err(keyed("ekf"))?;
        self.checkerboard.validate().map_err(keyed("checkerboard"))?;
        if let Some(he) = &self.hand_eye {
            if !he.rotation.is_unit() {
                return Err(bad("hand_eye.rotation", "not a unit quaternion"));
            }
        }
        self.validate_scenario()?;
        self.validate_serve_bench()
    }

    fn validate_scenario(&self) -> Result<()> {
        let s = &self.scenario;
        if s.duration == 0 {
            return Err(bad("scenario.duration", "must be at least one sample"));
        }
        if !(1..=2).contains(&s.arms) {
            return Err(bad("scenario.arms", format!("must be 1 or 2, got {}", s.arms)));
        }
        if !s.arm_spacing.is_finite() {
            return Err(bad("scenario.arm_spacing", "must be finite"));
        }
        if !s.true_hand_eye.rotation.is_unit() {
            return Err(bad("scenario.true_hand_eye.rotation", "not a unit quaternion"));
        }
        let e = &s.injected_error;
        if e.translation.iter().chain(&e.rotation).any(|v| !v.is_finite()) {
            return Err(bad("scenario.injected_error", "must be finite"));
        }
        if !(s.feature_noise_px >= 0.0 && s.feature_noise_px.is_finite()) {
            return Err(bad("scenario.feature_noise_px", "must be non-negative"));
        }
        if !(s.slave_lag >= 0.0 && s.slave_lag.is_finite()) {
            return Err(bad("scenario.slave_lag", "must be non-negative"));
        }
        if s.tracker_stride == 0 {
            return Err(bad("scenario.tracker_stride", "must be positive"));
        }
        if s.frame_stride == 0 {
            return Err(bad("scenario.frame_stride", "must be positive"));
        }
        if s.grid_step == 0 {
            return Err(bad("scenario.grid_step", "must be positive"));
        }
        let t = &s.trajectory;
        let all = t
            .amplitude
            .iter()
            .chain(&t.frequency)
            .chain(&t.phase)
            .chain(&t.wobble)
            .chain(&t.step)
            .chain(&t.transport);
        if all.copied().chain([t.wobble_frequency]).any(|v| !v.is_finite()) {
            return Err(bad("scenario.trajectory", "parameters must be finite"));
        }
        if t.frequency.iter().chain([&t.wobble_frequency]).any(|&f| f < 0.0) {
            return Err(bad("scenario.trajectory.frequency", "must be non-negative"));
        }
        if t.kind == TrajectoryKind::Handoff && t.transport_samples == 0 {
            return Err(bad("scenario.trajectory.transport_samples", "must be positive"));
        }
        Ok(())
    }

    fn validate_serve_bench(&self) -> Result<()> {
        if self.serve.queue_len == 0 {
            return Err(bad("serve.queue_len", "must be positive"));
        }
        let b = &self.bench;
        if b.iterations == 0 {
            return Err(bad("bench.iterations", "must be positive"));
        }
        if !(b.compose_fps_floor >= 0.0 && b.tracker_hz_floor >= 0.0) {
            return Err(bad("bench", "floors must be non-negative"));
        }
        if !(b.free_run_seconds >= 0.0 && b.free_run_seconds.is_finite()) {
            return Err(bad("bench.free_run_seconds", "must be non-negative"));
        }
        Ok(())
    }

    pub fn chain(&self) -> Result<KinematicChain> {
        KinematicChain::new(self.chain.links.clone()).map_err(keyed("chain.links"))
    }

    pub fn reference_joints(&self) -> JointVector {
        JointVector(self.chain.reference_joints.clone())
    }

    pub fn rig(&self) -> StereoRig {
        StereoRig {
            left: self.intrinsics.left,
            right: self.intrinsics.right,
            right_from_left: self.stereo.right_from_left,
        }
    }

    pub fn delay_params(&self) -> Result<DelayParams> {
        DelayParams::new(self.delay.sample_rate, self.delay.round_trip)
    }

    /// Hand-eye the overlay starts from: the calibrated block when present,
    /// else the true hand-eye with the injected error applied.
    pub fn nominal_hand_eye(&self) -> Pose {
        self.hand_eye
            .unwrap_or_else(|| self.scenario.injected_error.apply(&self.scenario.true_hand_eye))
    }
}
