//! Online hand-eye tracking.
//!
//! An EKF estimates a 6-vector error `e = [v; w]` applied as a left
//! correction to a nominal hand-eye: `T_hat = Pose(exp(w), v) * base`.
//! Feature pixels predicted through the delayed joint readings drive the
//! update. When the corrected estimate drifts too far from the calibrated
//! one the filter is re-initialised from a PnP solve instead. The output is
//! passed through the first-order smoother and published through a
//! [`LatestCell`].

use std::fmt::Write as _;
use std::sync::Arc;

use arc_swap::ArcSwap;
use nalgebra::{DMatrix, DVector, Matrix6, Vector6};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::CameraIntrinsics;
use crate::error::{Error, Result};
use crate::kinematics::{FeatureAtlas, JointVector, KinematicChain};
use crate::pnp::pnp_solve;
use crate::se3::{slerp_blend, to_rpy, translation_blend, wrap_angle, Pose, SmootherParams, Vec3};

/// 99% quantile of chi-square with two degrees of freedom.
pub const CHI2_99_2DOF: f64 = 9.2103;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReinitPolicy {
    /// Meters.
    pub max_translation: f64,
    /// Radians, compared per roll/pitch/yaw axis.
    pub max_rpy: f64,
}

impl Default for ReinitPolicy {
    fn default() -> Self {
        ReinitPolicy {
            max_translation: 0.020,
            max_rpy: 10f64.to_radians(),
        }
    }
}

impl ReinitPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_translation > 0.0 && self.max_rpy > 0.0) {
            return Err(Error::invalid("re-init thresholds must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EkfConfig {
    /// Process noise per sample, m^2 and rad^2.
    pub q_translation: f64,
    pub q_rotation: f64,
    /// Prior covariance at start and after re-init, m^2 and rad^2.
    pub p0_translation: f64,
    pub p0_rotation: f64,
    /// Mahalanobis gate per 2D feature.
    pub gate: f64,
    /// Central-difference step for the measurement Jacobian.
    pub fd_step: f64,
    pub reinit: ReinitPolicy,
}

impl Default for EkfConfig {
    fn default() -> Self {
        EkfConfig {
            q_translation: 1e-8,
            q_rotation: 1e-8,
            p0_translation: 1e-4,
            p0_rotation: 1e-4,
            gate: CHI2_99_2DOF,
            fd_step: 1e-6,
            reinit: ReinitPolicy::default(),
        }
    }
}

impl EkfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.q_translation >= 0.0 && self.q_rotation >= 0.0) {
            return Err(Error::invalid("process noise must be non-negative"));
        }
        if !(self.p0_translation > 0.0 && self.p0_rotation > 0.0) {
            return Err(Error::invalid("prior covariance must be positive"));
        }
        if !(self.gate > 0.0 && self.fd_step > 0.0) {
            return Err(Error::invalid("gate and fd_step must be positive"));
        }
        self.reinit.validate()
    }

    pub fn q(&self) -> Matrix6<f64> {
        diag6(self.q_translation, self.q_rotation)
    }

    pub fn p0(&self) -> Matrix6<f64> {
        diag6(self.p0_translation, self.p0_rotation)
    }
}

fn diag6(t: f64, r: f64) -> Matrix6<f64> {
    Matrix6::from_diagonal(&Vector6::new(t, t, t, r, r, r))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EkfState {
    /// `[translation (m); rotation vector (rad)]`.
    pub error: Vector6<f64>,
    pub covariance: Matrix6<f64>,
    /// Nominal hand-eye (`camera_from_base`) the error is applied to.
    pub base: Pose,
}

impl EkfState {
    pub fn new(base: Pose, cfg: &EkfConfig) -> Self {
        EkfState {
            error: Vector6::zeros(),
            covariance: cfg.p0(),
            base,
        }
    }

    /// Corrected hand-eye.
    pub fn hand_eye(&self) -> Pose {
        self.base.left_perturb(&self.error)
    }

    pub fn is_spd(&self) -> bool {
        let p = &self.covariance;
        (p - p.transpose()).amax() <= 1e-12 * p.amax().max(1e-300) && p.cholesky().is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureObservation {
    pub id: u32,
    pub u: f64,
    pub v: f64,
    /// Pixel noise standard deviation.
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateReport {
    pub used: usize,
    pub gated: usize,
    /// Every observation was rejected by the gate; the state is unchanged.
    pub starved: bool,
    /// RMS of the pre-update innovations of the accepted features, pixels.
    pub innovation_rms: f64,
}

/// Random-walk prediction: the error is held, the covariance grows by `Q`.
pub fn predict(state: &EkfState, cfg: &EkfConfig) -> EkfState {
    EkfState {
        covariance: state.covariance + cfg.q(),
        ..*state
    }
}

fn predicted_pixel(hand_eye: &Pose, p_base: &Vec3, cam: &CameraIntrinsics) -> Option<(f64, f64)> {
    cam.project(&hand_eye.transform_point(p_base)).ok()
}

/// Base-frame feature positions matched to observations, in observation order.
fn matched_points(
    observations: &[FeatureObservation],
    j: &JointVector,
    chain: &KinematicChain,
    atlas: &FeatureAtlas,
) -> Result<Vec<(FeatureObservation, Vec3)>> {
    let poses = chain.link_poses(j)?;
    Ok(observations
        .iter()
        .filter_map(|o| {
            let f = atlas.get(o.id)?;
            Some((*o, poses[f.link].transform_point(&f.point)))
        })
        .collect())
}

/// EKF measurement update with per-feature chi-square gating and a
/// Joseph-form covariance update.
pub fn update(
    state: &EkfState,
    observations: &[FeatureObservation],
    j: &JointVector,
    chain: &KinematicChain,
    atlas: &FeatureAtlas,
    intrinsics: &CameraIntrinsics,
    cfg: &EkfConfig,
) -> Result<(EkfState, UpdateReport)> {
    if let Some(o) = observations.iter().find(|o| !(o.sigma > 0.0)) {
        return Err(Error::invalid(format!("feature {} has non-positive sigma", o.id)));
    }
    let matched = matched_points(observations, j, chain, atlas)?;
    if matched.is_empty() {
        return Err(Error::InsufficientData("no observation matches the feature atlas".into()));
    }
    let p = &state.covariance;
    let h = cfg.fd_step;
    let mut rows: Vec<(nalgebra::Matrix2x6<f64>, nalgebra::Vector2<f64>, f64)> = Vec::new();
    let mut gated = 0;
    let he = state.hand_eye();
    for (o, pb) in &matched {
        let Some(pred) = predicted_pixel(&he, pb, intrinsics) else {
            gated += 1;
            continue;
        };
        let mut hj = nalgebra::Matrix2x6::zeros();
        let mut ok = true;
        for k in 0..6 {
            let mut e = state.error;
            e[k] += h;
            let plus = predicted_pixel(&state.base.left_perturb(&e), pb, intrinsics);
            e[k] -= 2.0 * h;
            let minus = predicted_pixel(&state.base.left_perturb(&e), pb, intrinsics);
            match (plus, minus) {
                (Some(a), Some(b)) => {
                    hj[(0, k)] = (a.0 - b.0) / (2.0 * h);
                    hj[(1, k)] = (a.1 - b.1) / (2.0 * h);
                }
                _ => ok = false,
            }
        }
        if !ok {
            gated += 1;
            continue;
        }
        let nu = nalgebra::Vector2::new(o.u - pred.0, o.v - pred.1);
        let r = o.sigma * o.sigma;
        let s = hj * p * hj.transpose() + nalgebra::Matrix2::identity() * r;
        let d2 = s.try_inverse().map(|si| (nu.transpose() * si * nu)[0]);
        match d2 {
            Some(d2) if d2 <= cfg.gate => rows.push((hj, nu, r)),
            _ => gated += 1,
        }
    }
    if rows.is_empty() {
        return Ok((
            *state,
            UpdateReport {
                used: 0,
                gated,
                starved: true,
                innovation_rms: 0.0,
            },
        ));
    }
    let m = 2 * rows.len();
    let mut hm = DMatrix::zeros(m, 6);
    let mut nu = DVector::zeros(m);
    let mut rm = DMatrix::zeros(m, m);
    for (i, (hj, n, r)) in rows.iter().enumerate() {
        hm.view_mut((2 * i, 0), (2, 6)).copy_from(hj);
        nu[2 * i] = n[0];
        nu[2 * i + 1] = n[1];
        rm[(2 * i, 2 * i)] = *r;
        rm[(2 * i + 1, 2 * i + 1)] = *r;
    }
    let pd = DMatrix::from_column_slice(6, 6, p.as_slice());
    let s = &hm * &pd * hm.transpose() + &rm;
    let s_chol = s
        .cholesky()
        .ok_or_else(|| Error::RankDeficient("innovation covariance is not positive definite".into()))?;
    // K = P H^T S^-1
    let k = s_chol.solve(&(&hm * &pd)).transpose();
    let error = state.error + Vector6::from_column_slice((&k * &nu).as_slice());
    let ikh = DMatrix::identity(6, 6) - &k * &hm;
    let joseph = &ikh * &pd * ikh.transpose() + &k * &rm * k.transpose();
    let mut cov = Matrix6::from_column_slice(joseph.as_slice());
    cov = (cov + cov.transpose()) * 0.5;
    let innovation_rms = (nu.norm_squared() / m as f64).sqrt();
    Ok((
        EkfState {
            error,
            covariance: cov,
            base: state.base,
        },
        UpdateReport {
            used: rows.len(),
            gated,
            starved: false,
            innovation_rms,
        },
    ))
}

/// True when the corrected hand-eye has moved beyond the policy thresholds
/// from the calibrated one. Angle differences are wrapped to (-pi, pi].
pub fn needs_reinit(t_hat: &Pose, t_init: &Pose, policy: &ReinitPolicy) -> bool {
    if (t_hat.translation - t_init.translation).norm() > policy.max_translation {
        return true;
    }
    let a = to_rpy(&t_hat.rotation).as_array();
    let b = to_rpy(&t_init.rotation).as_array();
    a.iter()
        .zip(&b)
        .any(|(x, y)| wrap_angle(x - y).abs() > policy.max_rpy)
}

/// Fresh state from a PnP solve on one frame of features: zero error about
/// the solved hand-eye and covariance `P0`.
pub fn reinit(
    observations: &[FeatureObservation],
    j: &JointVector,
    chain: &KinematicChain,
    atlas: &FeatureAtlas,
    intrinsics: &CameraIntrinsics,
    cfg: &EkfConfig,
) -> Result<EkfState> {
    let matched = matched_points(observations, j, chain, atlas)?;
    if matched.len() < 6 {
        return Err(Error::InsufficientData(format!(
            "re-init needs 6 features, {} visible",
            matched.len()
        )));
    }
    let (pts, px): (Vec<Vec3>, Vec<(f64, f64)>) = matched.iter().map(|(o, p)| (*p, (o.u, o.v))).unzip();
    let base = pnp_solve(&pts, &px, intrinsics)?;
    Ok(EkfState::new(base, cfg))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothedHandEye {
    pub current: Pose,
    pub params: SmootherParams,
}

impl SmoothedHandEye {
    pub fn new(initial: Pose, params: SmootherParams) -> Self {
        SmoothedHandEye {
            current: initial,
            params,
        }
    }

    /// One smoother step towards `t_hat`.
    pub fn smooth_step(&mut self, t_hat: &Pose) -> Result<Pose> {
        let a = self.params.a;
        let rotation = slerp_blend(&self.current.rotation, &t_hat.rotation, a)?;
        let translation = translation_blend(&self.current.translation, &t_hat.translation, a);
        self.current = Pose::new(rotation, translation);
        Ok(self.current)
    }
}

/// Single-writer, many-reader cell holding the newest value. Readers get a
/// complete snapshot and never block the writer.
#[derive(Debug)]
pub struct LatestCell<T> {
    inner: ArcSwap<T>,
}

impl<T> LatestCell<T> {
    pub fn new(value: T) -> Self {
        LatestCell {
            inner: ArcSwap::from_pointee(value),
        }
    }

    pub fn publish(&self, value: T) {
        self.inner.store(Arc::new(value));
    }

    pub fn load(&self) -> Arc<T> {
        self.inner.load_full()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackerSnapshot {
    pub sample: u64,
    /// Smoothed hand-eye used for rendering.
    pub hand_eye: Pose,
    pub covariance_trace: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackerLogRow {
    pub sample: u64,
    pub error: Vector6<f64>,
    pub covariance_trace: f64,
    pub innovation_rms: f64,
    pub gated: usize,
    pub reinit: bool,
}

impl TrackerLogRow {
    pub const CSV_HEADER: &'static str = "sample,e_tx,e_ty,e_tz,e_rx,e_ry,e_rz,cov_trace,innovation_rms_px,gated,reinit";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}", self.sample);
        for v in self.error.iter() {
            let _ = write!(s, ",{v:e}");
        }
        let _ = write!(
            s,
            ",{:e},{:e},{},{}",
            self.covariance_trace,
            self.innovation_rms,
            self.gated,
            u8::from(self.reinit)
        );
        s
    }
}

/// Predict, update (or re-init), smooth and publish, once per tracker tick.
#[derive(Debug)]
pub struct HandEyeTracker {
    pub cfg: EkfConfig,
    pub state: EkfState,
    /// Hand-eye from calibration; re-init decisions compare against it.
    pub initial: Pose,
    pub smoother: SmoothedHandEye,
    pub cell: Arc<LatestCell<TrackerSnapshot>>,
    pub last_error: Option<String>,
}

impl HandEyeTracker {
    pub fn new(initial: Pose, cfg: EkfConfig, smoother: SmootherParams) -> Result<Self> {
        cfg.validate()?;
        smoother.validate()?;
        Ok(HandEyeTracker {
            cfg,
            state: EkfState::new(initial, &cfg),
            initial,
            smoother: SmoothedHandEye::new(initial, smoother),
            cell: Arc::new(LatestCell::new(TrackerSnapshot {
                sample: 0,
                hand_eye: initial,
                covariance_trace: cfg.p0().trace(),
            })),
            last_error: None,
        })
    }

    /// Runs one tracker cycle on the features of sample `n` observed with
    /// joint readings `j` (both delayed).
    pub fn step(
        &mut self,
        n: u64,
        observations: &[FeatureObservation],
        j: &JointVector,
        chain: &KinematicChain,
        atlas: &FeatureAtlas,
        intrinsics: &CameraIntrinsics,
    ) -> Result<TrackerLogRow> {
        let predicted = predict(&self.state, &self.cfg);
        let mut report = UpdateReport::default();
        let mut did_reinit = false;
        self.state = match update(&predicted, observations, j, chain, atlas, intrinsics, &self.cfg) {
            Ok((s, r)) => {
                report = r;
                s
            }
            Err(e) => {
                self.last_error = Some(e.to_string());
                predicted
            }
        };
        if needs_reinit(&self.state.hand_eye(), &self.initial, &self.cfg.reinit) {
            match reinit(observations, j, chain, atlas, intrinsics, &self.cfg) {
                Ok(s) => {
                    self.state = s;
                    did_reinit = true;
                }
                Err(e) => self.last_error = Some(e.to_string()),
            }
        }
        let smoothed = self.smoother.smooth_step(&self.state.hand_eye())?;
        self.cell.publish(TrackerSnapshot {
            sample: n,
            hand_eye: smoothed,
            covariance_trace: self.state.covariance.trace(),
        });
        Ok(TrackerLogRow {
            sample: n,
            error: self.state.error,
            covariance_trace: self.state.covariance.trace(),
            innovation_rms: report.innovation_rms,
            gated: report.gated,
            reinit: did_reinit,
        })
    }

    pub fn hand_eye(&self) -> Pose {
        self.smoother.current
    }
}

/// Stand-in feature detector: true projections of the atlas through the true
/// hand-eye, Gaussian pixel noise, and culling of features outside the image
/// or behind the camera.
pub fn synthetic_observations<R: Rng + ?Sized>(
    true_hand_eye: &Pose,
    j: &JointVector,
    chain: &KinematicChain,
    atlas: &FeatureAtlas,
    intrinsics: &CameraIntrinsics,
    sigma: f64,
    rng: &mut R,
) -> Result<Vec<FeatureObservation>> {
    let pts = atlas.base_points(chain, j)?;
    let noise = Normal::new(0.0, sigma.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    let mut out = Vec::with_capacity(pts.len());
    for (f, p) in atlas.features.iter().zip(&pts) {
        let Ok((u, v)) = intrinsics.project(&true_hand_eye.transform_point(p)) else {
            continue;
        };
        let (u, v) = if sigma > 0.0 {
            (u + noise.sample(rng), v + noise.sample(rng))
        } else {
            (u, v)
        };
        if intrinsics.contains(u, v) {
            out.push(FeatureObservation {
                id: f.id,
                u,
                v,
                sigma: sigma.max(1e-3),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::{from_rpy, rotation_geodesic, Quaternion};
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Scene {
        chain: KinematicChain,
        atlas: FeatureAtlas,
        cam: CameraIntrinsics,
        truth: Pose,
    }

    fn scene() -> Scene {
        Scene {
            chain: KinematicChain::default_instrument(),
            atlas: FeatureAtlas::default_instrument(),
            cam: CameraIntrinsics::default(),
            truth: KinematicChain::default_hand_eye(),
        }
    }

    fn jitter_joints(rng: &mut ChaCha8Rng, chain: &KinematicChain) -> JointVector {
        let c = KinematicChain::default_reference_joints();
        let spread = [0.1, 0.1, 0.01, 0.5, 0.3, 0.3, 0.5];
        chain.clamp(&JointVector(
            c.0.iter().zip(spread).map(|(&q, s)| q + rng.random_range(-s..s)).collect(),
        ))
    }

    fn offset(base: &Pose, dt: f64, dr: f64) -> Pose {
        let t = Vec3::new(1.0, -1.0, 1.0).normalize() * dt;
        let w = Vec3::new(1.0, -1.0, 0.8).normalize() * dr;
        Pose::new(Quaternion::from_rotation_vector(&w) * base.rotation, base.translation + t)
    }

    #[test]
    fn all_default_features_are_visible_at_reference() {
        let s = scene();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let obs = synthetic_observations(
            &s.truth,
            &KinematicChain::default_reference_joints(),
            &s.chain,
            &s.atlas,
            &s.cam,
            0.0,
            &mut rng,
        )
        .unwrap();
        assert_eq!(obs.len(), 12);
    }

    #[test]
    fn predict_accumulates_q() {
        let cfg = EkfConfig::default();
        let s0 = EkfState::new(Pose::IDENTITY, &cfg);
        let mut s = s0;
        for _ in 0..10 {
            let before = s.covariance.trace();
            s = predict(&s, &cfg);
            assert!(s.covariance.trace() > before);
        }
        assert!((s.covariance - (s0.covariance + cfg.q() * 10.0)).amax() < 1e-18);
        assert_eq!(s.error, s0.error);
        let zero = EkfConfig {
            q_translation: 0.0,
            q_rotation: 0.0,
            ..cfg
        };
        assert_eq!(predict(&s0, &zero), s0);
    }

    #[test]
    fn zero_innovation_fixed_point() {
        let s = scene();
        let cfg = EkfConfig::default();
        let j = KinematicChain::default_reference_joints();
        let state = EkfState {
            error: Vector6::new(0.002, -0.001, 0.0005, 0.01, -0.02, 0.005),
            ..EkfState::new(s.truth, &cfg)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut obs = synthetic_observations(&state.hand_eye(), &j, &s.chain, &s.atlas, &s.cam, 0.0, &mut rng).unwrap();
        for o in &mut obs {
            o.sigma = 1.0;
        }
        let (next, rep) = update(&state, &obs, &j, &s.chain, &s.atlas, &s.cam, &cfg).unwrap();
        assert_eq!(next.error, state.error);
        assert!(next.covariance.trace() < state.covariance.trace());
        assert_eq!(rep.gated, 0);
        assert!(next.is_spd());
    }

    #[test]
    fn converges_from_injected_error() {
        let s = scene();
        let cfg = EkfConfig::default();
        let nominal = offset(&s.truth, 0.010, 5f64.to_radians());
        let mut state = EkfState::new(nominal, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let j = jitter_joints(&mut rng, &s.chain);
            let obs = synthetic_observations(&s.truth, &j, &s.chain, &s.atlas, &s.cam, 1.0, &mut rng).unwrap();
            state = predict(&state, &cfg);
            state = update(&state, &obs, &j, &s.chain, &s.atlas, &s.cam, &cfg).unwrap().0;
        }
        let (dt, dr) = state.hand_eye().distance(&s.truth);
        assert!(dt < 0.002 && dr < 1f64.to_radians(), "{dt} {}", dr.to_degrees());
    }

    #[test]
    fn single_feature_leaves_unobservable_variance() {
        let s = scene();
        let cfg = EkfConfig::default();
        let j = KinematicChain::default_reference_joints();
        let state = EkfState::new(s.truth, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let obs = synthetic_observations(&s.truth, &j, &s.chain, &s.atlas, &s.cam, 0.0, &mut rng).unwrap();
        let one = [FeatureObservation { sigma: 1.0, ..obs[3] }];
        let (next, _) = update(&state, &one, &j, &s.chain, &s.atlas, &s.cam, &cfg).unwrap();
        // null space of the 2x6 Jacobian via SVD of H
        let pb = s.atlas.base_points(&s.chain, &j).unwrap()[3];
        let mut hj = DMatrix::zeros(2, 6);
        for k in 0..6 {
            let mut e = Vector6::zeros();
            e[k] = 1e-6;
            let a = predicted_pixel(&s.truth.left_perturb(&e), &pb, &s.cam).unwrap();
            let b = predicted_pixel(&s.truth.left_perturb(&-e), &pb, &s.cam).unwrap();
            hj[(0, k)] = (a.0 - b.0) / 2e-6;
            hj[(1, k)] = (a.1 - b.1) / 2e-6;
        }
        let svd = hj.svd(false, true);
        let vt = svd.v_t.unwrap();
        let full = DMatrix::<f64>::identity(6, 6) - vt.transpose() * &vt;
        let null = full.svd(true, false).u.unwrap();
        let p0 = DMatrix::from_column_slice(6, 6, state.covariance.as_slice());
        let p1 = DMatrix::from_column_slice(6, 6, next.covariance.as_slice());
        for k in 0..4 {
            let v = null.column(k);
            let before = (v.transpose() * &p0 * v)[0];
            let after = (v.transpose() * &p1 * v)[0];
            assert!((before - after).abs() <= 1e-9 * before, "{before} {after}");
        }
        let observed: DVector<f64> = vt.row(0).transpose();
        let before = (observed.transpose() * &p0 * &observed)[0];
        let after = (observed.transpose() * &p1 * &observed)[0];
        assert!(after < 0.5 * before);
    }

    #[test]
    fn covariance_stays_spd_over_many_cycles() {
        let s = scene();
        let cfg = EkfConfig::default();
        let mut state = EkfState::new(offset(&s.truth, 0.005, 0.03), &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for i in 0..10_000 {
            let j = jitter_joints(&mut rng, &s.chain);
            let mut obs = synthetic_observations(&s.truth, &j, &s.chain, &s.atlas, &s.cam, 1.0, &mut rng).unwrap();
            let keep = rng.random_range(1..=obs.len());
            obs.truncate(keep);
            state = predict(&state, &cfg);
            state = update(&state, &obs, &j, &s.chain, &s.atlas, &s.cam, &cfg).unwrap().0;
            assert!(state.is_spd(), "cycle {i}");
        }
    }

    #[test]
    fn all_gated_is_starved() {
        let s = scene();
        let cfg = EkfConfig::default();
        let j = KinematicChain::default_reference_joints();
        let state = EkfState::new(s.truth, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut obs = synthetic_observations(&s.truth, &j, &s.chain, &s.atlas, &s.cam, 0.0, &mut rng).unwrap();
        for o in &mut obs {
            o.u += 400.0;
            o.sigma = 1.0;
        }
        let (next, rep) = update(&state, &obs, &j, &s.chain, &s.atlas, &s.cam, &cfg).unwrap();
        assert!(rep.starved);
        assert_eq!(rep.gated, obs.len());
        assert_eq!(next, state);
    }

    #[test]
    fn reinit_policy_examples() {
        let p = ReinitPolicy::default();
        let t = Pose::new(from_rpy(0.1, 0.2, 0.3), Vec3::new(0.01, 0.0, 0.1));
        assert!(!needs_reinit(&t, &t, &p));
        let moved = Pose::new(t.rotation, t.translation + Vec3::new(0.025, 0.0, 0.0));
        assert!(needs_reinit(&moved, &t, &p));
        let a = Pose::from_rotation(from_rpy(0.0, 0.0, 179f64.to_radians()));
        let b = Pose::from_rotation(from_rpy(0.0, 0.0, -179f64.to_radians()));
        assert!(!needs_reinit(&a, &b, &p));
        let c = Pose::from_rotation(from_rpy(0.0, 0.0, 12f64.to_radians()));
        assert!(needs_reinit(&c, &Pose::IDENTITY, &p));
    }

    #[test]
    fn reinit_recovers_truth() {
        let s = scene();
        let cfg = EkfConfig::default();
        let j = KinematicChain::default_reference_joints();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let obs = synthetic_observations(&s.truth, &j, &s.chain, &s.atlas, &s.cam, 0.0, &mut rng).unwrap();
        let st = reinit(&obs, &j, &s.chain, &s.atlas, &s.cam, &cfg).unwrap();
        let (dt, dr) = st.base.distance(&s.truth);
        assert!(dt < 1e-6 && dr < 1e-6, "{dt} {dr}");
        assert_eq!(st.error, Vector6::zeros());
        assert_eq!(st.covariance, cfg.p0());
        assert!(reinit(&obs[..5], &j, &s.chain, &s.atlas, &s.cam, &cfg).is_err());
    }

    #[test]
    fn smoother_step_response() {
        let target = Pose::new(Quaternion::rz(10f64.to_radians()), Vec3::new(0.010, 0.0, 0.0));
        let mut sm = SmoothedHandEye::new(Pose::IDENTITY, SmootherParams::default());
        let first = sm.smooth_step(&target).unwrap();
        assert!((first.translation.x - 0.008).abs() < 1e-15);
        assert!(rotation_geodesic(&first.rotation, &Quaternion::rz(8f64.to_radians())) < 1e-12);
        for k in 2..=20 {
            let out = sm.smooth_step(&target).unwrap();
            let expect = 0.010 * (1.0 - 0.2f64.powi(k));
            assert!((out.translation.x - expect).abs() < 1e-15, "{k}");
        }
        let mut jump = SmoothedHandEye::new(Pose::IDENTITY, SmootherParams::new(1.0).unwrap());
        assert_eq!(jump.smooth_step(&target).unwrap(), target);
        let mut fixed = SmoothedHandEye::new(target, SmootherParams::default());
        assert_eq!(fixed.smooth_step(&target).unwrap().rotation, target.rotation);
    }

    #[test]
    fn latest_cell_readers_see_whole_values() {
        let cell = Arc::new(LatestCell::new((0u64, 0u64)));
        std::thread::scope(|s| {
            let c = cell.clone();
            s.spawn(move || {
                for i in 1..20_000u64 {
                    c.publish((i, i * 2));
                }
            });
            for _ in 0..20_000 {
                let v = cell.load();
                assert_eq!(v.1, v.0 * 2);
            }
        });
    }

    #[test]
    fn tracker_is_deterministic_and_logs() {
        let s = scene();
        let run = || {
            let mut t = HandEyeTracker::new(offset(&s.truth, 0.01, 0.05), EkfConfig::default(), SmootherParams::default()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut log = String::new();
            for n in 0..50 {
                let j = jitter_joints(&mut rng, &s.chain);
                let obs = synthetic_observations(&s.truth, &j, &s.chain, &s.atlas, &s.cam, 1.0, &mut rng).unwrap();
                log.push_str(&t.step(n, &obs, &j, &s.chain, &s.atlas, &s.cam).unwrap().to_csv());
                log.push('\n');
            }
            (log, t.cell.load().hand_eye)
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        assert_eq!(a.lines().next().unwrap().split(',').count(), TrackerLogRow::CSV_HEADER.split(',').count());
    }

    #[test]
    fn tracker_reinits_on_large_drift() {
        let s = scene();
        let mut t = HandEyeTracker::new(s.truth, EkfConfig::default(), SmootherParams::default()).unwrap();
        // the calibrated hand-eye is 30 mm off: the corrected estimate leaves
        // the 20 mm envelope and the PnP path takes over
        t.initial = offset(&s.truth, 0.030, 0.0);
        let j = KinematicChain::default_reference_joints();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let obs = synthetic_observations(&s.truth, &j, &s.chain, &s.atlas, &s.cam, 0.0, &mut rng).unwrap();
        let row = t.step(0, &obs, &j, &s.chain, &s.atlas, &s.cam).unwrap();
        assert!(row.reinit);
        assert!(t.state.base.distance(&s.truth).0 < 1e-6);
    }
}
