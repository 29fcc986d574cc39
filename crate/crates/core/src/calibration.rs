//! Hand-eye calibration from checkerboard views.
//!
//! A checkerboard is mounted on the end effector. For image `j` with joint
//! vector `q_j` corner `i` is predicted at
//!
//! ```text
//! p_c(i, j) = project(T_bc * FK(q_j) * T_mount * p_e(i; s))
//! ```
//!
//! and the calibration minimises `(1/m) sum_ij |p_c(i, j) - z(i, j)|^2` over
//! the hand-eye `T_bc`, the board mounting offset `T_mount` and the square
//! side `s` with Levenberg-Marquardt. Each pose is parameterised as
//! `(t + v, exp(w) q)` about its current value, giving 13 unknowns.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, SVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::{CameraIntrinsics, MIN_DEPTH};
use crate::error::{Error, Result};
use crate::kinematics::{JointVector, KinematicChain};
use crate::pnp::pnp_solve;
use crate::se3::{from_rpy, skew, to_rpy, Pose, Quaternion, Vec3};

pub const PARAMETER_COUNT: usize = 13;

pub const PARAMETER_NAMES: [&str; PARAMETER_COUNT] = [
    "hand_eye.tx",
    "hand_eye.ty",
    "hand_eye.tz",
    "hand_eye.rx",
    "hand_eye.ry",
    "hand_eye.rz",
    "mount.tx",
    "mount.ty",
    "mount.tz",
    "mount.rx",
    "mount.ry",
    "mount.rz",
    "side",
];

const MAX_ITERATIONS: usize = 200;
const RELATIVE_COST_TOLERANCE: f64 = 1e-10;
const OBSERVABILITY_THRESHOLD: f64 = 1e-10;

pub type ParamVector = SVector<f64, PARAMETER_COUNT>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckerboardSpec {
    /// Interior corners along y.
    pub rows: usize,
    /// Interior corners along x.
    pub cols: usize,
    /// Square side, meters.
    pub side: f64,
}

impl Default for CheckerboardSpec {
    fn default() -> Self {
        CheckerboardSpec {
            rows: 6,
            cols: 8,
            side: 0.008,
        }
    }
}

impl CheckerboardSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rows < 3 || self.cols < 3 {
            return Err(Error::invalid(format!(
                "checkerboard needs at least 3x3 interior corners, got {}x{}",
                self.rows, self.cols
            )));
        }
        if !(self.side > 0.0 && self.side.is_finite()) {
            return Err(Error::invalid("checkerboard side must be positive"));
        }
        Ok(())
    }

    pub fn corner_count(&self) -> usize {
        self.rows * self.cols
    }

    /// Unit-side board coordinates of corner `i`, centred on the board.
    /// Corners are numbered row-major.
    pub fn unit_corner(&self, i: usize) -> Vec3 {
        let (r, c) = (i / self.cols, i % self.cols);
        Vec3::new(
            c as f64 - (self.cols - 1) as f64 / 2.0,
            r as f64 - (self.rows - 1) as f64 / 2.0,
            0.0,
        )
    }

    pub fn corner(&self, i: usize, side: f64) -> Vec3 {
        self.unit_corner(i) * side
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CornerObservation {
    pub id: usize,
    pub u: f64,
    pub v: f64,
    pub visible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationImage {
    pub joints: JointVector,
    pub corners: Vec<CornerObservation>,
}

impl CalibrationImage {
    pub fn visible(&self) -> impl Iterator<Item = &CornerObservation> {
        self.corners.iter().filter(|c| c.visible)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationDataset {
    pub board: CheckerboardSpec,
    pub images: Vec<CalibrationImage>,
}

impl CalibrationDataset {
    pub fn validate(&self, intrinsics: &CameraIntrinsics, chain: &KinematicChain) -> Result<()> {
        self.board.validate()?;
        let n = self.board.corner_count();
        for (j, img) in self.images.iter().enumerate() {
            if img.joints.len() != chain.dof() {
                return Err(Error::invalid(format!(
                    "image {j}: {} joints, chain has {}",
                    img.joints.len(),
                    chain.dof()
                )));
            }
            let mut seen = vec![false; n];
            for c in &img.corners {
                if c.id >= n {
                    return Err(Error::invalid(format!("image {j}: corner id {} out of range", c.id)));
                }
                if std::mem::replace(&mut seen[c.id], true) {
                    return Err(Error::invalid(format!("image {j}: corner {} listed twice", c.id)));
                }
                if c.visible && !intrinsics.contains(c.u, c.v) {
                    return Err(Error::invalid(format!(
                        "image {j}: corner {} at ({}, {}) lies outside the image",
                        c.id, c.u, c.v
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn visible_count(&self) -> usize {
        self.images.iter().map(|i| i.visible().count()).sum()
    }

    /// Text form:
    ///
    /// ```text
    /// # comment
    /// board,<rows>,<cols>,<side_m>
    /// image,<q_0>,...,<q_{k-1}>
    /// corner,<id>,<u_px>,<v_px>,<visible 0|1>
    /// ...
    /// ```
    ///
    /// One `board` line first, then for each image an `image` line with the
    /// joint vector followed by its `corner` lines.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("# telelens calibration dataset\n");
        let _ = writeln!(s, "board,{},{},{}", self.board.rows, self.board.cols, self.board.side);
        for img in &self.images {
            s.push_str("image");
            for q in img.joints.as_slice() {
                let _ = write!(s, ",{q}");
            }
            s.push('\n');
            for c in &img.corners {
                let _ = writeln!(s, "corner,{},{},{},{}", c.id, c.u, c.v, u8::from(c.visible));
            }
        }
        s
    }

    pub fn parse_csv(text: &str, origin: &str) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: origin.to_string(),
            line,
            message,
        };
        let num = |line: usize, field: &str| -> Result<f64> {
            field
                .trim()
                .parse::<f64>()
                .map_err(|_| err(line, format!("not a number: {field:?}")))
        };
        let mut board = None;
        let mut images: Vec<CalibrationImage> = Vec::new();
        for (k, raw) in text.lines().enumerate() {
            let line = k + 1;
            let raw = raw.trim();
            if raw.is_empty() || raw.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = raw.split(',').collect();
            match fields[0].trim() {
                "board" => {
                    if board.is_some() {
                        return Err(err(line, "second board line".into()));
                    }
                    if fields.len() != 4 {
                        return Err(err(line, "board needs rows, cols, side".into()));
                    }
                    let rows = fields[1].trim().parse().map_err(|_| err(line, "bad rows".into()))?;
                    let cols = fields[2].trim().parse().map_err(|_| err(line, "bad cols".into()))?;
                    let spec = CheckerboardSpec {
                        rows,
                        cols,
                        side: num(line, fields[3])?,
                    };
                    spec.validate().map_err(|e| err(line, e.to_string()))?;
                    board = Some(spec);
                }
                "image" => {
                    if board.is_none() {
                        return Err(err(line, "image before board line".into()));
                    }
                    let joints = fields[1..]
                        .iter()
                        .map(|f| num(line, f))
                        .collect::<Result<Vec<_>>>()?;
                    if joints.is_empty() {
                        return Err(err(line, "image line without joints".into()));
                    }
                    images.push(CalibrationImage {
                        joints: JointVector(joints),
                        corners: Vec::new(),
                    });
                }
                "corner" => {
                    let Some(img) = images.last_mut() else {
                        return Err(err(line, "corner before any image line".into()));
                    };
                    if fields.len() != 5 {
                        return Err(err(line, "corner needs id, u, v, visible".into()));
                    }
                    let id = fields[1].trim().parse().map_err(|_| err(line, "bad corner id".into()))?;
                    let visible = match fields[4].trim() {
                        "1" => true,
                        "0" => false,
                        other => return Err(err(line, format!("visible flag must be 0 or 1, got {other:?}"))),
                    };
                    img.corners.push(CornerObservation {
                        id,
                        u: num(line, fields[2])?,
                        v: num(line, fields[3])?,
                        visible,
                    });
                }
                other => return Err(err(line, format!("unknown record type {other:?}"))),
            }
        }
        let board = board.ok_or_else(|| err(0, "missing board line".into()))?;
        Ok(CalibrationDataset { board, images })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_csv(&text, &path.display().to_string())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// The quantities being estimated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibParams {
    /// `camera_from_base`.
    pub hand_eye: Pose,
    /// `end_effector_from_board`.
    pub mount: Pose,
    pub side: f64,
}

impl CalibParams {
    /// Applies a 13-vector increment: translations add, rotations compose
    /// `exp(w)` on the left, the side adds.
    pub fn perturbed(&self, d: &ParamVector) -> CalibParams {
        let step = |p: &Pose, o: usize| {
            Pose::new(
                Quaternion::from_rotation_vector(&Vec3::new(d[o + 3], d[o + 4], d[o + 5])) * p.rotation,
                p.translation + Vec3::new(d[o], d[o + 1], d[o + 2]),
            )
        };
        CalibParams {
            hand_eye: step(&self.hand_eye, 0),
            mount: step(&self.mount, 6),
            side: self.side + d[12],
        }
    }
}

/// Stacked reprojection residuals in image-major, corner-minor order.
#[derive(Debug, Clone)]
pub struct ResidualSet {
    pub values: Vec<f64>,
    /// `(image, corner id)` for each residual pair.
    pub index: Vec<(usize, usize)>,
    /// Visible corners that fell behind the camera and were left out.
    pub behind: usize,
    pub jacobian: Option<DMatrix<f64>>,
}

impl ResidualSet {
    pub fn sum_squares(&self) -> f64 {
        self.values.iter().map(|r| r * r).sum()
    }

    pub fn rms(&self) -> f64 {
        if self.values.is_empty() {
            0.0
        } else {
            (self.sum_squares() / self.values.len() as f64).sqrt()
        }
    }
}

struct Problem<'a> {
    dataset: &'a CalibrationDataset,
    intrinsics: &'a CameraIntrinsics,
    fk: Vec<Pose>,
}

impl<'a> Problem<'a> {
    fn new(dataset: &'a CalibrationDataset, intrinsics: &'a CameraIntrinsics, chain: &KinematicChain) -> Result<Self> {
        let fk = dataset
            .images
            .iter()
            .map(|img| chain.forward_kinematics(&img.joints))
            .collect::<Result<_>>()?;
        Ok(Problem {
            dataset,
            intrinsics,
            fk,
        })
    }

    fn evaluate(&self, p: &CalibParams, with_jacobian: bool) -> ResidualSet {
        let board = &self.dataset.board;
        let cam = self.intrinsics;
        let mut values = Vec::new();
        let mut index = Vec::new();
        let mut rows: Vec<[f64; 2 * PARAMETER_COUNT]> = Vec::new();
        let mut behind = 0;
        let r_bc = p.hand_eye.rotation.to_matrix();
        let r_ee = p.mount.rotation.to_matrix();
        for (j, (img, fk)) in self.dataset.images.iter().zip(&self.fk).enumerate() {
            let r_eb = fk.rotation.to_matrix();
            let r_chain = r_bc * r_eb;
            for c in img.visible() {
                let g = board.unit_corner(c.id);
                let y = p.mount.transform_point(&(g * p.side));
                let x = fk.transform_point(&y);
                let pc = p.hand_eye.transform_point(&x);
                if pc.z <= MIN_DEPTH {
                    behind += 1;
                    continue;
                }
                let (u, v) = cam.project(&pc).expect("depth checked");
                values.push(u - c.u);
                values.push(v - c.v);
                index.push((j, c.id));
                if with_jacobian {
                    let jp = cam.projection_jacobian(&pc);
                    let blocks: [nalgebra::Matrix2x3<f64>; 4] = [
                        jp,
                        jp * (-skew(&(r_bc * x))),
                        jp * r_chain,
                        jp * r_chain * (-skew(&(r_ee * g * p.side))),
                    ];
                    let dside = jp * (r_chain * (r_ee * g));
                    let mut row = [0.0; 2 * PARAMETER_COUNT];
                    for k in 0..2 {
                        for (b, blk) in blocks.iter().enumerate() {
                            for col in 0..3 {
                                row[k * PARAMETER_COUNT + 3 * b + col] = blk[(k, col)];
                            }
                        }
                        row[k * PARAMETER_COUNT + 12] = dside[k];
                    }
                    rows.push(row);
                }
            }
        }
        let jacobian = with_jacobian.then(|| {
            let mut jm = DMatrix::zeros(values.len(), PARAMETER_COUNT);
            for (i, row) in rows.iter().enumerate() {
                for k in 0..2 {
                    for col in 0..PARAMETER_COUNT {
                        jm[(2 * i + k, col)] = row[k * PARAMETER_COUNT + col];
                    }
                }
            }
            jm
        });
        ResidualSet {
            values,
            index,
            behind,
            jacobian,
        }
    }

    fn cost(&self, r: &ResidualSet) -> f64 {
        r.sum_squares() / self.dataset.images.len().max(1) as f64
    }
}

/// Residuals `p_c(i, j) - z(i, j)` with their 13-column Jacobian.
pub fn reprojection_residuals(
    params: &CalibParams,
    dataset: &CalibrationDataset,
    intrinsics: &CameraIntrinsics,
    chain: &KinematicChain,
) -> Result<ResidualSet> {
    let problem = Problem::new(dataset, intrinsics, chain)?;
    Ok(problem.evaluate(params, true))
}

/// Calibration cost `(1/m) sum |r|^2` and its gradient with respect to the
/// 13-parameter increment at `params`.
pub fn cost_and_gradient(
    params: &CalibParams,
    dataset: &CalibrationDataset,
    intrinsics: &CameraIntrinsics,
    chain: &KinematicChain,
) -> Result<(f64, ParamVector)> {
    let problem = Problem::new(dataset, intrinsics, chain)?;
    let r = problem.evaluate(params, true);
    let jac = r.jacobian.as_ref().expect("requested");
    let res = DVector::from_column_slice(&r.values);
    let m = dataset.images.len().max(1) as f64;
    let g = jac.transpose() * res * (2.0 / m);
    Ok((problem.cost(&r), ParamVector::from_column_slice(g.as_slice())))
}

/// Calibration cost only.
pub fn cost(
    params: &CalibParams,
    dataset: &CalibrationDataset,
    intrinsics: &CameraIntrinsics,
    chain: &KinematicChain,
) -> Result<f64> {
    let problem = Problem::new(dataset, intrinsics, chain)?;
    let r = problem.evaluate(params, false);
    Ok(problem.cost(&r))
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitialEstimate {
    pub hand_eye: Pose,
    pub used: Vec<usize>,
    /// Images PnP could not solve, with the reason.
    pub skipped: Vec<(usize, String)>,
}

/// Per-image PnP estimates combined by averaging positions and (circularly)
/// roll, pitch and yaw.
pub fn initial_handeye(
    dataset: &CalibrationDataset,
    intrinsics: &CameraIntrinsics,
    chain: &KinematicChain,
) -> Result<Pose> {
    initial_handeye_detailed(dataset, intrinsics, chain).map(|e| e.hand_eye)
}

pub fn initial_handeye_detailed(
    dataset: &CalibrationDataset,
    intrinsics: &CameraIntrinsics,
    chain: &KinematicChain,
) -> Result<InitialEstimate> {
    let mut estimates = Vec::new();
    let mut used = Vec::new();
    let mut skipped = Vec::new();
    for (j, img) in dataset.images.iter().enumerate() {
        let (obj, px): (Vec<Vec3>, Vec<(f64, f64)>) = img
            .visible()
            .map(|c| (dataset.board.corner(c.id, dataset.board.side), (c.u, c.v)))
            .unzip();
        let attempt = pnp_solve(&obj, &px, intrinsics)
            .and_then(|cam_from_board| Ok(cam_from_board.compose(&chain.forward_kinematics(&img.joints)?.inverse())));
        match attempt {
            Ok(est) => {
                estimates.push(est);
                used.push(j);
            }
            Err(e) => skipped.push((j, e.to_string())),
        }
    }
    if estimates.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "{} of {} images usable for the initial hand-eye, need 3",
            estimates.len(),
            dataset.images.len()
        )));
    }
    Ok(InitialEstimate {
        hand_eye: average_poses(&estimates),
        used,
        skipped,
    })
}

/// Arithmetic mean of positions and circular mean of roll, pitch and yaw.
pub fn average_poses(poses: &[Pose]) -> Pose {
    let n = poses.len() as f64;
    let t = poses.iter().map(|p| p.translation).sum::<Vec3>() / n;
    let mut s = [0.0f64; 3];
    let mut c = [0.0f64; 3];
    for p in poses {
        for (k, a) in to_rpy(&p.rotation).as_array().into_iter().enumerate() {
            s[k] += a.sin();
            c[k] += a.cos();
        }
    }
    let mean = |k: usize| s[k].atan2(c[k]);
    Pose::new(from_rpy(mean(0), mean(1), mean(2)), t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub hand_eye: Pose,
    pub mount: Pose,
    pub side: f64,
    /// RMS reprojection error per coordinate, pixels.
    pub rms: f64,
    pub per_image_rms: Vec<f64>,
    pub iterations: usize,
    /// Cost after each accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
    /// Visible corners left out because they fell behind the camera.
    pub excluded: usize,
}

impl CalibrationResult {
    /// Config-compatible block: `[hand_eye]` plus an informational `[calibration]` table.
    pub fn to_toml(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Block<'a> {
            hand_eye: &'a Pose,
            calibration: CalibrationRecord,
        }
        toml::to_string(&Block {
            hand_eye: &self.hand_eye,
            calibration: CalibrationRecord {
                side: self.side,
                rms_px: self.rms,
                mount: self.mount,
            },
        })
        .map_err(|e| Error::Config(e.to_string()))
    }
}

/// Summary stored next to a calibrated hand-eye in a config file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationRecord {
    /// Estimated checkerboard square side, meters.
    pub side: f64,
    pub rms_px: f64,
    /// End-effector to board transform.
    pub mount: Pose,
}

fn unobservable_directions(h: &DMatrix<f64>) -> Option<Vec<String>> {
    let d: Vec<f64> = (0..PARAMETER_COUNT).map(|i| h[(i, i)].max(0.0).sqrt()).collect();
    let mut names: Vec<String> = d
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == 0.0)
        .map(|(i, _)| PARAMETER_NAMES[i].to_string())
        .collect();
    if !names.is_empty() {
        return Some(names);
    }
    let mut n = h.clone();
    for i in 0..PARAMETER_COUNT {
        for j in 0..PARAMETER_COUNT {
            n[(i, j)] /= d[i] * d[j];
        }
    }
    let eig = n.symmetric_eigen();
    let max = eig.eigenvalues.max();
    for (k, &ev) in eig.eigenvalues.iter().enumerate() {
        if ev <= OBSERVABILITY_THRESHOLD * max {
            let v = eig.eigenvectors.column(k);
            let peak = v.amax();
            let members: Vec<&str> = (0..PARAMETER_COUNT)
                .filter(|&i| v[i].abs() >= 0.25 * peak)
                .map(|i| PARAMETER_NAMES[i])
                .collect();
            names.push(members.join("+"));
        }
    }
    (!names.is_empty()).then_some(names)
}

/// Levenberg-Marquardt refinement of hand-eye, board mount and side length.
/// The mount starts at identity and the side at the board's nominal value.
pub fn solve_calibration(
    dataset: &CalibrationDataset,
    intrinsics: &CameraIntrinsics,
    chain: &KinematicChain,
    init: Pose,
) -> Result<CalibrationResult> {
    dataset.validate(intrinsics, chain)?;
    if dataset.images.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "calibration needs at least 3 images, got {}",
            dataset.images.len()
        )));
    }
    let problem = Problem::new(dataset, intrinsics, chain)?;
    let mut params = CalibParams {
        hand_eye: init,
        mount: Pose::IDENTITY,
        side: dataset.board.side,
    };
    let mut current = problem.evaluate(&params, true);
    if current.values.is_empty() {
        return Err(Error::InsufficientData("no visible corners in front of the camera".into()));
    }
    let mut cost = problem.cost(&current);
    let mut history = vec![cost];
    let mut lambda = 1e-3;
    let mut iterations = 0;

    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let jac = current.jacobian.take().expect("jacobian requested");
        let res = DVector::from_column_slice(&current.values);
        let h = jac.transpose() * &jac;
        let g = jac.transpose() * res;
        if iterations == 1 {
            if let Some(dirs) = unobservable_directions(&h) {
                return Err(Error::Unobservable(dirs));
            }
        }
        let mut accepted = None;
        while lambda < 1e12 {
            let mut a = h.clone();
            for i in 0..PARAMETER_COUNT {
                a[(i, i)] += lambda * h[(i, i)];
            }
            let Some(ch) = a.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let step = -ch.solve(&g);
            let trial = params.perturbed(&ParamVector::from_column_slice(step.as_slice()));
            let r = problem.evaluate(&trial, false);
            let c = problem.cost(&r);
            if r.behind <= current.behind && r.values.len() == current.values.len() && c <= cost {
                accepted = Some((trial, c));
                break;
            }
            lambda *= 10.0;
        }
        let Some((trial, c)) = accepted else {
            current.jacobian = Some(jac);
            break;
        };
        let rel = if cost > 0.0 { (cost - c) / cost } else { 0.0 };
        params = trial;
        cost = c;
        history.push(c);
        lambda = (lambda / 10.0).max(1e-12);
        current = problem.evaluate(&params, true);
        if rel < RELATIVE_COST_TOLERANCE || cost == 0.0 {
            break;
        }
    }

    let mut per_image = vec![(0.0, 0usize); dataset.images.len()];
    for (k, &(j, _)) in current.index.iter().enumerate() {
        let (a, b) = (current.values[2 * k], current.values[2 * k + 1]);
        per_image[j].0 += a * a + b * b;
        per_image[j].1 += 2;
    }
    Ok(CalibrationResult {
        hand_eye: params.hand_eye,
        mount: params.mount,
        side: params.side,
        rms: current.rms(),
        per_image_rms: per_image
            .into_iter()
            .map(|(s, n)| if n == 0 { 0.0 } else { (s / n as f64).sqrt() })
            .collect(),
        iterations,
        cost_history: history,
        excluded: current.behind,
    })
}

/// Generator for synthetic calibration sessions with known ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCalibration {
    pub board: CheckerboardSpec,
    pub images: usize,
    /// Gaussian pixel noise sigma.
    pub noise_px: f64,
    pub hand_eye: Pose,
    pub mount: Pose,
    /// Side length used to render corners; the dataset records `board.side`.
    pub true_side: f64,
    pub joint_center: JointVector,
    /// Half-width of the uniform joint sampling box, per joint.
    pub joint_spread: Vec<f64>,
    /// Minimum distance of every corner from the image border, pixels.
    pub margin: f64,
    pub seed: u64,
}

impl SyntheticCalibration {
    /// 15 views of an 8x6 board on the default instrument.
    pub fn standard(seed: u64) -> Self {
        let board = CheckerboardSpec::default();
        SyntheticCalibration {
            board,
            images: 15,
            noise_px: 0.5,
            hand_eye: KinematicChain::default_hand_eye(),
            mount: Pose::IDENTITY,
            true_side: board.side,
            joint_center: KinematicChain::default_reference_joints(),
            joint_spread: vec![0.12, 0.12, 0.015, 0.8, 0.35, 0.35, 0.8],
            margin: 8.0,
            seed,
        }
    }

    pub fn generate(&self, intrinsics: &CameraIntrinsics, chain: &KinematicChain) -> Result<CalibrationDataset> {
        self.board.validate()?;
        if self.joint_center.len() != chain.dof() || self.joint_spread.len() != chain.dof() {
            return Err(Error::invalid("joint center/spread length does not match the chain"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let noise = Normal::new(0.0, self.noise_px.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
        let mut images = Vec::with_capacity(self.images);
        let mut tries = 0;
        while images.len() < self.images {
            tries += 1;
            if tries > 10_000 * self.images.max(1) {
                return Err(Error::InsufficientData(
                    "could not sample views with the whole board in frame".into(),
                ));
            }
            let q: Vec<f64> = self
                .joint_center
                .as_slice()
                .iter()
                .zip(&self.joint_spread)
                .map(|(&c, &s)| if s > 0.0 { rng.random_range(c - s..=c + s) } else { c })
                .collect();
            let q = chain.clamp(&JointVector(q));
            let cam_from_board = self
                .hand_eye
                .compose(&chain.forward_kinematics(&q)?)
                .compose(&self.mount);
            let Some(corners) = self.view(&cam_from_board, intrinsics) else {
                continue;
            };
            let corners = corners
                .into_iter()
                .enumerate()
                .map(|(id, (u, v))| {
                    let (u, v) = if self.noise_px > 0.0 {
                        (u + noise.sample(&mut rng), v + noise.sample(&mut rng))
                    } else {
                        (u, v)
                    };
                    CornerObservation {
                        id,
                        u,
                        v,
                        visible: true,
                    }
                })
                .collect();
            images.push(CalibrationImage { joints: q, corners });
        }
        Ok(CalibrationDataset {
            board: self.board,
            images,
        })
    }

    /// Noiseless corner pixels when every corner is inside the margin and
    /// the board faces the camera within 60 degrees.
    fn view(&self, cam_from_board: &Pose, intr: &CameraIntrinsics) -> Option<Vec<(f64, f64)>> {
        let normal = cam_from_board.rotation.rotate(&Vec3::z());
        let ray = cam_from_board.translation.normalize();
        if normal.dot(&ray).abs() < 0.5 {
            return None;
        }
        let (w, h) = ((intr.width - 1) as f64, (intr.height - 1) as f64);
        (0..self.board.corner_count())
            .map(|i| {
                let pc = cam_from_board.transform_point(&self.board.corner(i, self.true_side));
                let (u, v) = intr.project(&pc).ok()?;
                let inside = u >= self.margin && v >= self.margin && u <= w - self.margin && v <= h - self.margin;
                inside.then_some((u, v))
            })
            .collect()
    }
}

/// Rotation matrix helper for tests and the gauge check.
pub fn rotation_of(p: &Pose) -> Matrix3<f64> {
    p.rotation.to_matrix()
}
