//! Serial-chain forward kinematics and damped least-squares inverse kinematics.
//!
//! A chain is an ordered list of links. Link `i` applies its joint motion
//! (rotation about, or translation along, `axis`) and then its fixed
//! `offset` to reach the next link frame:
//!
//! ```text
//! T_base_link[i] = T_base_link[i-1] * motion(q_i) * offset_i
//! ```

use nalgebra::{DMatrix, DVector, Matrix6, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::se3::{Pose, Quaternion, Vec3};

pub const MAX_LINKS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointKind {
    Revolute,
    Prismatic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Link {
    pub joint: JointKind,
    /// Joint axis in the link's input frame (normalized on validation).
    pub axis: Vec3,
    /// Fixed transform from the moved joint frame to the next link frame.
    #[serde(default)]
    pub offset: Pose,
    /// Radians (revolute) or meters (prismatic).
    pub lower: f64,
    pub upper: f64,
}

impl Link {
    fn motion(&self, q: f64) -> Pose {
        match self.joint {
            JointKind::Revolute => Pose::from_rotation(Quaternion::from_axis_angle(&self.axis, q)),
            JointKind::Prismatic => Pose::from_translation(self.axis * q),
        }
    }

    fn transform(&self, q: f64) -> Pose {
        self.motion(q).compose(&self.offset)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KinematicChain {
    pub links: Vec<Link>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JointVector(pub Vec<f64>);

impl JointVector {
    pub fn zeros(n: usize) -> Self {
        JointVector(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for JointVector {
    fn from(v: Vec<f64>) -> Self {
        JointVector(v)
    }
}

impl KinematicChain {
    pub fn new(mut links: Vec<Link>) -> Result<Self> {
        for l in &mut links {
            let n = l.axis.norm();
            if n > 0.0 {
                l.axis /= n;
            }
        }
        let chain = KinematicChain { links };
        chain.validate()?;
        Ok(chain)
    }

    pub fn validate(&self) -> Result<()> {
        if self.links.is_empty() || self.links.len() > MAX_LINKS {
            return Err(Error::invalid(format!(
                "chain must have 1..={MAX_LINKS} links, got {}",
                self.links.len()
            )));
        }
        for (i, l) in self.links.iter().enumerate() {
            if !(l.lower < l.upper) {
                return Err(Error::invalid(format!(
                    "link {i}: lower limit {} must be below upper limit {}",
                    l.lower, l.upper
                )));
            }
            if (l.axis.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("link {i}: axis must be unit length")));
            }
        }
        Ok(())
    }

    pub fn dof(&self) -> usize {
        self.links.len()
    }

    pub fn clamp(&self, j: &JointVector) -> JointVector {
        JointVector(
            self.links
                .iter()
                .zip(&j.0)
                .map(|(l, &q)| q.clamp(l.lower, l.upper))
                .collect(),
        )
    }

    pub fn within_limits(&self, j: &JointVector) -> bool {
        self.links
            .iter()
            .zip(&j.0)
            .all(|(l, &q)| q >= l.lower && q <= l.upper)
    }

    fn check_len(&self, j: &JointVector) -> Result<()> {
        if j.len() != self.dof() {
            return Err(Error::invalid(format!(
                "joint vector has {} entries, chain has {} links",
                j.len(),
                self.dof()
            )));
        }
        Ok(())
    }

    /// End-effector pose in the chain base frame.
    pub fn forward_kinematics(&self, j: &JointVector) -> Result<Pose> {
        self.check_len(j)?;
        Ok(self.fk_unchecked(&j.0))
    }

    fn fk_unchecked(&self, q: &[f64]) -> Pose {
        self.links
            .iter()
            .zip(q)
            .fold(Pose::IDENTITY, |acc, (l, &qi)| acc.compose(&l.transform(qi)))
    }

    /// Pose of every link frame in the base frame. The last entry equals
    /// [`forward_kinematics`](Self::forward_kinematics).
    pub fn link_poses(&self, j: &JointVector) -> Result<Vec<Pose>> {
        self.check_len(j)?;
        let mut out = Vec::with_capacity(self.dof());
        let mut acc = Pose::IDENTITY;
        for (l, &qi) in self.links.iter().zip(&j.0) {
            acc = acc.compose(&l.transform(qi));
            out.push(acc);
        }
        Ok(out)
    }

    /// Sum of fixed offset lengths plus the largest prismatic extension; an
    /// upper bound on the distance from the base origin to the end effector.
    pub fn reach(&self) -> f64 {
        self.links
            .iter()
            .map(|l| {
                let ext = match l.joint {
                    JointKind::Prismatic => l.lower.abs().max(l.upper.abs()),
                    JointKind::Revolute => 0.0,
                };
                l.offset.translation.norm() + ext
            })
            .sum()
    }

    /// The default 7-DOF instrument arm shipped with the repository.
    ///
    /// Remote-centre style: two revolute joints about x and y at the base,
    /// prismatic insertion along z, shaft roll, a two-axis wrist and a final
    /// roll. Lengths are in meters.
    pub fn default_instrument() -> Self {
        let rev = |axis: Vec3, offset: Vec3, lim: f64| Link {
            joint: JointKind::Revolute,
            axis,
            offset: Pose::from_translation(offset),
            lower: -lim,
            upper: lim,
        };
        let deg = f64::to_radians;
        KinematicChain::new(vec![
            rev(Vec3::x(), Vec3::zeros(), deg(60.0)),
            rev(Vec3::y(), Vec3::zeros(), deg(60.0)),
            Link {
                joint: JointKind::Prismatic,
                axis: Vec3::z(),
                offset: Pose::IDENTITY,
                lower: 0.05,
                upper: 0.22,
            },
            rev(Vec3::z(), Vec3::zeros(), deg(170.0)),
            rev(Vec3::x(), Vec3::new(0.0, 0.0, 0.009), deg(80.0)),
            rev(Vec3::y(), Vec3::new(0.0, 0.0, 0.009), deg(80.0)),
            rev(Vec3::z(), Vec3::new(0.0, 0.0, 0.006), deg(170.0)),
        ])
        .expect("default chain is valid")
    }

    /// Left-camera hand-eye (`camera_from_base`) for the default chain: the
    /// camera sits 6 cm off the insertion axis and looks at the wrist region
    /// from about 13 cm.
    pub fn default_hand_eye() -> Pose {
        Pose::look_at(
            &Vec3::new(-0.06, 0.0, 0.02),
            &Vec3::new(-0.02, -0.014, 0.145),
            &Vec3::new(0.0, -1.0, 0.0),
        )
        .expect("default camera placement is valid")
    }

    /// Reference configuration for the default chain.
    pub fn default_reference_joints() -> JointVector {
        JointVector(vec![0.1, -0.15, 0.14, 0.3, 0.2, -0.25, 0.4])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    pub id: u32,
    pub link: usize,
    /// Position in the link frame, meters.
    pub point: Vec3,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureAtlas {
    pub features: Vec<Feature>,
}

impl FeatureAtlas {
    pub fn new(features: Vec<Feature>, chain: &KinematicChain) -> Result<Self> {
        let atlas = FeatureAtlas { features };
        atlas.validate(chain)?;
        Ok(atlas)
    }

    pub fn validate(&self, chain: &KinematicChain) -> Result<()> {
        for f in &self.features {
            if f.link >= chain.dof() {
                return Err(Error::invalid(format!(
                    "feature {} references link {} but chain has {} links",
                    f.id,
                    f.link,
                    chain.dof()
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, id: u32) -> Option<&Feature> {
        self.features.iter().find(|f| f.id == id)
    }

    /// Base-frame positions of all features for a joint configuration.
    pub fn base_points(&self, chain: &KinematicChain, j: &JointVector) -> Result<Vec<Vec3>> {
        let poses = chain.link_poses(j)?;
        Ok(self
            .features
            .iter()
            .map(|f| poses[f.link].transform_point(&f.point))
            .collect())
    }

    /// Twelve markers for the default instrument: six on the shaft, two on
    /// each wrist link and two at the jaw tips.
    pub fn default_instrument() -> Self {
        let r = 0.004;
        let mut features = Vec::new();
        let mut id = 0;
        let mut push = |link: usize, p: Vec3| {
            features.push(Feature { id, link, point: p });
            id += 1;
        };
        for z in [-0.006, -0.018, -0.032] {
            push(3, Vec3::new(r, 0.0, z));
            push(3, Vec3::new(0.0, -r, z - 0.003));
        }
        push(4, Vec3::new(0.0, 0.003, -0.004));
        push(4, Vec3::new(-0.003, 0.0, -0.002));
        push(5, Vec3::new(0.0025, 0.0, -0.003));
        push(5, Vec3::new(0.0, -0.0025, -0.001));
        push(6, Vec3::new(0.002, 0.0, 0.008));
        push(6, Vec3::new(-0.002, 0.0, 0.010));
        FeatureAtlas { features }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IkOptions {
    /// Initial damping factor lambda (step uses lambda^2).
    pub damping: f64,
    pub max_iterations: usize,
    /// Meters.
    pub position_tolerance: f64,
    /// Radians.
    pub orientation_tolerance: f64,
    /// Meters per radian used to weigh orientation error against position.
    pub orientation_weight: f64,
    /// Central-difference step for the numerical Jacobian.
    pub fd_step: f64,
}

impl Default for IkOptions {
    fn default() -> Self {
        IkOptions {
            damping: 0.01,
            max_iterations: 200,
            position_tolerance: 1e-5,
            orientation_tolerance: 1e-4,
            orientation_weight: 0.1,
            fd_step: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IkStatus {
    Converged,
    /// Best effort; the joints are still usable for rendering.
    Unreached,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IkSolution {
    pub joints: JointVector,
    pub status: IkStatus,
    pub iterations: usize,
    pub position_error: f64,
    pub orientation_error: f64,
    /// Weighted residual norm after every accepted iterate, starting with the seed.
    pub residual_trace: Vec<f64>,
}

impl IkSolution {
    pub fn converged(&self) -> bool {
        self.status == IkStatus::Converged
    }
}

fn pose_error(target: &Pose, current: &Pose) -> Vector6<f64> {
    let dp = target.translation - current.translation;
    let dr = (target.rotation * current.rotation.inverse()).to_rotation_vector();
    Vector6::new(dp.x, dp.y, dp.z, dr.x, dr.y, dr.z)
}

impl KinematicChain {
    /// Spatial 6xN Jacobian `[dp; dtheta]` by central differences.
    pub fn numerical_jacobian(&self, j: &JointVector, h: f64) -> Result<DMatrix<f64>> {
        self.check_len(j)?;
        let n = self.dof();
        let mut jac = DMatrix::zeros(6, n);
        let mut q = j.0.clone();
        for k in 0..n {
            let q0 = q[k];
            q[k] = q0 + h;
            let plus = self.fk_unchecked(&q);
            q[k] = q0 - h;
            let minus = self.fk_unchecked(&q);
            q[k] = q0;
            let col = pose_error(&plus, &minus) / (2.0 * h);
            jac.set_column(k, &DVector::from_column_slice(col.as_slice()));
        }
        Ok(jac)
    }

    /// Damped least-squares IK toward `target`, starting at `seed`.
    ///
    /// Steps that do not reduce the weighted residual are rejected and the
    /// damping is raised, so `residual_trace` is non-increasing. Joint
    /// limits are enforced by clamping each step.
    pub fn inverse_kinematics(
        &self,
        target: &Pose,
        seed: &JointVector,
        opts: &IkOptions,
    ) -> Result<IkSolution> {
        self.check_len(seed)?;
        let n = self.dof();
        let w = opts.orientation_weight;
        let weighted = |e: &Vector6<f64>| {
            Vector6::new(e[0], e[1], e[2], w * e[3], w * e[4], w * e[5])
        };
        let eval = |q: &[f64]| {
            let e = pose_error(target, &self.fk_unchecked(q));
            let pe = e.fixed_rows::<3>(0).norm();
            let oe = e.fixed_rows::<3>(3).norm();
            (e, pe, oe, weighted(&e).norm())
        };

        let mut q = self.clamp(seed).0;
        let (mut e, mut pe, mut oe, mut cost) = eval(&q);
        let mut trace = vec![cost];
        let mut lambda = opts.damping;
        let mut iterations = 0;
        let done = |pe: f64, oe: f64| pe <= opts.position_tolerance && oe <= opts.orientation_tolerance;

        while !done(pe, oe) && iterations < opts.max_iterations {
            iterations += 1;
            let mut jac = self.numerical_jacobian(&JointVector(q.clone()), opts.fd_step)?;
            for r in 3..6 {
                jac.row_mut(r).scale_mut(w);
            }
            let ew = weighted(&e);
            let jjt: Matrix6<f64> = (&jac * jac.transpose()).fixed_view::<6, 6>(0, 0).into_owned();
            let a = jjt + Matrix6::identity() * (lambda * lambda);
            let Some(y) = a.cholesky().map(|c| c.solve(&ew)) else {
                lambda *= 4.0;
                continue;
            };
            let dq = jac.transpose() * DVector::from_column_slice(y.as_slice());
            let cand: Vec<f64> = (0..n)
                .map(|k| (q[k] + dq[k]).clamp(self.links[k].lower, self.links[k].upper))
                .collect();
            let (ce, cpe, coe, ccost) = eval(&cand);
            if ccost < cost {
                q = cand;
                (e, pe, oe, cost) = (ce, cpe, coe, ccost);
                trace.push(cost);
                lambda = (lambda * 0.5).max(opts.damping);
            } else {
                lambda *= 4.0;
                if lambda > 1e4 {
                    break;
                }
            }
        }

        Ok(IkSolution {
            joints: JointVector(q),
            status: if done(pe, oe) {
                IkStatus::Converged
            } else {
                IkStatus::Unreached
            },
            iterations,
            position_error: pe,
            orientation_error: oe,
            residual_trace: trace,
        })
    }
}
