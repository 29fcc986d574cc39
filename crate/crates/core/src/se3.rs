//! Rigid-body primitives: unit quaternions, poses, and the pose blending
//! filter used to smooth hand-eye corrections.
//!
//! Conventions:
//! - Quaternions are Hamilton, stored `(w, x, y, z)`.
//! - `Pose` maps points from its source frame into its target frame:
//!   `p_target = R * p_source + t`. `a.compose(&b)` applies `b` first.
//! - Roll/pitch/yaw are Z-Y-X Tait-Bryan angles: `R = Rz(yaw) * Ry(pitch) * Rx(roll)`.

use std::f64::consts::PI;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Tolerance used to decide whether an input quaternion is "unit".
const UNIT_TOLERANCE: f64 = 1e-6;
/// Below this half-angle the slerp weights are replaced by a linear blend.
const SLERP_LINEAR_THRESHOLD: f64 = 1e-7;
/// Pitch distance from +-pi/2 at which roll is pinned to zero.
const GIMBAL_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for Quaternion {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Builds a unit quaternion from raw components, normalizing them.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        Quaternion { w, x, y, z }.normalized()
    }

    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let n = axis.norm();
        if n < 1e-15 {
            return Self::IDENTITY;
        }
        Self::from_rotation_vector(&(axis / n * angle))
    }

    pub fn rx(angle: f64) -> Self {
        Self::from_axis_angle(&Vec3::x(), angle)
    }

    pub fn ry(angle: f64) -> Self {
        Self::from_axis_angle(&Vec3::y(), angle)
    }

    pub fn rz(angle: f64) -> Self {
        Self::from_axis_angle(&Vec3::z(), angle)
    }

    /// Exponential map: rotation vector (axis * angle, radians) to quaternion.
    pub fn from_rotation_vector(v: &Vec3) -> Self {
        let theta = v.norm();
        if theta < 1e-12 {
            // second-order accurate near zero
            let q = Quaternion {
                w: 1.0 - theta * theta / 8.0,
                x: 0.5 * v.x,
                y: 0.5 * v.y,
                z: 0.5 * v.z,
            };
            return q.normalized().unwrap_or(Self::IDENTITY);
        }
        let half = 0.5 * theta;
        let s = half.sin() / theta;
        Quaternion {
            w: half.cos(),
            x: v.x * s,
            y: v.y * s,
            z: v.z * s,
        }
    }

    /// Logarithm map onto the shorter arc; the angle is in `[0, pi]`.
    pub fn to_rotation_vector(&self) -> Vec3 {
        let q = if self.w < 0.0 { -*self } else { *self };
        let v = Vec3::new(q.x, q.y, q.z);
        let s = v.norm();
        if s < 1e-12 {
            return 2.0 * v;
        }
        let angle = 2.0 * s.atan2(q.w);
        v * (angle / s)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dot(&self, other: &Quaternion) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_TOLERANCE
    }

    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm();
        if !n.is_finite() || n < 1e-12 {
            return Err(Error::invalid(format!(
                "cannot normalize quaternion with norm {n}"
            )));
        }
        Ok(Quaternion {
            w: self.w / n,
            x: self.x / n,
            y: self.y / n,
            z: self.z / n,
        })
    }

    pub fn conjugate(&self) -> Self {
        Quaternion {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    /// Inverse of a unit quaternion.
    pub fn inverse(&self) -> Self {
        self.conjugate()
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        // v' = v + 2w (u x v) + 2 u x (u x v)
        let u = Vec3::new(self.x, self.y, self.z);
        let uv = u.cross(v);
        v + 2.0 * self.w * uv + 2.0 * u.cross(&uv)
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Converts a rotation matrix (assumed orthonormal) to a quaternion.
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        let q = if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            Quaternion {
                w: 0.25 * s,
                x: (m[(2, 1)] - m[(1, 2)]) / s,
                y: (m[(0, 2)] - m[(2, 0)]) / s,
                z: (m[(1, 0)] - m[(0, 1)]) / s,
            }
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            Quaternion {
                w: (m[(2, 1)] - m[(1, 2)]) / s,
                x: 0.25 * s,
                y: (m[(0, 1)] + m[(1, 0)]) / s,
                z: (m[(0, 2)] + m[(2, 0)]) / s,
            }
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            Quaternion {
                w: (m[(0, 2)] - m[(2, 0)]) / s,
                x: (m[(0, 1)] + m[(1, 0)]) / s,
                y: 0.25 * s,
                z: (m[(1, 2)] + m[(2, 1)]) / s,
            }
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            Quaternion {
                w: (m[(1, 0)] - m[(0, 1)]) / s,
                x: (m[(0, 2)] + m[(2, 0)]) / s,
                y: (m[(1, 2)] + m[(2, 1)]) / s,
                z: 0.25 * s,
            }
        };
        q.normalized().unwrap_or(Self::IDENTITY)
    }

    /// Equality as rotations: `q` and `-q` are the same rotation.
    pub fn rotation_equals(&self, other: &Quaternion, tol: f64) -> bool {
        rotation_geodesic(self, other) <= tol
    }
}

impl std::ops::Neg for Quaternion {
    type Output = Quaternion;
    fn neg(self) -> Quaternion {
        Quaternion {
            w: -self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }
}

impl Mul for Quaternion {
    type Output = Quaternion;
    fn mul(self, b: Quaternion) -> Quaternion {
        let a = self;
        Quaternion {
            w: a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            x: a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            y: a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            z: a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        }
    }
}

/// Rotation angle of `q1^-1 * q2`, in `[0, pi]`.
pub fn rotation_geodesic(q1: &Quaternion, q2: &Quaternion) -> f64 {
    let d = q1.conjugate() * *q2;
    let v = (d.x * d.x + d.y * d.y + d.z * d.z).sqrt();
    2.0 * v.atan2(d.w.abs())
}

/// Spherical blend of `q_prev` toward `q_new` by fraction `a`.
///
/// Uses the quaternion dot angle `omega = acos(q_prev . q_new)` directly:
///
/// ```text
/// q = sin((1 - a) omega) / sin(omega) * q_prev + sin(a omega) / sin(omega) * q_new
/// ```
///
/// `q_new` is negated first when the dot product is negative so the blend
/// follows the shorter arc. Below `omega = 1e-7` the normalized linear blend
/// is returned instead.
pub fn slerp_blend(q_prev: &Quaternion, q_new: &Quaternion, a: f64) -> Result<Quaternion> {
    if !q_prev.is_unit() || !q_new.is_unit() {
        return Err(Error::invalid("slerp_blend requires unit quaternions"));
    }
    if !a.is_finite() {
        return Err(Error::invalid("slerp_blend coefficient must be finite"));
    }
    let mut target = *q_new;
    let mut dot = q_prev.dot(&target);
    if dot < 0.0 {
        target = -target;
        dot = -dot;
    }
    let omega = dot.min(1.0).acos();
    let (wp, wn) = if omega < SLERP_LINEAR_THRESHOLD {
        (1.0 - a, a)
    } else {
        let s = omega.sin();
        (((1.0 - a) * omega).sin() / s, (a * omega).sin() / s)
    };
    Quaternion {
        w: wp * q_prev.w + wn * target.w,
        x: wp * q_prev.x + wn * target.x,
        y: wp * q_prev.y + wn * target.y,
        z: wp * q_prev.z + wn * target.z,
    }
    .normalized()
}

/// First-order IIR step on a position: `(1 - a) * p_prev + a * p_new`.
pub fn translation_blend(p_prev: &Vec3, p_new: &Vec3, a: f64) -> Vec3 {
    (1.0 - a) * p_prev + a * p_new
}

/// Z-Y-X Tait-Bryan angles in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Rpy {
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
    /// Set when pitch is within 1e-6 rad of +-pi/2; roll is then reported as 0.
    pub gimbal_lock: bool,
}

impl Rpy {
    pub fn as_array(&self) -> [f64; 3] {
        [self.roll, self.pitch, self.yaw]
    }
}

pub fn to_rpy(q: &Quaternion) -> Rpy {
    let m = q.to_matrix();
    let pitch = (-m[(2, 0)]).atan2((m[(2, 1)].powi(2) + m[(2, 2)].powi(2)).sqrt());
    if (PI / 2.0 - pitch.abs()) < GIMBAL_TOLERANCE {
        let yaw = (-m[(0, 1)]).atan2(m[(1, 1)]);
        return Rpy {
            roll: 0.0,
            pitch,
            yaw,
            gimbal_lock: true,
        };
    }
    Rpy {
        roll: m[(2, 1)].atan2(m[(2, 2)]),
        pitch,
        yaw: m[(1, 0)].atan2(m[(0, 0)]),
        gimbal_lock: false,
    }
}

pub fn from_rpy(roll: f64, pitch: f64, yaw: f64) -> Quaternion {
    Quaternion::rz(yaw) * Quaternion::ry(pitch) * Quaternion::rx(roll)
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pose {
    pub rotation: Quaternion,
    pub translation: Vec3,
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        rotation: Quaternion::IDENTITY,
        translation: Vector3::new(0.0, 0.0, 0.0),
    };

    pub fn new(rotation: Quaternion, translation: Vec3) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Pose::new(Quaternion::IDENTITY, t)
    }

    pub fn from_rotation(q: Quaternion) -> Self {
        Pose::new(q, Vec3::zeros())
    }

    /// `self * other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: (self.rotation * other.rotation)
                .normalized()
                .unwrap_or(Quaternion::IDENTITY),
            translation: self.rotation.rotate(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let r = self.rotation.inverse();
        Pose {
            rotation: r,
            translation: -r.rotate(&self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.rotate(p) + self.translation
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation.to_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Pose {
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        Pose::new(
            Quaternion::from_matrix(&r),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    /// Left-applies a small correction `delta = [translation; rotation vector]`:
    /// the result is `Pose(exp(w), v) * self`.
    pub fn left_perturb(&self, delta: &Vector6<f64>) -> Pose {
        let corr = Pose::new(
            Quaternion::from_rotation_vector(&Vec3::new(delta[3], delta[4], delta[5])),
            Vec3::new(delta[0], delta[1], delta[2]),
        );
        corr.compose(self)
    }

    /// Camera-from-world transform for a camera at `eye` looking at `target`
    /// (z forward, x right, y down). `up` is a rough world up direction.
    pub fn look_at(eye: &Vec3, target: &Vec3, up: &Vec3) -> Result<Pose> {
        let z = target - eye;
        let x = z.cross(up);
        if z.norm() < 1e-12 || x.norm() < 1e-12 {
            return Err(Error::invalid("look_at: degenerate eye/target/up"));
        }
        let z = z.normalize();
        let x = x.normalize();
        let y = z.cross(&x);
        let world_from_cam = Pose::new(
            Quaternion::from_matrix(&Matrix3::from_columns(&[x, y, z])),
            *eye,
        );
        Ok(world_from_cam.inverse())
    }

    /// Translation distance (m) and rotation geodesic (rad) between two poses.
    pub fn distance(&self, other: &Pose) -> (f64, f64) {
        (
            (self.translation - other.translation).norm(),
            rotation_geodesic(&self.rotation, &other.rotation),
        )
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl Mul<&Pose> for &Pose {
    type Output = Pose;
    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

/// Coefficient of the hand-eye output smoother.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmootherParams {
    pub a: f64,
}

impl Default for SmootherParams {
    fn default() -> Self {
        SmootherParams { a: 0.8 }
    }
}

impl SmootherParams {
    pub fn new(a: f64) -> Result<Self> {
        let p = SmootherParams { a };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.a <= 1.0) {
            return Err(Error::invalid(format!(
                "smoother coefficient must lie in (0, 1], got {}",
                self.a
            )));
        }
        Ok(())
    }
}

/// Skew-symmetric cross-product matrix.
pub fn skew(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}
