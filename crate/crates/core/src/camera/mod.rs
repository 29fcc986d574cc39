//! Pinhole + Brown-Conrady camera model, inverse-distortion remap tables and
//! RGBA frames.

mod frame;
mod remap;

pub use frame::Frame;
pub use remap::{build_distort_remap, remap, RemapTable};

use nalgebra::{Matrix2, Matrix3, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::se3::{Pose, Vec3};

/// Minimum depth (m) for a point to be projectable.
pub const MIN_DEPTH: f64 = 1e-6;

const UNDISTORT_MAX_ITERATIONS: usize = 50;
const UNDISTORT_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    /// Focal lengths, pixels.
    pub fx: f64,
    pub fy: f64,
    /// Principal point, pixels.
    pub cx: f64,
    pub cy: f64,
    #[serde(default)]
    pub k1: f64,
    #[serde(default)]
    pub k2: f64,
    #[serde(default)]
    pub k3: f64,
    #[serde(default)]
    pub p1: f64,
    #[serde(default)]
    pub p2: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        CameraIntrinsics {
            fx: 800.0,
            fy: 800.0,
            cx: 320.0,
            cy: 240.0,
            k1: -0.12,
            k2: 0.02,
            k3: 0.0,
            p1: 5e-4,
            p2: -3e-4,
            width: 640,
            height: 480,
        }
    }
}

impl CameraIntrinsics {
    pub fn pinhole(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Self {
        CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            k1: 0.0,
            k2: 0.0,
            k3: 0.0,
            p1: 0.0,
            p2: 0.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64 && self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(Error::invalid("principal point must lie inside the image"));
        }
        Ok(())
    }

    /// Same camera without distortion.
    pub fn without_distortion(&self) -> Self {
        Self::pinhole(self.fx, self.fy, self.cx, self.cy, self.width, self.height)
    }

    pub fn has_distortion(&self) -> bool {
        [self.k1, self.k2, self.k3, self.p1, self.p2]
            .iter()
            .any(|&c| c != 0.0)
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Brown-Conrady forward model on normalized coordinates:
    ///
    /// ```text
    /// r2  = x^2 + y^2
    /// rad = 1 + k1 r2 + k2 r2^2 + k3 r2^3
    /// x_d = x rad + 2 p1 x y + p2 (r2 + 2 x^2)
    /// y_d = y rad + p1 (r2 + 2 y^2) + 2 p2 x y
    /// ```
    pub fn distort_normalized(&self, x: f64, y: f64) -> (f64, f64) {
        let r2 = x * x + y * y;
        let rad = 1.0 + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3));
        let xd = x * rad + 2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x);
        let yd = y * rad + self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y;
        (xd, yd)
    }

    /// Jacobian of [`distort_normalized`](Self::distort_normalized) w.r.t. `(x, y)`.
    pub fn distortion_jacobian(&self, x: f64, y: f64) -> Matrix2<f64> {
        let r2 = x * x + y * y;
        let rad = 1.0 + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3));
        let g = self.k1 + r2 * (2.0 * self.k2 + 3.0 * self.k3 * r2);
        let dxx = rad + 2.0 * x * x * g + 2.0 * self.p1 * y + 6.0 * self.p2 * x;
        let dxy = 2.0 * x * y * g + 2.0 * self.p1 * x + 2.0 * self.p2 * y;
        let dyy = rad + 2.0 * y * y * g + 6.0 * self.p1 * y + 2.0 * self.p2 * x;
        Matrix2::new(dxx, dxy, dxy, dyy)
    }

    /// Inverts the distortion model with Newton iterations starting at the
    /// distorted point. Fails when the iteration leaves the monotone region.
    pub fn undistort_normalized(&self, xd: f64, yd: f64) -> Result<(f64, f64)> {
        let target = Vector2::new(xd, yd);
        let mut p = target;
        for it in 0..=UNDISTORT_MAX_ITERATIONS {
            let (fx, fy) = self.distort_normalized(p.x, p.y);
            let r = Vector2::new(fx, fy) - target;
            if r.norm() < UNDISTORT_TOLERANCE {
                return Ok((p.x, p.y));
            }
            if it == UNDISTORT_MAX_ITERATIONS {
                break;
            }
            let j = self.distortion_jacobian(p.x, p.y);
            if j.determinant() <= 0.0 {
                return Err(Error::OutOfDomain { iterations: it });
            }
            let Some(inv) = j.try_inverse() else {
                return Err(Error::OutOfDomain { iterations: it });
            };
            p -= inv * r;
            if !p.x.is_finite() || !p.y.is_finite() {
                return Err(Error::OutOfDomain { iterations: it });
            }
        }
        Err(Error::OutOfDomain {
            iterations: UNDISTORT_MAX_ITERATIONS,
        })
    }

    pub fn normalized_to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        (self.fx * x + self.cx, self.fy * y + self.cy)
    }

    pub fn pixel_to_normalized(&self, u: f64, v: f64) -> (f64, f64) {
        ((u - self.cx) / self.fx, (v - self.cy) / self.fy)
    }

    /// Full projection of a camera-frame point to a (distorted) pixel.
    pub fn project(&self, p: &Vec3) -> Result<(f64, f64)> {
        if p.z <= MIN_DEPTH {
            return Err(Error::BehindCamera { z: p.z });
        }
        let (xd, yd) = self.distort_normalized(p.x / p.z, p.y / p.z);
        Ok(self.normalized_to_pixel(xd, yd))
    }

    /// Projection ignoring distortion.
    pub fn project_pinhole(&self, p: &Vec3) -> Result<(f64, f64)> {
        if p.z <= MIN_DEPTH {
            return Err(Error::BehindCamera { z: p.z });
        }
        Ok(self.normalized_to_pixel(p.x / p.z, p.y / p.z))
    }

    /// Pixel Jacobian of [`project`](Self::project) w.r.t. the camera-frame point.
    pub fn projection_jacobian(&self, p: &Vec3) -> nalgebra::Matrix2x3<f64> {
        let iz = 1.0 / p.z;
        let (x, y) = (p.x * iz, p.y * iz);
        let dn = nalgebra::Matrix2x3::new(iz, 0.0, -x * iz, 0.0, iz, -y * iz);
        let dd = self.distortion_jacobian(x, y);
        let k = Matrix2::new(self.fx, 0.0, 0.0, self.fy);
        k * dd * dn
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StereoRig {
    pub left: CameraIntrinsics,
    pub right: CameraIntrinsics,
    /// Maps left-camera coordinates into right-camera coordinates.
    pub right_from_left: Pose,
}

impl Default for StereoRig {
    fn default() -> Self {
        // 5 mm horizontal baseline: a point at x in the left frame sits at
        // x - 0.005 in the right frame.
        StereoRig {
            left: CameraIntrinsics::default(),
            right: CameraIntrinsics::default(),
            right_from_left: Pose::from_translation(Vec3::new(-0.005, 0.0, 0.0)),
        }
    }
}

impl StereoRig {
    pub fn validate(&self) -> Result<()> {
        self.left.validate()?;
        self.right.validate()?;
        if !self.right_from_left.rotation.is_unit() {
            return Err(Error::invalid("stereo baseline rotation must be a unit quaternion"));
        }
        Ok(())
    }
}
