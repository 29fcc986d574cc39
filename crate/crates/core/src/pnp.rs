//! Perspective-n-point: camera pose from 3D-2D correspondences.
//!
//! Observed pixels are undistorted first, so both the linear initialisation
//! and the refinement work in the undistorted pixel domain. Coplanar point
//! sets (checkerboards) are initialised from a plane homography; general
//! 3D sets from the 12-parameter DLT. A Gauss-Newton refinement on the
//! reprojection error finishes the job.

use nalgebra::{DMatrix, Matrix3, Matrix3x4, Matrix6, Vector2, Vector3, Vector6};

use crate::camera::CameraIntrinsics;
use crate::error::{Error, Result};
use crate::se3::{skew, Pose, Quaternion, Vec3};

const MAX_ITERATIONS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct PnpSolution {
    /// Maps object coordinates into the camera frame.
    pub camera_from_object: Pose,
    /// RMS reprojection error per coordinate, undistorted pixels.
    pub rms: f64,
    pub iterations: usize,
}

/// Pose of the object in the camera frame (`camera_from_object`).
pub fn pnp_solve(object_points: &[Vec3], pixels: &[(f64, f64)], intrinsics: &CameraIntrinsics) -> Result<Pose> {
    pnp_solve_detailed(object_points, pixels, intrinsics).map(|s| s.camera_from_object)
}

pub fn pnp_solve_detailed(
    object_points: &[Vec3],
    pixels: &[(f64, f64)],
    intrinsics: &CameraIntrinsics,
) -> Result<PnpSolution> {
    if object_points.len() != pixels.len() {
        return Err(Error::invalid("object point and pixel counts differ"));
    }
    if object_points.len() < 6 {
        return Err(Error::RankDeficient(format!(
            "PnP needs at least 6 correspondences, got {}",
            object_points.len()
        )));
    }
    let normalized: Vec<Vector2<f64>> = pixels
        .iter()
        .map(|&(u, v)| {
            let (xd, yd) = intrinsics.pixel_to_normalized(u, v);
            intrinsics
                .undistort_normalized(xd, yd)
                .map(|(x, y)| Vector2::new(x, y))
        })
        .collect::<Result<_>>()?;

    let shape = point_spread(object_points);
    if shape.1 < 1e-9 * shape.0 {
        return Err(Error::RankDeficient("object points are collinear".into()));
    }
    let init = if shape.2 < 1e-6 * shape.0 {
        planar_init(object_points, &normalized)?
    } else {
        dlt_init(object_points, &normalized)?
    };
    refine(init, object_points, &normalized, intrinsics)
}

/// Singular values of the centred point cloud, descending, plus the basis.
fn principal_axes(points: &[Vec3]) -> (Vec3, [f64; 3], Matrix3<f64>) {
    let c = points.iter().sum::<Vec3>() / points.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - c;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = order.map(|i| eig.eigenvalues[i].max(0.0).sqrt());
    let mut basis = Matrix3::zeros();
    for (k, &i) in order.iter().enumerate() {
        basis.set_column(k, &eig.eigenvectors.column(i));
    }
    (c, vals, basis)
}

fn point_spread(points: &[Vec3]) -> (f64, f64, f64) {
    let (_, s, _) = principal_axes(points);
    (s[0], s[1], s[2])
}

/// Right singular vector of the smallest singular value.
fn null_vector(a: &DMatrix<f64>) -> Result<nalgebra::DVector<f64>> {
    let svd = a.clone().svd(false, true);
    let vt = svd
        .v_t
        .ok_or_else(|| Error::RankDeficient("SVD failed".into()))?;
    let (imin, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty");
    Ok(vt.row(imin).transpose())
}

/// Similarity transform that centres points and scales mean distance to sqrt(2).
fn normalizing_transform_2d(pts: &[Vector2<f64>]) -> Matrix3<f64> {
    let c = pts.iter().sum::<Vector2<f64>>() / pts.len() as f64;
    let mean = pts.iter().map(|p| (p - c).norm()).sum::<f64>() / pts.len() as f64;
    let s = if mean > 0.0 { 2f64.sqrt() / mean } else { 1.0 };
    Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0)
}

fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut d = Matrix3::identity();
        d[(2, 2)] = -1.0;
        r = u * d * vt;
    }
    r
}

fn planar_init(points: &[Vec3], obs: &[Vector2<f64>]) -> Result<Pose> {
    let (c, _, basis) = principal_axes(points);
    let e1: Vec3 = basis.column(0).into();
    let e2: Vec3 = basis.column(1).into();
    let n = e1.cross(&e2);
    let plane: Vec<Vector2<f64>> = points
        .iter()
        .map(|p| Vector2::new(e1.dot(&(p - c)), e2.dot(&(p - c))))
        .collect();

    let tp = normalizing_transform_2d(&plane);
    let ti = normalizing_transform_2d(obs);
    let mut a = DMatrix::zeros(2 * points.len(), 9);
    for (k, (p, o)) in plane.iter().zip(obs).enumerate() {
        let p = tp * Vector3::new(p.x, p.y, 1.0);
        let o = ti * Vector3::new(o.x, o.y, 1.0);
        let (x, y) = (o.x / o.z, o.y / o.z);
        let r0 = [p.x, p.y, p.z, 0.0, 0.0, 0.0, -x * p.x, -x * p.y, -x * p.z];
        let r1 = [0.0, 0.0, 0.0, p.x, p.y, p.z, -y * p.x, -y * p.y, -y * p.z];
        for j in 0..9 {
            a[(2 * k, j)] = r0[j];
            a[(2 * k + 1, j)] = r1[j];
        }
    }
    let h = null_vector(&a)?;
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let ti_inv = ti
        .try_inverse()
        .ok_or_else(|| Error::RankDeficient("degenerate image points".into()))?;
    let mut hm = ti_inv * hn * tp;

    // the plane origin (centroid) must be in front of the camera
    if hm[(2, 2)] < 0.0 {
        hm = -hm;
    }
    let h1: Vec3 = hm.column(0).into();
    let h2: Vec3 = hm.column(1).into();
    let h3: Vec3 = hm.column(2).into();
    let norm = 0.5 * (h1.norm() + h2.norm());
    if norm < 1e-12 {
        return Err(Error::RankDeficient("degenerate homography".into()));
    }
    let (r1, r2) = (h1 / norm, h2 / norm);
    let r = nearest_rotation(&Matrix3::from_columns(&[r1, r2, r1.cross(&r2)]));
    let cam_from_plane = Pose::new(Quaternion::from_matrix(&r), h3 / norm);

    // plane coordinates: p_plane = B^T (p - c), with B = [e1 e2 n]
    let bt = Matrix3::from_columns(&[e1, e2, n]).transpose();
    let plane_from_object = Pose::new(Quaternion::from_matrix(&bt), -(bt * c));
    Ok(cam_from_plane.compose(&plane_from_object))
}

fn dlt_init(points: &[Vec3], obs: &[Vector2<f64>]) -> Result<Pose> {
    let c = points.iter().sum::<Vec3>() / points.len() as f64;
    let mean = points.iter().map(|p| (p - c).norm()).sum::<f64>() / points.len() as f64;
    let s = 3f64.sqrt() / mean;
    let ti = normalizing_transform_2d(obs);
    let mut a = DMatrix::zeros(2 * points.len(), 12);
    for (k, (p, o)) in points.iter().zip(obs).enumerate() {
        let q = (p - c) * s;
        let x4 = [q.x, q.y, q.z, 1.0];
        let o = ti * Vector3::new(o.x, o.y, 1.0);
        for j in 0..4 {
            a[(2 * k, j)] = x4[j];
            a[(2 * k, 8 + j)] = -o.x * x4[j];
            a[(2 * k + 1, 4 + j)] = x4[j];
            a[(2 * k + 1, 8 + j)] = -o.y * x4[j];
        }
    }
    let v = null_vector(&a)?;
    let pn = Matrix3x4::from_row_slice(v.as_slice());
    let ti_inv = ti
        .try_inverse()
        .ok_or_else(|| Error::RankDeficient("degenerate image points".into()))?;
    // undo the object normalization: X_n = s (X - c)
    let mut to = nalgebra::Matrix4::identity() * s;
    to[(3, 3)] = 1.0;
    to.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-s * c));
    let mut p = ti_inv * pn * to;

    let m: Matrix3<f64> = p.fixed_view::<3, 3>(0, 0).into_owned();
    if m.determinant() < 0.0 {
        p = -p;
    }
    let m: Matrix3<f64> = p.fixed_view::<3, 3>(0, 0).into_owned();
    let sv = m.svd(false, false).singular_values;
    let scale = sv.mean();
    if scale < 1e-12 {
        return Err(Error::RankDeficient("degenerate DLT solution".into()));
    }
    let r = nearest_rotation(&m);
    let t: Vec3 = p.column(3) / scale;
    let pose = Pose::new(Quaternion::from_matrix(&r), t);
    if pose.transform_point(&c).z <= 0.0 {
        return Err(Error::RankDeficient("DLT placed the points behind the camera".into()));
    }
    Ok(pose)
}

fn residuals(pose: &Pose, points: &[Vec3], obs: &[Vector2<f64>], cam: &CameraIntrinsics) -> Option<Vec<f64>> {
    let mut r = Vec::with_capacity(2 * points.len());
    for (p, o) in points.iter().zip(obs) {
        let pc = pose.transform_point(p);
        if pc.z <= crate::camera::MIN_DEPTH {
            return None;
        }
        r.push(cam.fx * (pc.x / pc.z - o.x));
        r.push(cam.fy * (pc.y / pc.z - o.y));
    }
    Some(r)
}

fn cost(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

fn refine(init: Pose, points: &[Vec3], obs: &[Vector2<f64>], cam: &CameraIntrinsics) -> Result<PnpSolution> {
    let mut pose = init;
    let mut r = residuals(&pose, points, obs, cam)
        .ok_or(Error::NonConvergence { residual: f64::INFINITY })?;
    let mut c = cost(&r);
    let mut iterations = 0;
    for _ in 0..MAX_ITERATIONS {
        iterations += 1;
        let mut jtj = Matrix6::zeros();
        let mut jtr = Vector6::zeros();
        for (k, p) in points.iter().enumerate() {
            let pc = pose.transform_point(p);
            let iz = 1.0 / pc.z;
            let dproj = nalgebra::Matrix2x3::new(
                cam.fx * iz,
                0.0,
                -cam.fx * pc.x * iz * iz,
                0.0,
                cam.fy * iz,
                -cam.fy * pc.y * iz * iz,
            );
            let mut dp = nalgebra::Matrix3x6::zeros();
            dp.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
            dp.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(&pc)));
            let j = dproj * dp;
            let rk = Vector2::new(r[2 * k], r[2 * k + 1]);
            jtj += j.transpose() * j;
            jtr += j.transpose() * rk;
        }
        let Some(delta) = jtj.cholesky().map(|ch| -ch.solve(&jtr)) else {
            return Err(Error::RankDeficient("PnP normal equations are singular".into()));
        };
        let mut step = delta;
        let mut accepted = false;
        for _ in 0..20 {
            let cand = pose.left_perturb(&step);
            if let Some(rc) = residuals(&cand, points, obs, cam) {
                let cc = cost(&rc);
                if cc <= c {
                    pose = cand;
                    r = rc;
                    c = cc;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted || step.norm() < 1e-14 {
            break;
        }
    }
    let rms = (c / r.len() as f64).sqrt();
    if !rms.is_finite() {
        return Err(Error::NonConvergence { residual: rms });
    }
    Ok(PnpSolution {
        camera_from_object: pose,
        rms,
        iterations,
    })
}
