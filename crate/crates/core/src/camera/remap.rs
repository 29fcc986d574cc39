//! Distortion remap tables.
//!
//! A [`RemapTable`] answers, for every pixel of the displayed (distorted)
//! image, which location of the rendered pinhole image it shows. The map is
//! split into a column map and a row map, as GPU remap shaders expect.
//!
//! The forward distortion has no closed-form inverse, so the table is built
//! from the discretized forward map: the rendered image is covered by a grid
//! of nodes, each node is pushed through the distortion model, and every
//! displayed pixel that falls inside a distorted grid cell is assigned the
//! rendered-image location obtained by inverting that cell's bilinear
//! interpolant.

use super::{CameraIntrinsics, Frame};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RemapTable {
    /// Source column per destination pixel; NaN marks "no preimage".
    pub map_x: Vec<f32>,
    /// Source row per destination pixel; NaN marks "no preimage".
    pub map_y: Vec<f32>,
    pub width: u32,
    pub height: u32,
}

impl RemapTable {
    pub const SENTINEL: f32 = f32::NAN;

    pub fn identity(width: u32, height: u32) -> Self {
        let n = width as usize * height as usize;
        let mut map_x = Vec::with_capacity(n);
        let mut map_y = Vec::with_capacity(n);
        for y in 0..height {
            for x in 0..width {
                map_x.push(x as f32);
                map_y.push(y as f32);
            }
        }
        RemapTable {
            map_x,
            map_y,
            width,
            height,
        }
    }

    /// Table built from a per-pixel function returning the source location.
    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> Option<(f32, f32)>) -> Self {
        let n = width as usize * height as usize;
        let mut map_x = Vec::with_capacity(n);
        let mut map_y = Vec::with_capacity(n);
        for y in 0..height {
            for x in 0..width {
                let (sx, sy) = f(x, y).unwrap_or((Self::SENTINEL, Self::SENTINEL));
                map_x.push(sx);
                map_y.push(sy);
            }
        }
        RemapTable {
            map_x,
            map_y,
            width,
            height,
        }
    }

    pub fn source(&self, x: u32, y: u32) -> Option<(f32, f32)> {
        let i = y as usize * self.width as usize + x as usize;
        let (sx, sy) = (self.map_x[i], self.map_y[i]);
        (!sx.is_nan() && !sy.is_nan()).then_some((sx, sy))
    }

    pub fn sentinel_count(&self) -> usize {
        self.map_x.iter().filter(|v| v.is_nan()).count()
    }
}

/// Builds the table that applies `intrinsics`' lens distortion to a pinhole
/// rendering of the same size.
pub fn build_distort_remap(intrinsics: &CameraIntrinsics, grid_step: u32) -> Result<RemapTable> {
    if grid_step < 1 {
        return Err(Error::invalid("grid_step must be at least 1 pixel"));
    }
    if !intrinsics.has_distortion() {
        return Ok(RemapTable::identity(intrinsics.width, intrinsics.height));
    }
    Ok(invert_discretized(intrinsics, grid_step))
}

/// Distorted pixel position of a rendered (undistorted) pixel.
fn forward(intr: &CameraIntrinsics, u: f64, v: f64) -> (f64, f64) {
    let (x, y) = intr.pixel_to_normalized(u, v);
    let (xd, yd) = intr.distort_normalized(x, y);
    intr.normalized_to_pixel(xd, yd)
}

/// Solves `bilinear(corners; a, b) = target` for `(a, b)` by Newton steps.
fn inverse_bilinear(c: &[(f64, f64); 4], t: (f64, f64)) -> Option<(f64, f64)> {
    let [c00, c10, c01, c11] = *c;
    let (mut a, mut b) = (0.5, 0.5);
    for _ in 0..10 {
        let px = (1.0 - a) * (1.0 - b) * c00.0 + a * (1.0 - b) * c10.0 + (1.0 - a) * b * c01.0 + a * b * c11.0;
        let py = (1.0 - a) * (1.0 - b) * c00.1 + a * (1.0 - b) * c10.1 + (1.0 - a) * b * c01.1 + a * b * c11.1;
        let (rx, ry) = (px - t.0, py - t.1);
        if rx.abs() < 1e-9 && ry.abs() < 1e-9 {
            break;
        }
        let dax = (1.0 - b) * (c10.0 - c00.0) + b * (c11.0 - c01.0);
        let day = (1.0 - b) * (c10.1 - c00.1) + b * (c11.1 - c01.1);
        let dbx = (1.0 - a) * (c01.0 - c00.0) + a * (c11.0 - c10.0);
        let dby = (1.0 - a) * (c01.1 - c00.1) + a * (c11.1 - c10.1);
        let det = dax * dby - dbx * day;
        if det.abs() < 1e-12 {
            return None;
        }
        a -= (dby * rx - dbx * ry) / det;
        b -= (-day * rx + dax * ry) / det;
    }
    const EPS: f64 = 1e-6;
    ((-EPS..=1.0 + EPS).contains(&a) && (-EPS..=1.0 + EPS).contains(&b)).then_some((a, b))
}

fn invert_discretized(intr: &CameraIntrinsics, step: u32) -> RemapTable {
    let (w, h) = (intr.width, intr.height);
    let step_f = step as f64;
    let nx = ((w - 1) as f64 / step_f).ceil() as usize + 1;
    let ny = ((h - 1) as f64 / step_f).ceil() as usize + 1;

    // discretized forward map on grid nodes
    let mut nodes = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            nodes.push(forward(intr, i as f64 * step_f, j as f64 * step_f));
        }
    }

    let n = w as usize * h as usize;
    let mut map_x = vec![RemapTable::SENTINEL; n];
    let mut map_y = vec![RemapTable::SENTINEL; n];
    let (max_x, max_y) = ((w - 1) as f64, (h - 1) as f64);

    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            let corners = [
                nodes[j * nx + i],
                nodes[j * nx + i + 1],
                nodes[(j + 1) * nx + i],
                nodes[(j + 1) * nx + i + 1],
            ];
            let (mut lo_x, mut hi_x, mut lo_y, mut hi_y) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
            for c in &corners {
                lo_x = lo_x.min(c.0);
                hi_x = hi_x.max(c.0);
                lo_y = lo_y.min(c.1);
                hi_y = hi_y.max(c.1);
            }
            let x0 = lo_x.ceil().max(0.0) as i64;
            let x1 = hi_x.floor().min(max_x) as i64;
            let y0 = lo_y.ceil().max(0.0) as i64;
            let y1 = hi_y.floor().min(max_y) as i64;
            for ty in y0..=y1 {
                for tx in x0..=x1 {
                    let idx = ty as usize * w as usize + tx as usize;
                    if !map_x[idx].is_nan() {
                        continue;
                    }
                    let Some((a, b)) = inverse_bilinear(&corners, (tx as f64, ty as f64)) else {
                        continue;
                    };
                    let sx = (i as f64 + a) * step_f;
                    let sy = (j as f64 + b) * step_f;
                    if (0.0..=max_x).contains(&sx) && (0.0..=max_y).contains(&sy) {
                        map_x[idx] = sx as f32;
                        map_y[idx] = sy as f32;
                    }
                }
            }
        }
    }

    RemapTable {
        map_x,
        map_y,
        width: w,
        height: h,
    }
}

/// Bilinear resampling of `src` through `table`; sentinel or out-of-range
/// entries produce fully transparent pixels. All four channels, alpha
/// included, are interpolated the same way.
pub fn remap(src: &Frame, table: &RemapTable) -> Result<Frame> {
    if src.width != table.width || src.height != table.height {
        return Err(Error::invalid(format!(
            "remap table is {}x{} but frame is {}x{}",
            table.width, table.height, src.width, src.height
        )));
    }
    let (w, h) = (src.width as usize, src.height as usize);
    let (max_x, max_y) = ((w - 1) as f32, (h - 1) as f32);
    let mut out = vec![0u8; src.pixels.len()];
    let px = &src.pixels;
    for (i, (sx, sy)) in table.map_x.iter().zip(&table.map_y).enumerate() {
        let (sx, sy) = (*sx, *sy);
        // NaN fails both comparisons
        if !(sx >= 0.0 && sx <= max_x && sy >= 0.0 && sy <= max_y) {
            continue;
        }
        let x0 = sx.floor() as usize;
        let y0 = sy.floor() as usize;
        let fx = sx - x0 as f32;
        let fy = sy - y0 as f32;
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let i00 = 4 * (y0 * w + x0);
        let i10 = 4 * (y0 * w + x1);
        let i01 = 4 * (y1 * w + x0);
        let i11 = 4 * (y1 * w + x1);
        let zero = |k: usize| px[k..k + 4] == [0, 0, 0, 0];
        if zero(i00) && zero(i10) && zero(i01) && zero(i11) {
            continue;
        }
        let w00 = (1.0 - fx) * (1.0 - fy);
        let w10 = fx * (1.0 - fy);
        let w01 = (1.0 - fx) * fy;
        let w11 = fx * fy;
        let o = 4 * i;
        for c in 0..4 {
            let v = w00 * px[i00 + c] as f32
                + w10 * px[i10 + c] as f32
                + w01 * px[i01 + c] as f32
                + w11 * px[i11 + c] as f32;
            out[o + c] = (v + 0.5).floor().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(Frame {
        pixels: out,
        width: src.width,
        height: src.height,
        timestamp: src.timestamp,
    })
}
