//! Predicted-tool overlay: opacity law, wireframe rasterizer, distortion and
//! alpha blending over the (delayed) camera frames.

use serde::{Deserialize, Serialize};

use crate::camera::{remap, CameraIntrinsics, Frame, RemapTable, StereoRig};
use crate::error::{Error, Result};
use crate::kinematics::{FeatureAtlas, JointVector, KinematicChain};
use crate::se3::{Pose, Vec3};

/// Near clipping plane, meters.
pub const NEAR_PLANE: f64 = 1e-3;
/// Line width, pixels.
pub const LINE_WIDTH: f64 = 2.0;
/// Marker disc diameter, pixels.
pub const MARKER_DIAMETER: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OpacityParams {
    /// Distance below which the overlay is hidden, meters.
    pub l_thresh: f64,
    pub alpha_max: f64,
    /// Gain, per meter.
    pub r: f64,
}

impl Default for OpacityParams {
    fn default() -> Self {
        OpacityParams {
            l_thresh: 0.0053,
            alpha_max: 0.8,
            r: 100.0,
        }
    }
}

impl OpacityParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.l_thresh >= 0.0) {
            return Err(Error::invalid("l_thresh must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.alpha_max) {
            return Err(Error::invalid("alpha_max must lie in [0, 1]"));
        }
        if !(self.r > 0.0) {
            return Err(Error::invalid("opacity gain r must be positive"));
        }
        Ok(())
    }

    /// `alpha = min(alpha_max, r (max(l_thresh, l) - l_thresh))`
    pub fn alpha_for_distance(&self, l: f64) -> f64 {
        self.alpha_max.min(self.r * (self.l_thresh.max(l) - self.l_thresh))
    }
}

/// Opacity from the distance between the commanded tool position now and
/// the delayed measured one.
pub fn opacity(p_sm_now: &Vec3, p_s_delayed: &Vec3, params: &OpacityParams) -> f64 {
    params.alpha_for_distance((p_sm_now - p_s_delayed).norm())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CameraSide {
    Left,
    Right,
}

impl CameraSide {
    pub fn name(self) -> &'static str {
        match self {
            CameraSide::Left => "left",
            CameraSide::Right => "right",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelVertex {
    pub link: usize,
    pub point: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolModel {
    pub vertices: Vec<ModelVertex>,
    pub edges: Vec<(usize, usize)>,
    pub markers: FeatureAtlas,
    pub edge_color: [u8; 3],
    pub marker_color: [u8; 3],
}

impl ToolModel {
    pub fn validate(&self, chain: &KinematicChain) -> Result<()> {
        if self.vertices.is_empty() {
            return Err(Error::invalid("tool model has no vertices"));
        }
        if let Some(v) = self.vertices.iter().find(|v| v.link >= chain.dof()) {
            return Err(Error::invalid(format!("model vertex on missing link {}", v.link)));
        }
        if let Some(e) = self
            .edges
            .iter()
            .find(|(a, b)| *a >= self.vertices.len() || *b >= self.vertices.len())
        {
            return Err(Error::invalid(format!("edge {e:?} references a missing vertex")));
        }
        self.markers.validate(chain)
    }

    /// Shaft, wrist and jaw wireframe for the default instrument.
    pub fn default_instrument() -> Self {
        let v = |link: usize, x: f64, y: f64, z: f64| ModelVertex {
            link,
            point: Vec3::new(x, y, z),
        };
        let r = 0.004;
        let vertices = vec![
            // shaft: two parallel lines along the tool axis (link 3)
            v(3, r, 0.0, -0.060),
            v(3, r, 0.0, 0.0),
            v(3, -r, 0.0, -0.060),
            v(3, -r, 0.0, 0.0),
            v(3, 0.0, 0.0, 0.0),
            // wrist links
            v(4, 0.0, 0.0, 0.0),
            v(5, 0.0, 0.0, 0.0),
            // jaws
            v(6, 0.0, 0.0, 0.0),
            v(6, 0.002, 0.0, 0.010),
            v(6, -0.002, 0.0, 0.010),
        ];
        let edges = vec![(0, 1), (2, 3), (1, 3), (4, 5), (5, 6), (6, 7), (7, 8), (7, 9)];
        ToolModel {
            vertices,
            edges,
            markers: FeatureAtlas::default_instrument(),
            edge_color: [80, 200, 255],
            marker_color: [255, 220, 0],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverlayLayer {
    /// Overlay only, transparent background.
    pub frame: Frame,
    /// Opacity applied when blending.
    pub alpha: f64,
    pub side: CameraSide,
}

/// Premultiplied float canvas used while rasterizing.
struct Canvas {
    w: usize,
    h: usize,
    px: Vec<[f32; 4]>,
}

impl Canvas {
    fn new(w: u32, h: u32) -> Self {
        Canvas {
            w: w as usize,
            h: h as usize,
            px: vec![[0.0; 4]; w as usize * h as usize],
        }
    }

    /// Source-over with coverage `a` of an opaque colour.
    #[inline]
    fn over(&mut self, x: usize, y: usize, rgb: [f32; 3], a: f32) {
        let d = &mut self.px[y * self.w + x];
        let k = 1.0 - a;
        d[0] = rgb[0] * a + d[0] * k;
        d[1] = rgb[1] * a + d[1] * k;
        d[2] = rgb[2] * a + d[2] * k;
        d[3] = a + d[3] * k;
    }

    /// Pixels within `radius + 0.5` of the segment, coverage ramping from 1
    /// at `radius - 0.5` to 0 at `radius + 0.5`.
    fn segment(&mut self, a: (f64, f64), b: (f64, f64), radius: f64, rgb: [f32; 3]) {
        let pad = radius + 1.0;
        let x0 = (a.0.min(b.0) - pad).floor().max(0.0);
        let x1 = (a.0.max(b.0) + pad).ceil().min(self.w as f64 - 1.0);
        let y0 = (a.1.min(b.1) - pad).floor().max(0.0);
        let y1 = (a.1.max(b.1) + pad).ceil().min(self.h as f64 - 1.0);
        if x0 > x1 || y0 > y1 {
            return;
        }
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len2 = dx * dx + dy * dy;
        for y in y0 as usize..=y1 as usize {
            for x in x0 as usize..=x1 as usize {
                let (px, py) = (x as f64, y as f64);
                let t = if len2 > 0.0 {
                    (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (cx, cy) = (a.0 + t * dx - px, a.1 + t * dy - py);
                let d = (cx * cx + cy * cy).sqrt();
                let cov = (radius + 0.5 - d).clamp(0.0, 1.0);
                if cov > 0.0 {
                    self.over(x, y, rgb, cov as f32);
                }
            }
        }
    }

    fn into_frame(self) -> Frame {
        let mut pixels = Vec::with_capacity(4 * self.px.len());
        for p in &self.px {
            if p[3] <= 0.0 {
                pixels.extend_from_slice(&[0, 0, 0, 0]);
                continue;
            }
            let q = |v: f32| (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8;
            let alpha = q(p[3]);
            if alpha == 0 {
                pixels.extend_from_slice(&[0, 0, 0, 0]);
                continue;
            }
            // straight colour from premultiplied
            let c = |v: f32| (v / p[3] * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8;
            pixels.extend_from_slice(&[c(p[0]), c(p[1]), c(p[2]), alpha]);
        }
        Frame {
            pixels,
            width: self.w as u32,
            height: self.h as u32,
            timestamp: 0,
        }
    }
}

enum Primitive {
    Line((f64, f64), (f64, f64)),
    Disc((f64, f64)),
}

/// Clips the camera-frame segment to `z >= NEAR_PLANE`.
fn clip_near(a: Vec3, b: Vec3) -> Option<(Vec3, Vec3)> {
    match (a.z >= NEAR_PLANE, b.z >= NEAR_PLANE) {
        (true, true) => Some((a, b)),
        (false, false) => None,
        (ina, _) => {
            let t = (NEAR_PLANE - a.z) / (b.z - a.z);
            let m = a + (b - a) * t;
            Some(if ina { (a, m) } else { (m, b) })
        }
    }
}

/// Renders the tool at joint vector `j` into an undistorted overlay layer.
/// `side_from_left` maps left-camera coordinates into the rendering camera
/// (identity for the left camera, the stereo baseline for the right).
pub fn render_tool(
    model: &ToolModel,
    j: &JointVector,
    chain: &KinematicChain,
    hand_eye: &Pose,
    camera: &CameraIntrinsics,
    side_from_left: &Pose,
    side: CameraSide,
) -> Result<OverlayLayer> {
    let poses = chain.link_poses(j)?;
    let cam_from_base = side_from_left.compose(hand_eye);
    let pin = camera.without_distortion();
    let to_cam = |link: usize, p: &Vec3| cam_from_base.transform_point(&poses[link].transform_point(p));
    let verts: Vec<Vec3> = model.vertices.iter().map(|v| to_cam(v.link, &v.point)).collect();

    let mut prims: Vec<(f64, Primitive, [f32; 3])> = Vec::new();
    let to_f = |c: [u8; 3]| [c[0] as f32 / 255.0, c[1] as f32 / 255.0, c[2] as f32 / 255.0];
    let (edge_rgb, marker_rgb) = (to_f(model.edge_color), to_f(model.marker_color));
    for &(ia, ib) in &model.edges {
        if let Some((a, b)) = clip_near(verts[ia], verts[ib]) {
            let pa = pin.project_pinhole(&a)?;
            let pb = pin.project_pinhole(&b)?;
            prims.push((0.5 * (a.z + b.z), Primitive::Line(pa, pb), edge_rgb));
        }
    }
    for f in &model.markers.features {
        let p = to_cam(f.link, &f.point);
        if p.z >= NEAR_PLANE {
            prims.push((p.z, Primitive::Disc(pin.project_pinhole(&p)?), marker_rgb));
        }
    }
    // painter's order: far first
    prims.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut canvas = Canvas::new(camera.width, camera.height);
    for (_, prim, rgb) in &prims {
        match *prim {
            Primitive::Line(a, b) => canvas.segment(a, b, LINE_WIDTH / 2.0, *rgb),
            Primitive::Disc(c) => canvas.segment(c, c, MARKER_DIAMETER / 2.0, *rgb),
        }
    }
    Ok(OverlayLayer {
        frame: canvas.into_frame(),
        alpha: 0.0,
        side,
    })
}

/// Moves the rendered (undistorted) layer into the distorted image geometry.
pub fn distort_overlay(layer: &OverlayLayer, table: &RemapTable) -> Result<OverlayLayer> {
    Ok(OverlayLayer {
        frame: remap(&layer.frame, table)?,
        alpha: layer.alpha,
        side: layer.side,
    })
}

/// `out = (1 - alpha a) frame + alpha a layer` per channel with `a` the
/// layer's own coverage, rounded half up. The output is opaque.
pub fn blend(frame: &Frame, layer: &Frame, alpha: f64) -> Result<Frame> {
    if !frame.same_size(layer) {
        return Err(Error::invalid("blend: frame and layer sizes differ"));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("blend alpha {alpha} outside [0, 1]")));
    }
    let mut out = frame.clone();
    if alpha == 0.0 {
        return Ok(out);
    }
    for (o, l) in out.pixels.chunks_exact_mut(4).zip(layer.pixels.chunks_exact(4)) {
        if l[3] == 0 {
            o[3] = 255;
            continue;
        }
        let w = alpha * l[3] as f64 / 255.0;
        for c in 0..3 {
            let v = (1.0 - w) * o[c] as f64 + w * l[c] as f64;
            o[c] = (v + 0.5).floor() as u8;
        }
        o[3] = 255;
    }
    Ok(out)
}

/// One arm's contribution to a stereo frame.
#[derive(Debug, Clone, Copy)]
pub struct ArmOverlay<'a> {
    pub model: &'a ToolModel,
    pub chain: &'a KinematicChain,
    /// Predicted joints.
    pub joints: &'a JointVector,
    /// Tracker snapshot (left camera from base).
    pub hand_eye: Pose,
    pub alpha: f64,
}

/// Stereo rig plus the remap tables of both cameras.
#[derive(Debug, Clone)]
pub struct StereoCompositor {
    pub rig: StereoRig,
    pub left_table: RemapTable,
    pub right_table: RemapTable,
    /// Upper bound on worker threads; 1 runs both sides inline.
    pub threads: usize,
}

/// `TELELENS_THREADS` if set and positive, else the available parallelism.
pub fn thread_budget() -> usize {
    std::env::var("TELELENS_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

impl StereoCompositor {
    pub fn new(rig: StereoRig, grid_step: u32) -> Result<Self> {
        rig.validate()?;
        Ok(StereoCompositor {
            left_table: crate::camera::build_distort_remap(&rig.left, grid_step)?,
            right_table: crate::camera::build_distort_remap(&rig.right, grid_step)?,
            rig,
            threads: thread_budget(),
        })
    }

    /// Render, distort and blend every arm onto one side.
    pub fn compose_side(&self, frame: &Frame, arms: &[ArmOverlay<'_>], side: CameraSide) -> Result<Frame> {
        let (cam, table, side_from_left) = match side {
            CameraSide::Left => (&self.rig.left, &self.left_table, Pose::IDENTITY),
            CameraSide::Right => (&self.rig.right, &self.right_table, self.rig.right_from_left),
        };
        if frame.width != cam.width || frame.height != cam.height {
            return Err(Error::invalid(format!(
                "{} frame is {}x{}, camera is {}x{}",
                side.name(),
                frame.width,
                frame.height,
                cam.width,
                cam.height
            )));
        }
        let mut out = frame.clone();
        for arm in arms {
            if arm.alpha <= 0.0 {
                continue;
            }
            let layer = render_tool(arm.model, arm.joints, arm.chain, &arm.hand_eye, cam, &side_from_left, side)?;
            let layer = distort_overlay(&layer, table)?;
            out = blend(&out, &layer.frame, arm.alpha)?;
        }
        out.timestamp = frame.timestamp;
        Ok(out)
    }

    /// Both displays; the sides run on separate threads when the budget allows.
    pub fn compose_stereo(&self, left: &Frame, right: &Frame, arms: &[ArmOverlay<'_>]) -> Result<(Frame, Frame)> {
        if self.threads >= 2 {
            std::thread::scope(|s| {
                let r = s.spawn(|| self.compose_side(right, arms, CameraSide::Right));
                let l = self.compose_side(left, arms, CameraSide::Left);
                let r = r.join().map_err(|_| Error::State("right compose thread panicked".into()))?;
                Ok((l?, r?))
            })
        } else {
            Ok((
                self.compose_side(left, arms, CameraSide::Left)?,
                self.compose_side(right, arms, CameraSide::Right)?,
            ))
        }
    }
}
