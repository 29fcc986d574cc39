//! Throughput and latency measurement.
//!
//! Stage timings are taken in isolation on the default scene. The latency
//! figure comes from a lockstep run at zero delay (capture to composed
//! display). The free-running mode puts the tracker on its own thread and
//! lets the renderer pick up whatever snapshot is newest.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::overlay::{blend, distort_overlay, render_tool, ArmOverlay, CameraSide, StereoCompositor};
use crate::se3::Pose;
use crate::sim::{background, percentile, Simulation};
use crate::tracker::{synthetic_observations, HandEyeTracker};

pub const REFERENCE_RENDER_FPS: f64 = 36.0;
pub const REFERENCE_TRACKER_HZ: f64 = 24.0;
pub const REFERENCE_LATENCY_MS: (f64, f64) = (100.0, 20.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Tracker,
    Ik,
    Render,
    Distort,
    Blend,
    Compose,
    Latency,
    FreeRun,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Tracker,
        Stage::Ik,
        Stage::Render,
        Stage::Distort,
        Stage::Blend,
        Stage::Compose,
        Stage::Latency,
        Stage::FreeRun,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Tracker => "tracker",
            Stage::Ik => "ik",
            Stage::Render => "render",
            Stage::Distort => "distort",
            Stage::Blend => "blend",
            Stage::Compose => "compose",
            Stage::Latency => "latency",
            Stage::FreeRun => "free_run",
        }
    }

    pub fn parse(s: &str) -> Result<Stage> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Stage::ALL.iter().map(|s| s.name()).collect();
                Error::InvalidArgument(format!("unknown stage {s:?}, expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageStat {
    pub stage: Stage,
    pub samples: usize,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
    /// Reciprocal of the mean duration.
    pub rate_hz: f64,
}

impl StageStat {
    fn from_durations(stage: Stage, d: &[f64]) -> Self {
        let ms: Vec<f64> = d.iter().map(|s| s * 1e3).collect();
        let mean = d.iter().sum::<f64>() / d.len().max(1) as f64;
        StageStat {
            stage,
            samples: d.len(),
            p50_ms: percentile(&ms, 50.0),
            p95_ms: percentile(&ms, 95.0),
            max_ms: ms.iter().copied().fold(0.0, f64::max),
            rate_hz: if mean > 0.0 { 1.0 / mean } else { f64::INFINITY },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FloorCheck {
    pub name: String,
    pub measured: f64,
    pub floor: f64,
    pub reference: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FreeRun {
    pub seconds: f64,
    pub render_fps: f64,
    pub tracker_hz: f64,
    /// Distinct tracker snapshots the renderer picked up.
    pub snapshots_used: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub threads: usize,
    pub stages: Vec<StageStat>,
    /// Capture to display at zero delay, milliseconds.
    pub latency: Option<StageStat>,
    pub free_run: Option<FreeRun>,
    pub floors: Vec<FloorCheck>,
}

impl BenchReport {
    pub fn passed(&self) -> bool {
        self.floors.iter().all(|f| f.pass)
    }

    pub fn stage(&self, s: Stage) -> Option<&StageStat> {
        self.stages.iter().find(|x| x.stage == s)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "threads: {}", self.threads);
        let _ = writeln!(s, "{:<10} {:>8} {:>10} {:>10} {:>10} {:>12}", "stage", "samples", "p50_ms", "p95_ms", "max_ms", "rate_hz");
        for st in &self.stages {
            let _ = writeln!(
                s,
                "{:<10} {:>8} {:>10.3} {:>10.3} {:>10.3} {:>12.1}",
                st.stage.name(),
                st.samples,
                st.p50_ms,
                st.p95_ms,
                st.max_ms,
                st.rate_hz
            );
        }
        if let Some(l) = &self.latency {
            let _ = writeln!(
                s,
                "latency at d=0: p50 {:.2} ms, p95 {:.2} ms (reference: {} +- {} ms end to end, report only)",
                l.p50_ms, l.p95_ms, REFERENCE_LATENCY_MS.0, REFERENCE_LATENCY_MS.1
            );
        }
        if let Some(f) = &self.free_run {
            let _ = writeln!(
                s,
                "free-running {:.1} s: render {:.1} fps, tracker {:.1} Hz, {} snapshots used",
                f.seconds, f.render_fps, f.tracker_hz, f.snapshots_used
            );
        }
        for f in &self.floors {
            let _ = writeln!(
                s,
                "{} {}: {:.1} (floor {}, reference {})",
                if f.pass { "PASS" } else { "FAIL" },
                f.name,
                f.measured,
                f.floor,
                f.reference
            );
        }
        s
    }
}

fn time_loop(warmup: usize, iterations: usize, mut f: impl FnMut() -> Result<()>) -> Result<Vec<f64>> {
    for _ in 0..warmup {
        f()?;
    }
    let mut out = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let t = Instant::now();
        f()?;
        out.push(t.elapsed().as_secs_f64());
    }
    Ok(out)
}

/// Runs the selected stages (all when `stages` is empty).
pub fn bench(cfg: &Config, stages: &[Stage]) -> Result<BenchReport> {
    cfg.validate()?;
    let want = |s: Stage| stages.is_empty() || stages.contains(&s);
    let b = cfg.bench;
    let sim = Simulation::new(cfg)?;
    let sc = &sim.scene;
    let j = sc.reference_joints.clone();
    let truth = cfg.scenario.true_hand_eye;
    let left = sc.rig.left;
    let mut report = BenchReport {
        threads: crate::overlay::thread_budget(),
        stages: Vec::new(),
        latency: None,
        free_run: None,
        floors: Vec::new(),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.scenario.seed);
    let obs_sets: Vec<_> = (0..16)
        .map(|_| synthetic_observations(&truth, &j, &sc.chain, &sc.atlas, &left, 1.0, &mut rng))
        .collect::<Result<_>>()?;

    if want(Stage::Tracker) {
        let mut tracker = HandEyeTracker::new(cfg.nominal_hand_eye(), cfg.ekf, cfg.smoother)?;
        let mut k = 0u64;
        let d = time_loop(b.warmup, b.iterations.max(100), || {
            let obs = &obs_sets[k as usize % obs_sets.len()];
            tracker.step(k, obs, &j, &sc.chain, &sc.atlas, &left)?;
            k += 1;
            Ok(())
        })?;
        let st = StageStat::from_durations(Stage::Tracker, &d);
        report.floors.push(FloorCheck {
            name: format!("tracker update ({} features) Hz", sc.atlas.features.len()),
            measured: st.rate_hz,
            floor: b.tracker_hz_floor,
            reference: REFERENCE_TRACKER_HZ,
            pass: st.rate_hz >= b.tracker_hz_floor,
        });
        report.stages.push(st);
    }

    if want(Stage::Ik) {
        let target = sc.chain.forward_kinematics(&j)?;
        let nudged = Pose::new(target.rotation, target.translation + crate::se3::Vec3::new(0.002, -0.001, 0.001));
        let d = time_loop(b.warmup, b.iterations.max(100), || {
            sc.chain.inverse_kinematics(&nudged, &j, &sc.ik)?;
            Ok(())
        })?;
        report.stages.push(StageStat::from_durations(Stage::Ik, &d));
    }

    let needs_frames = [Stage::Render, Stage::Distort, Stage::Blend, Stage::Compose, Stage::Latency, Stage::FreeRun]
        .into_iter()
        .any(want);
    if !needs_frames {
        return Ok(report);
    }
    let compositor = StereoCompositor::new(sc.rig, cfg.scenario.grid_step)?;
    let bg_l = background(&sc.rig.left, CameraSide::Left);
    let bg_r = background(&sc.rig.right, CameraSide::Right);
    let alpha = cfg.opacity.alpha_max;

    let layer = render_tool(&sc.model, &j, &sc.chain, &truth, &left, &Pose::IDENTITY, CameraSide::Left)?;
    if want(Stage::Render) {
        let d = time_loop(b.warmup, b.iterations, || {
            render_tool(&sc.model, &j, &sc.chain, &truth, &left, &Pose::IDENTITY, CameraSide::Left)?;
            Ok(())
        })?;
        report.stages.push(StageStat::from_durations(Stage::Render, &d));
    }
    let distorted = distort_overlay(&layer, &compositor.left_table)?;
    if want(Stage::Distort) {
        let d = time_loop(b.warmup, b.iterations, || {
            distort_overlay(&layer, &compositor.left_table)?;
            Ok(())
        })?;
        report.stages.push(StageStat::from_durations(Stage::Distort, &d));
    }
    if want(Stage::Blend) {
        let d = time_loop(b.warmup, b.iterations, || {
            blend(&bg_l, &distorted.frame, alpha)?;
            Ok(())
        })?;
        report.stages.push(StageStat::from_durations(Stage::Blend, &d));
    }
    if want(Stage::Compose) {
        let arms = [ArmOverlay {
            model: &sc.model,
            chain: &sc.chain,
            joints: &j,
            hand_eye: truth,
            alpha,
        }];
        let d = time_loop(b.warmup, b.iterations, || {
            compositor.compose_stereo(&bg_l, &bg_r, &arms)?;
            Ok(())
        })?;
        let st = StageStat::from_durations(Stage::Compose, &d);
        report.floors.push(FloorCheck {
            name: format!("stereo {}x{} compose fps", left.width, left.height),
            measured: st.rate_hz,
            floor: b.compose_fps_floor,
            reference: REFERENCE_RENDER_FPS,
            pass: st.rate_hz >= b.compose_fps_floor,
        });
        report.stages.push(st);
    }
    if want(Stage::Latency) {
        let mut c = cfg.clone();
        c.delay.round_trip = 0.0;
        let mut sim = Simulation::new(&c)?;
        sim.enable_rendering(c.scenario.grid_step)?;
        let mut lat = Vec::new();
        while lat.len() < b.iterations {
            if let Some(l) = sim.step()?.times.latency {
                lat.push(l);
            }
        }
        report.latency = Some(StageStat::from_durations(Stage::Latency, &lat));
    }
    if want(Stage::FreeRun) && b.free_run_seconds > 0.0 {
        report.free_run = Some(free_run(cfg, &compositor, &obs_sets, b.free_run_seconds)?);
    }
    Ok(report)
}

/// Tracker and renderer on independent loops, exchanging snapshots through
/// the tracker's latest-value cell.
fn free_run(
    cfg: &Config,
    compositor: &StereoCompositor,
    obs_sets: &[Vec<crate::tracker::FeatureObservation>],
    seconds: f64,
) -> Result<FreeRun> {
    let sim = Simulation::new(cfg)?;
    let sc = &sim.scene;
    let j = sc.reference_joints.clone();
    let mut tracker = HandEyeTracker::new(cfg.nominal_hand_eye(), cfg.ekf, cfg.smoother)?;
    let cell = Arc::clone(&tracker.cell);
    let stop = AtomicBool::new(false);
    let updates = AtomicU64::new(0);
    let bg_l = background(&sc.rig.left, CameraSide::Left);
    let bg_r = background(&sc.rig.right, CameraSide::Right);
    let limit = Duration::from_secs_f64(seconds);
    let start = Instant::now();
    let (frames, used) = std::thread::scope(|s| -> Result<(u64, u64)> {
        let worker = s.spawn(|| -> Result<()> {
            let mut k = 0u64;
            while !stop.load(Ordering::Relaxed) {
                tracker.step(k, &obs_sets[k as usize % obs_sets.len()], &j, &sc.chain, &sc.atlas, &sc.rig.left)?;
                updates.fetch_add(1, Ordering::Relaxed);
                k += 1;
            }
            Ok(())
        });
        let mut frames = 0u64;
        let mut used = 0u64;
        let mut last_seen = None;
        let result = (|| {
            while start.elapsed() < limit {
                let snap = cell.load();
                if last_seen != Some(snap.sample) {
                    used += 1;
                    last_seen = Some(snap.sample);
                }
                let arms = [ArmOverlay {
                    model: &sc.model,
                    chain: &sc.chain,
                    joints: &j,
                    hand_eye: snap.hand_eye,
                    alpha: cfg.opacity.alpha_max,
                }];
                compositor.compose_stereo(&bg_l, &bg_r, &arms)?;
                frames += 1;
            }
            Ok(())
        })();
        stop.store(true, Ordering::Relaxed);
        worker.join().map_err(|_| Error::State("tracker thread panicked".into()))??;
        result.map(|()| (frames, used))
    })?;
    let elapsed = start.elapsed().as_secs_f64();
    Ok(FreeRun {
        seconds: elapsed,
        render_fps: frames as f64 / elapsed,
        tracker_hz: updates.load(Ordering::Relaxed) as f64 / elapsed,
        snapshots_used: used,
    })
}
