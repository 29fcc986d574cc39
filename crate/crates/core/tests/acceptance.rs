//! Acceptance suite. Runs every criterion sequentially, prints one line per
//! criterion, and exits nonzero if any fails. Timing budgets are part of
//! each criterion.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use telelens::bench::{bench, Stage, REFERENCE_LATENCY_MS, REFERENCE_RENDER_FPS, REFERENCE_TRACKER_HZ};
use telelens::calibration::{
    cost, cost_and_gradient, initial_handeye, solve_calibration, CalibParams, SyntheticCalibration,
};
use telelens::camera::{build_distort_remap, CameraIntrinsics};
use telelens::config::Config;
use telelens::delay::{channel_pair, DelayParams};
use telelens::kinematics::{FeatureAtlas, JointVector, KinematicChain};
use telelens::overlay::OpacityParams;
use telelens::se3::{rotation_geodesic, slerp_blend, Pose, Quaternion, SmootherParams, Vec3};
use telelens::sim;
use telelens::tracker::{predict, synthetic_observations, update, EkfConfig, EkfState, SmoothedHandEye};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

struct Criterion {
    name: &'static str,
    budget: Option<Duration>,
    run: fn() -> Outcome,
}

fn main() -> ExitCode {
    let criteria = [
        Criterion {
            name: "opacity law",
            budget: Some(Duration::from_secs(1)),
            run: opacity_law,
        },
        Criterion {
            name: "smoother",
            budget: Some(Duration::from_secs(1)),
            run: smoother,
        },
        Criterion {
            name: "delay channel",
            budget: Some(Duration::from_secs(5)),
            run: delay_channel,
        },
        Criterion {
            name: "calibration",
            budget: Some(Duration::from_secs(60)),
            run: calibration,
        },
        Criterion {
            name: "ekf tracking",
            budget: Some(Duration::from_secs(30)),
            run: ekf_tracking,
        },
        Criterion {
            name: "distortion inversion",
            budget: Some(Duration::from_secs(10)),
            run: distortion_inversion,
        },
        Criterion {
            name: "end-to-end lead",
            budget: Some(Duration::from_secs(60)),
            run: end_to_end,
        },
        Criterion {
            name: "throughput",
            budget: None,
            run: throughput,
        },
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for c in &criteria {
        if !filter.is_empty() && !filter.iter().any(|f| c.name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let outcome = match (outcome, c.budget) {
            (Ok(m), Some(b)) if elapsed > b => Err(format!("{m}; over the {:.0?} budget", b)),
            (o, _) => o,
        };
        let secs = elapsed.as_secs_f64();
        match outcome {
            Ok(m) => println!("PASS  {:<22} {m} ({secs:.2} s)", c.name),
            Err(m) => {
                failed += 1;
                println!("FAIL  {:<22} {m} ({secs:.2} s)", c.name);
            }
        }
    }
    println!(
        "NOT REPRODUCIBLE  user study: completion-time reduction and operator error weights need human subjects; covered only by the property suites above"
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}

fn opacity_law() -> Outcome {
    let p = OpacityParams::default();
    ensure!(
        p.l_thresh == 0.0053 && p.alpha_max == 0.8 && p.r == 100.0,
        "default constants {p:?}"
    );
    let oracle = |l: f64| -> f64 {
        if l <= 0.0053 {
            0.0
        } else {
            let a = 100.0 * (l - 0.0053);
            if a >= 0.8 {
                0.8
            } else {
                a
            }
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut regions = [0usize; 3];
    for i in 0..100_000 {
        let l: f64 = match i % 4 {
            0 => rng.random_range(0.0..0.0053),
            1 => rng.random_range(0.0053..0.0133),
            2 => rng.random_range(0.0133..1.0),
            _ => rng.random_range(0.0..0.05),
        };
        let a = p.alpha_for_distance(l);
        ensure!(a == oracle(l), "l = {l:e}: {a} vs {}", oracle(l));
        regions[if a == 0.0 {
            0
        } else if a == 0.8 {
            2
        } else {
            1
        }] += 1;
    }
    let spots = [(0.0053, 0.0), (0.0103, 0.5), (0.0133, 0.8), (0.02, 0.8)];
    for (l, want) in spots {
        ensure!(p.alpha_for_distance(l) == want, "l = {l}: {}", p.alpha_for_distance(l));
    }
    Ok(format!(
        "1e5 values exact (hidden {}, ramp {}, saturated {}); 5.3 mm -> 0, 10.3 mm -> 0.5, 13.3 mm -> 0.8",
        regions[0], regions[1], regions[2]
    ))
}

/// Textbook slerp from the half-angle between unit quaternions.
fn slerp_oracle(q0: [f64; 4], q1: [f64; 4], t: f64) -> [f64; 4] {
    let dot: f64 = q0.iter().zip(&q1).map(|(a, b)| a * b).sum();
    let theta = dot.clamp(-1.0, 1.0).acos();
    let (s0, s1) = (((1.0 - t) * theta).sin() / theta.sin(), (t * theta).sin() / theta.sin());
    [0, 1, 2, 3].map(|k| s0 * q0[k] + s1 * q1[k])
}

fn smoother() -> Outcome {
    let a = 0.8;
    let target_t = Vec3::new(0.012, -0.004, 0.007);
    let angle = 10f64.to_radians();
    let target = Pose::new(Quaternion::rz(angle), target_t);
    let mut sm = SmoothedHandEye::new(Pose::IDENTITY, SmootherParams::new(a).unwrap());
    let mut p = Vec3::zeros();
    let mut worst_rot = 0.0f64;
    let mut worst_rel = 0.0f64;
    for k in 1..=40 {
        let out = sm.smooth_step(&target).map_err(|e| e.to_string())?;
        p = (1.0 - a) * p + a * target_t;
        ensure!(out.translation == p, "step {k}: translation {:?} vs {:?}", out.translation, p);
        let remaining = 0.2f64.powi(k);
        let rel = (out.translation - target_t * (1.0 - remaining)).norm() / target_t.norm();
        worst_rel = worst_rel.max(rel);
        let expected = Quaternion::rz(angle * (1.0 - remaining));
        let dr = rotation_geodesic(&out.rotation, &expected);
        worst_rot = worst_rot.max(dr);
        ensure!(rel < 1e-14, "step {k}: translation off the geometric decay by {rel:e}");
        ensure!(dr < 1e-7, "step {k}: rotation off by {dr:e} rad");
    }
    let q = slerp_blend(&Quaternion::IDENTITY, &Quaternion::rz(90f64.to_radians()), 0.8).unwrap();
    let h = 45f64.to_radians();
    let o = slerp_oracle([1.0, 0.0, 0.0, 0.0], [h.cos(), 0.0, 0.0, h.sin()], 0.8);
    let diff = [q.w - o[0], q.x - o[1], q.y - o[2], q.z - o[3]].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    ensure!(diff < 1e-12, "slerp vs oracle {diff:e}");
    let d72 = rotation_geodesic(&q, &Quaternion::rz(72f64.to_radians()));
    ensure!(d72 < 1e-12, "slerp(identity, Rz 90, 0.8) is {d72:e} rad from Rz 72");
    Ok(format!(
        "decay 0.2 per step over 40 steps, translation exact, rotation within {worst_rot:.1e} rad; slerp -> Rz(72 deg) within {diff:.1e}"
    ))
}

/// Maximal-length 15-bit LFSR (x^15 + x^14 + 1).
fn prbs(len: usize) -> Vec<f64> {
    let mut s: u16 = 0x4a5f;
    (0..len)
        .map(|_| {
            let bit = ((s >> 14) ^ (s >> 13)) & 1;
            s = ((s << 1) | bit) & 0x7fff;
            if bit == 1 {
                1.0
            } else {
                -1.0
            }
        })
        .collect()
}

/// Lag in `0..max_lag` maximizing the cross-correlation of `x` into `y`.
fn xcorr_peak(x: &[f64], y: &[f64], max_lag: usize) -> usize {
    (0..max_lag)
        .map(|lag| {
            let c: f64 = (lag..y.len()).map(|n| y[n] * x[n - lag]).sum();
            (lag, c)
        })
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap()
        .0
}

fn delay_channel() -> Outcome {
    let mut cases = 0;
    let mut failures = Vec::new();
    for fs in [50.0, 100.0, 200.0] {
        for d in [0.0, 0.5, 1.0] {
            let p = DelayParams::new(fs, d).map_err(|e| e.to_string())?;
            // n_d = f_s d; each direction must carry exactly half of it
            let nd = fs * d;
            let half = nd / 2.0;
            let len = 3 * p.round_trip_samples as usize + 400;
            for signal in ["impulse", "prbs"] {
                let x: Vec<f64> = match signal {
                    "impulse" => (0..len).map(|n| if n == 7 { 1.0 } else { 0.0 }).collect(),
                    _ => prbs(len),
                };
                let (mut fwd, mut back) = channel_pair(&p, 0.0f64, 0.0f64);
                let mut at_slave = Vec::with_capacity(len);
                let mut at_master = Vec::with_capacity(len);
                for (n, &v) in x.iter().enumerate() {
                    let s = fwd.push_pop(v, n as u64).map_err(|e| e.to_string())?;
                    at_slave.push(s);
                    at_master.push(back.push_pop(s, n as u64).map_err(|e| e.to_string())?);
                }
                let f = xcorr_peak(&x, &at_slave, len / 2) as f64;
                let r = xcorr_peak(&at_slave, &at_master, len / 2) as f64;
                let rt = xcorr_peak(&x, &at_master, len / 2) as f64;
                cases += 1;
                if f != half || r != half || rt != nd {
                    failures.push(format!(
                        "{signal} f_s {fs} d {d}: n_d = {nd}, measured {f} + {r} = {rt} samples"
                    ));
                }
            }
        }
    }
    ensure!(
        failures.is_empty(),
        "{}/{cases} cases off n_d/2 per direction: {}",
        failures.len(),
        failures.join("; ")
    );
    Ok(format!("{cases} impulse/PRBS cases peak at exactly n_d/2 per direction (n_d = f_s d)"))
}

fn calibration() -> Outcome {
    let intr = CameraIntrinsics::default();
    let chain = KinematicChain::default_instrument();
    let mut passed = 0;
    let mut worst = (0.0f64, 0.0f64);
    let mut rms_range = (f64::INFINITY, 0.0f64);
    let mut failures = Vec::new();
    for seed in 0..100u64 {
        let gen = SyntheticCalibration::standard(seed);
        ensure!(
            gen.images == 15 && gen.board.corner_count() == 48 && gen.noise_px == 0.5,
            "generator is not m=15, n=48, 0.5 px"
        );
        let data = gen.generate(&intr, &chain).map_err(|e| e.to_string())?;
        let result = initial_handeye(&data, &intr, &chain).and_then(|init| solve_calibration(&data, &intr, &chain, init));
        match result {
            Ok(r) => {
                let (dt, dr) = r.hand_eye.distance(&gen.hand_eye);
                worst = (worst.0.max(dt), worst.1.max(dr));
                rms_range = (rms_range.0.min(r.rms), rms_range.1.max(r.rms));
                if dt < 0.002 && dr < 0.5f64.to_radians() && (0.3..=0.7).contains(&r.rms) {
                    passed += 1;
                } else {
                    failures.push(seed);
                }
            }
            Err(_) => failures.push(seed),
        }
    }
    ensure!(passed >= 95, "only {passed}/100 seeds passed (failed {failures:?})");

    let mut gen = SyntheticCalibration::standard(1000);
    gen.noise_px = 0.0;
    let data = gen.generate(&intr, &chain).map_err(|e| e.to_string())?;
    let init = initial_handeye(&data, &intr, &chain).map_err(|e| e.to_string())?;
    let r = solve_calibration(&data, &intr, &chain, init).map_err(|e| e.to_string())?;
    let (dt, dr) = r.hand_eye.distance(&gen.hand_eye);
    ensure!(dt < 1e-5 && dr < 1e-5, "noiseless recovery {dt:e} m / {dr:e} rad");

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let noisy = SyntheticCalibration::standard(77);
    let data = noisy.generate(&intr, &chain).map_err(|e| e.to_string())?;
    let truth = CalibParams {
        hand_eye: noisy.hand_eye,
        mount: noisy.mount,
        side: noisy.true_side,
    };
    let mut worst_grad = 0.0f64;
    for _ in 0..5 {
        let mut d = telelens::calibration::ParamVector::zeros();
        for k in 0..13 {
            d[k] = rng.random_range(-1.0..1.0) * if k == 12 { 1e-4 } else { 3e-3 };
        }
        let p = truth.perturbed(&d);
        let (_, g) = cost_and_gradient(&p, &data, &intr, &chain).map_err(|e| e.to_string())?;
        let h = 1e-7;
        let mut fd = telelens::calibration::ParamVector::zeros();
        for k in 0..13 {
            let mut e = telelens::calibration::ParamVector::zeros();
            e[k] = h;
            let plus = cost(&p.perturbed(&e), &data, &intr, &chain).map_err(|e| e.to_string())?;
            let minus = cost(&p.perturbed(&-e), &data, &intr, &chain).map_err(|e| e.to_string())?;
            fd[k] = (plus - minus) / (2.0 * h);
        }
        worst_grad = worst_grad.max((g - fd).norm() / fd.norm());
    }
    ensure!(worst_grad < 1e-5, "gradient vs finite differences {worst_grad:e} relative");
    Ok(format!(
        "{passed}/100 seeds within 2 mm / 0.5 deg (worst {:.2} mm / {:.3} deg, RMS {:.3}..{:.3} px); noiseless {dt:.1e} m / {dr:.1e} rad; gradient {worst_grad:.1e}",
        worst.0 * 1e3,
        worst.1.to_degrees(),
        rms_range.0,
        rms_range.1
    ))
}

fn jitter(rng: &mut ChaCha8Rng, chain: &KinematicChain) -> JointVector {
    let c = KinematicChain::default_reference_joints();
    let spread = [0.1, 0.1, 0.01, 0.5, 0.3, 0.3, 0.5];
    chain.clamp(&JointVector(
        c.0.iter().zip(spread).map(|(&q, s)| q + rng.random_range(-s..s)).collect(),
    ))
}

fn ekf_tracking() -> Outcome {
    let chain = KinematicChain::default_instrument();
    let atlas = FeatureAtlas::default_instrument();
    let cam = CameraIntrinsics::default();
    let truth = KinematicChain::default_hand_eye();
    let cfg = EkfConfig::default();
    let dir_t = Vec3::new(1.0, -1.0, 1.0).normalize();
    let dir_r = Vec3::new(1.0, -1.0, 0.8).normalize();
    let nominal = Pose::new(
        Quaternion::from_rotation_vector(&(dir_r * 5f64.to_radians())) * truth.rotation,
        truth.translation + dir_t * 0.010,
    );
    let (dt0, dr0) = nominal.distance(&truth);
    let mut worst = (0.0f64, 0.0f64);
    let mut first_converged = Vec::new();
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = EkfState::new(nominal, &cfg);
        let mut conv = None;
        for k in 1..=100 {
            let j = jitter(&mut rng, &chain);
            let obs = synthetic_observations(&truth, &j, &chain, &atlas, &cam, 1.0, &mut rng).map_err(|e| e.to_string())?;
            ensure!(obs.len() == 12 || k > 1, "only {} features visible", obs.len());
            state = predict(&state, &cfg);
            state = update(&state, &obs, &j, &chain, &atlas, &cam, &cfg).map_err(|e| e.to_string())?.0;
            let (dt, dr) = state.hand_eye().distance(&truth);
            if conv.is_none() && dt < 0.002 && dr < 1f64.to_radians() {
                conv = Some(k);
            }
        }
        let (dt, dr) = state.hand_eye().distance(&truth);
        ensure!(dt < 0.002 && dr < 1f64.to_radians(), "seed {seed}: after 100 updates {:.2} mm / {:.2} deg", dt * 1e3, dr.to_degrees());
        worst = (worst.0.max(dt), worst.1.max(dr));
        first_converged.push(conv.unwrap_or(0));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut state = EkfState::new(nominal, &cfg);
    for i in 0..10_000 {
        let j = jitter(&mut rng, &chain);
        let mut obs = synthetic_observations(&truth, &j, &chain, &atlas, &cam, 1.0, &mut rng).map_err(|e| e.to_string())?;
        let keep = rng.random_range(1..=obs.len());
        obs.truncate(keep);
        state = predict(&state, &cfg);
        ensure!(state.is_spd(), "covariance not SPD after predict {i}");
        state = update(&state, &obs, &j, &chain, &atlas, &cam, &cfg).map_err(|e| e.to_string())?.0;
        ensure!(state.is_spd(), "covariance not SPD after update {i}");
        ensure!(
            (state.covariance - state.covariance.transpose()).amax() == 0.0,
            "covariance asymmetric after update {i}"
        );
    }

    let j = KinematicChain::default_reference_joints();
    let mut fixed = EkfState::new(truth, &cfg);
    fixed.error = nalgebra::Vector6::new(0.002, -0.001, 0.0005, 0.01, -0.02, 0.005);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut obs = synthetic_observations(&fixed.hand_eye(), &j, &chain, &atlas, &cam, 0.0, &mut rng).map_err(|e| e.to_string())?;
    for o in &mut obs {
        o.sigma = 1.0;
    }
    let (next, _) = update(&fixed, &obs, &j, &chain, &atlas, &cam, &cfg).map_err(|e| e.to_string())?;
    ensure!(next.error == fixed.error, "zero innovation moved the state by {:e}", (next.error - fixed.error).norm());
    Ok(format!(
        "{:.1} mm / {:.1} deg injected -> worst {:.2} mm / {:.3} deg after 100 updates (first below tolerance at {:?}); SPD over 1e4 cycles; zero-innovation fixed point exact",
        dt0 * 1e3,
        dr0.to_degrees(),
        worst.0 * 1e3,
        worst.1.to_degrees(),
        first_converged
    ))
}

/// Newton iteration on the full distortion model, starting from the
/// distorted point itself.
fn undistort_oracle(cam: &CameraIntrinsics, xd: f64, yd: f64) -> Option<(f64, f64)> {
    let f = |x: f64, y: f64| {
        let r2 = x * x + y * y;
        let radial = 1.0 + cam.k1 * r2 + cam.k2 * r2 * r2 + cam.k3 * r2 * r2 * r2;
        (
            x * radial + 2.0 * cam.p1 * x * y + cam.p2 * (r2 + 2.0 * x * x),
            y * radial + cam.p1 * (r2 + 2.0 * y * y) + 2.0 * cam.p2 * x * y,
        )
    };
    let (mut x, mut y) = (xd, yd);
    for _ in 0..50 {
        let (fx, fy) = f(x, y);
        let (ex, ey) = (fx - xd, fy - yd);
        if ex.hypot(ey) < 1e-15 {
            return Some((x, y));
        }
        let h = 1e-7;
        let (ax, ay) = f(x + h, y);
        let (bx, by) = f(x - h, y);
        let (cx, cy) = f(x, y + h);
        let (dx, dy) = f(x, y - h);
        let (j00, j10) = ((ax - bx) / (2.0 * h), (ay - by) / (2.0 * h));
        let (j01, j11) = ((cx - dx) / (2.0 * h), (cy - dy) / (2.0 * h));
        let det = j00 * j11 - j01 * j10;
        if det.abs() < 1e-12 {
            return None;
        }
        x -= (j11 * ex - j01 * ey) / det;
        y -= (-j10 * ex + j00 * ey) / det;
    }
    let (fx, fy) = f(x, y);
    ((fx - xd).hypot(fy - yd) < 1e-12).then_some((x, y))
}

fn distortion_inversion() -> Outcome {
    let cam = CameraIntrinsics {
        k1: -0.2,
        ..CameraIntrinsics::pinhole(1000.0, 1000.0, 320.0, 240.0, 640, 480)
    };
    let table = build_distort_remap(&cam, 4).map_err(|e| e.to_string())?;
    let margin = 8u32;
    let (mut total, mut good, mut worst) = (0usize, 0usize, 0.0f64);
    for y in margin..cam.height - margin {
        for x in margin..cam.width - margin {
            let (xd, yd) = cam.pixel_to_normalized(x as f64, y as f64);
            let Some((xu, yu)) = undistort_oracle(&cam, xd, yd) else { continue };
            let (u, v) = cam.normalized_to_pixel(xu, yu);
            if !(u >= 0.0 && v >= 0.0 && u <= (cam.width - 1) as f64 && v <= (cam.height - 1) as f64) {
                continue;
            }
            total += 1;
            if let Some((sx, sy)) = table.source(x, y) {
                let e = (sx as f64 - u).hypot(sy as f64 - v);
                worst = worst.max(e);
                if e < 0.25 {
                    good += 1;
                }
            }
        }
    }
    let frac = good as f64 / total as f64;
    ensure!(total > 200_000, "only {total} interior pixels");
    ensure!(frac >= 0.95, "{:.2}% of interior pixels within 0.25 px", frac * 100.0);

    let mut round = 0.0f64;
    for i in 0..=60 {
        for k in 0..=60 {
            let (x, y) = (-0.3 + 0.01 * i as f64, -0.22 + 0.0075 * k as f64);
            let (xu, yu) = cam.undistort_normalized(x, y).map_err(|e| e.to_string())?;
            let (xd, yd) = cam.distort_normalized(xu, yu);
            round = round.max((xd - x).hypot(yd - y));
        }
    }
    ensure!(round < 1e-9, "distort(undistort(x)) off by {round:e}");
    Ok(format!(
        "{:.2}% of {total} interior pixels within 0.25 px of the iterative oracle (worst {worst:.3} px); distort(undistort) within {round:.1e}",
        frac * 100.0
    ))
}

fn end_to_end() -> Outcome {
    let cfg = Config::default();
    ensure!(cfg.delay.round_trip == 1.0, "default round trip {}", cfg.delay.round_trip);
    let out = sim::run(&cfg, None).map_err(|e| e.to_string())?;
    let lead = out.lead[0];
    ensure!(
        lead.pass,
        "overlay vs feedback at n + {}: {:.3} mm > tolerance {:.3} mm",
        lead.expected_shift,
        lead.error_at_expected * 1e3,
        lead.tolerance * 1e3
    );
    let cmp = sim::tracking_comparison(&cfg).map_err(|e| e.to_string())?;
    ensure!(
        (cmp.injected_translation - 0.010).abs() < 0.001,
        "injected miscalibration {:.2} mm",
        cmp.injected_translation * 1e3
    );
    ensure!(cmp.ratio <= 0.2, "tracked/untracked pixel error ratio {:.3}", cmp.ratio);
    Ok(format!(
        "overlay at n vs slave at n + {}: {:.3} mm (tolerance {:.3} mm, best shift {}); tracking {:.2} px vs {:.2} px untracked, ratio {:.4} under {:.1} mm injected error",
        lead.expected_shift,
        lead.error_at_expected * 1e3,
        lead.tolerance * 1e3,
        lead.best_shift,
        cmp.tracked_px,
        cmp.untracked_px,
        cmp.ratio,
        cmp.injected_translation * 1e3
    ))
}

fn throughput() -> Outcome {
    let cfg = Config::default();
    ensure!(
        cfg.bench.compose_fps_floor == 30.0 && cfg.bench.tracker_hz_floor == 24.0,
        "configured floors {} fps / {} Hz",
        cfg.bench.compose_fps_floor,
        cfg.bench.tracker_hz_floor
    );
    let r = bench(&cfg, &[Stage::Compose, Stage::Tracker, Stage::Latency]).map_err(|e| e.to_string())?;
    let compose = r.stage(Stage::Compose).ok_or("no compose timing")?;
    let tracker = r.stage(Stage::Tracker).ok_or("no tracker timing")?;
    let latency = r
        .latency
        .as_ref()
        .map(|l| format!("latency p50 {:.1} ms (reference {} +- {} ms, report only)", l.p50_ms, REFERENCE_LATENCY_MS.0, REFERENCE_LATENCY_MS.1))
        .unwrap_or_else(|| "latency not measured".into());
    let summary = format!(
        "stereo 640x480 compose {:.1} fps (floor 30, reference {REFERENCE_RENDER_FPS}); tracker {:.0} Hz with 12 features (floor 24, reference {REFERENCE_TRACKER_HZ}); {latency}; {} thread(s)",
        compose.rate_hz, tracker.rate_hz, r.threads
    );
    ensure!(r.passed(), "{summary}");
    Ok(summary)
}
