use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use telelens::bench::{bench, Stage};
use telelens::calibration::{initial_handeye_detailed, solve_calibration, CalibrationDataset, SyntheticCalibration};
use telelens::config::{Config, InjectedError};
use telelens::serve::{self, ServeOptions};
use telelens::sim::{self, metrics_csv, LeadReport, MasterSource, RunOutput, StereoFrames, Summary};
use telelens::wire::{replay, SessionLog};
use telelens::Error;

/// Predictive display for delayed teleoperation.
#[derive(Parser)]
#[command(name = "telelens", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file; the bundled defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Report {
    Text,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Hand-eye calibration from a checkerboard dataset (CSV).
    Calibrate {
        dataset: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Write the result as a config block (TOML).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "text")]
        report: Report,
    },
    /// Run a scenario offline and write metrics and frames.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Round-trip delay, seconds.
        #[arg(long)]
        delay: Option<f64>,
        /// Zero feature noise and zero injected hand-eye error.
        #[arg(long)]
        no_noise: bool,
        /// Repeat the run over a list, e.g. `delay=0,0.5,1.0`.
        #[arg(long)]
        sweep: Option<String>,
        /// Skip rendering and PNG output.
        #[arg(long)]
        no_frames: bool,
        /// Override the scenario duration.
        #[arg(long)]
        samples: Option<u64>,
        #[arg(long, value_enum, default_value = "text")]
        report: Report,
    },
    /// Time the pipeline stages and check the configured floors.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Limit to these stages (repeatable).
        #[arg(long = "stage")]
        stages: Vec<String>,
        #[arg(long, value_enum, default_value = "text")]
        report: Report,
    },
    /// Live mode over WebSocket for the operator console.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        bind: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Save the console session (NDJSON) on exit.
        #[arg(long)]
        record: Option<PathBuf>,
        /// Stop after this many samples.
        #[arg(long)]
        samples: Option<u64>,
        /// Hold at sample 0 until this many consoles are connected.
        #[arg(long, default_value_t = 0)]
        wait_clients: usize,
        /// Step as fast as possible.
        #[arg(long)]
        no_realtime: bool,
        /// Drive the master from the scenario trajectory instead of console input.
        #[arg(long)]
        trajectory: bool,
        /// Write metrics.csv here on exit.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-run a recorded session and write its metrics.
    Replay {
        session: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Output directory; metrics go to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic calibration dataset.
    GenDataset {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        images: Option<usize>,
        /// Pixel noise sigma.
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Print the effective config.
    PrintConfig {
        #[command(flatten)]
        common: Common,
    },
}

/// An error with its exit code: 1 failure, 2 config or data, 3 environment.
struct Failure {
    code: u8,
    message: String,
}

type CliResult<T = ()> = Result<T, Failure>;

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io(_) | Error::Png(_) => 3,
            Error::Config(_)
            | Error::Parse { .. }
            | Error::InvalidArgument(_)
            | Error::InsufficientData(_)
            | Error::Unobservable(_)
            | Error::RankDeficient(_) => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn data_error(e: Error) -> Failure {
    Failure {
        code: 2,
        message: e.to_string(),
    }
}

fn env_error(what: &str, path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure {
        code: 3,
        message: format!("{what} {}: {e}", path.display()),
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

fn load_config(common: &Common) -> CliResult<Config> {
    match &common.config {
        None => Ok(Config::default()),
        Some(p) => Config::load(p).map_err(data_error),
    }
}

fn revalidate(cfg: Config) -> CliResult<Config> {
    cfg.validate().map_err(data_error)?;
    Ok(cfg)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult {
    fs::write(path, contents).map_err(|e| env_error("cannot write", path, e))
}

fn create_dir(path: &Path) -> CliResult {
    fs::create_dir_all(path).map_err(|e| env_error("cannot create", path, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serializes")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Calibrate {
            dataset,
            common,
            out,
            report,
        } => calibrate(&dataset, &common, out.as_deref(), report),
        Command::Simulate {
            common,
            seed,
            out,
            delay,
            no_noise,
            sweep,
            no_frames,
            samples,
            report,
        } => simulate(SimulateArgs {
            common,
            seed,
            out,
            delay,
            no_noise,
            sweep,
            no_frames,
            samples,
            report,
        }),
        Command::Bench { common, stages, report } => run_bench(&common, &stages, report),
        Command::Serve {
            common,
            port,
            bind,
            seed,
            record,
            samples,
            wait_clients,
            no_realtime,
            trajectory,
            out,
        } => run_serve(ServeArgs {
            common,
            port,
            bind,
            seed,
            record,
            samples,
            wait_clients,
            no_realtime,
            trajectory,
            out,
        }),
        Command::Replay { session, common, out } => run_replay(&session, &common, out.as_deref()),
        Command::GenDataset {
            common,
            out,
            seed,
            images,
            noise,
        } => gen_dataset(&common, &out, seed, images, noise),
        Command::PrintConfig { common } => load_config(&common).and_then(|c| {
            print!("{}", c.to_toml()?);
            Ok(())
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("telelens: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

#[derive(Serialize)]
struct CalibrationReport<'a> {
    dataset: String,
    images: usize,
    corners: usize,
    initial_hand_eye: telelens::se3::Pose,
    pnp_used: &'a [usize],
    pnp_skipped: Vec<SkippedImage<'a>>,
    result: &'a telelens::calibration::CalibrationResult,
}

#[derive(Serialize)]
struct SkippedImage<'a> {
    image: usize,
    reason: &'a str,
}

fn calibrate(path: &Path, common: &Common, out: Option<&Path>, report: Report) -> CliResult {
    let cfg = load_config(common)?;
    let dataset = CalibrationDataset::read(path).map_err(data_error)?;
    if dataset.images.is_empty() {
        return Err(usage(format!("{}: dataset has no images", path.display())));
    }
    let chain = cfg.chain().map_err(data_error)?;
    let intr = &cfg.intrinsics.left;
    let init = initial_handeye_detailed(&dataset, intr, &chain).map_err(data_error)?;
    let result = solve_calibration(&dataset, intr, &chain, init.hand_eye)?;
    if let Some(out) = out {
        write_file(out, result.to_toml()?)?;
    }
    match report {
        Report::Json => {
            let r = CalibrationReport {
                dataset: path.display().to_string(),
                images: dataset.images.len(),
                corners: dataset.visible_count(),
                initial_hand_eye: init.hand_eye,
                pnp_used: &init.used,
                pnp_skipped: init
                    .skipped
                    .iter()
                    .map(|(i, r)| SkippedImage { image: *i, reason: r })
                    .collect(),
                result: &result,
            };
            println!("{}", to_json(&r));
        }
        Report::Text => {
            let mut s = String::new();
            let _ = writeln!(
                s,
                "dataset {}: {} images, {} corners",
                path.display(),
                dataset.images.len(),
                dataset.visible_count()
            );
            for (i, reason) in &init.skipped {
                let _ = writeln!(s, "pnp skipped image {i}: {reason}");
            }
            let _ = writeln!(s, "iterations {}", result.iterations);
            let _ = writeln!(s, "excluded corners {}", result.excluded);
            let _ = writeln!(s, "rms_px {}", result.rms);
            for (i, r) in result.per_image_rms.iter().enumerate() {
                let _ = writeln!(s, "image {i:>3} rms_px {r}");
            }
            let t = result.hand_eye.translation;
            let q = result.hand_eye.rotation;
            let _ = writeln!(s, "hand_eye.translation {} {} {}", t.x, t.y, t.z);
            let _ = writeln!(s, "hand_eye.rotation {} {} {} {}", q.w, q.x, q.y, q.z);
            let _ = writeln!(s, "side_m {}", result.side);
            print!("{s}");
        }
    }
    Ok(())
}

struct SimulateArgs {
    common: Common,
    seed: Option<u64>,
    out: Option<PathBuf>,
    delay: Option<f64>,
    no_noise: bool,
    sweep: Option<String>,
    no_frames: bool,
    samples: Option<u64>,
    report: Report,
}

fn parse_sweep(spec: &str) -> CliResult<Vec<f64>> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| usage(format!("--sweep: expected key=v1,v2,..., got {spec:?}")))?;
    if key.trim() != "delay" {
        return Err(usage(format!("--sweep: only `delay` can be swept, got {key:?}")));
    }
    values
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|e| usage(format!("--sweep: {v:?}: {e}")))
        })
        .collect()
}

#[derive(Serialize)]
struct RunReport<'a> {
    summary: &'a Summary,
    lead: &'a [LeadReport],
    output: Option<String>,
}

fn lead_line(l: &LeadReport) -> String {
    format!(
        "lead arm {}: shift {} error {:.3} mm (tolerance {:.3} mm), best shift {} error {:.3} mm  {}",
        l.arm,
        l.expected_shift,
        l.error_at_expected * 1e3,
        l.tolerance * 1e3,
        l.best_shift,
        l.error_at_best * 1e3,
        if l.pass { "PASS" } else { "FAIL" }
    )
}

fn simulate(a: SimulateArgs) -> CliResult {
    let mut base = load_config(&a.common)?;
    if let Some(seed) = a.seed {
        base.scenario.seed = seed;
    }
    if let Some(d) = a.delay {
        base.delay.round_trip = d;
    }
    if let Some(n) = a.samples {
        base.scenario.duration = n;
    }
    if a.no_noise {
        base.scenario.feature_noise_px = 0.0;
        base.scenario.injected_error = InjectedError::zero();
    }
    let delays = match &a.sweep {
        Some(s) => parse_sweep(s)?,
        None => vec![base.delay.round_trip],
    };
    let sweeping = a.sweep.is_some();
    let mut outputs = Vec::new();
    for d in delays {
        let mut cfg = base.clone();
        cfg.delay.round_trip = d;
        let cfg = revalidate(cfg)?;
        let dir = a.out.as_ref().map(|o| if sweeping { o.join(format!("delay_{d}")) } else { o.clone() });
        let out = run_one(&cfg, dir.as_deref(), !a.no_frames)?;
        outputs.push((out, dir));
    }
    match a.report {
        Report::Json => {
            let reports: Vec<RunReport> = outputs
                .iter()
                .map(|(o, dir)| RunReport {
                    summary: &o.summary,
                    lead: &o.lead,
                    output: dir.as_ref().map(|d| d.display().to_string()),
                })
                .collect();
            println!("{}", to_json(&reports));
        }
        Report::Text => {
            println!("{}", Summary::TEXT_HEADER);
            for (o, _) in &outputs {
                println!("{}", o.summary.text_row());
            }
            for (o, _) in &outputs {
                for l in &o.lead {
                    println!("delay {} {}", o.summary.round_trip, lead_line(l));
                }
            }
        }
    }
    Ok(())
}

fn run_one(cfg: &Config, dir: Option<&Path>, frames: bool) -> CliResult<RunOutput> {
    let out = match dir {
        Some(dir) if frames => {
            let fdir = dir.join("frames");
            create_dir(&fdir)?;
            let mut write = |f: &StereoFrames| -> telelens::Result<()> {
                f.left.write_png(&fdir.join(format!("left_{:06}.png", f.sample)))?;
                f.right.write_png(&fdir.join(format!("right_{:06}.png", f.sample)))
            };
            sim::run(cfg, Some(&mut write))?
        }
        _ => sim::run(cfg, None)?,
    };
    if let Some(dir) = dir {
        create_dir(dir)?;
        write_file(&dir.join("metrics.csv"), out.metrics_csv())?;
        write_file(&dir.join("timings.csv"), out.timings_csv())?;
        write_file(&dir.join("tracker.csv"), out.tracker_csv())?;
        write_file(&dir.join("scenario.toml"), cfg.to_toml()?)?;
        let report = RunReport {
            summary: &out.summary,
            lead: &out.lead,
            output: None,
        };
        write_file(&dir.join("summary.json"), to_json(&report))?;
    }
    Ok(out)
}

fn run_bench(common: &Common, stages: &[String], report: Report) -> CliResult {
    let cfg = load_config(common)?;
    let stages = if stages.is_empty() {
        Stage::ALL.to_vec()
    } else {
        stages
            .iter()
            .map(|s| Stage::parse(s).map_err(data_error))
            .collect::<CliResult<Vec<_>>>()?
    };
    let r = bench(&cfg, &stages)?;
    match report {
        Report::Json => println!("{}", to_json(&r)),
        Report::Text => print!("{}", r.to_text()),
    }
    if r.passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = r.floors.iter().filter(|f| !f.pass).map(|f| f.name.as_str()).collect();
        Err(Failure {
            code: 1,
            message: format!("below floor: {}", failed.join(", ")),
        })
    }
}

struct ServeArgs {
    common: Common,
    port: Option<u16>,
    bind: Option<String>,
    seed: Option<u64>,
    record: Option<PathBuf>,
    samples: Option<u64>,
    wait_clients: usize,
    no_realtime: bool,
    trajectory: bool,
    out: Option<PathBuf>,
}

fn run_serve(a: ServeArgs) -> CliResult {
    let mut cfg = load_config(&a.common)?;
    if let Some(seed) = a.seed {
        cfg.scenario.seed = seed;
    }
    let cfg = revalidate(cfg)?;
    let mut opts = ServeOptions::from_config(&cfg);
    if let Some(p) = a.port {
        opts.port = p;
    }
    if let Some(b) = a.bind {
        opts.bind = b;
    }
    opts.max_samples = a.samples;
    opts.wait_for_clients = a.wait_clients;
    opts.realtime = opts.realtime && !a.no_realtime;
    if a.trajectory {
        opts.initial_source = MasterSource::Trajectory;
    }
    let (bind, port) = (opts.bind.clone(), opts.port);
    let handle = serve::spawn(&cfg, opts).map_err(|e| Failure {
        code: 3,
        message: format!("cannot listen on {bind}:{port}: {e}"),
    })?;
    let stop = handle.stopper();
    if let Err(e) = ctrlc::set_handler(stop) {
        eprintln!("telelens: no interrupt handler: {e}");
    }
    println!("listening on ws://{}", handle.addr);
    let report = handle.join()?;
    println!(
        "stopped at sample {}: {} console messages ({} rejected), {} malformed, {} sent, {} frames dropped",
        report.samples,
        report.session.entries.len(),
        report.rejected,
        report.malformed,
        report.messages_sent,
        report.frames_dropped
    );
    if let Some(path) = &a.record {
        write_file(path, report.session.to_ndjson())?;
    }
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        write_file(&dir.join("metrics.csv"), metrics_csv(&report.rows))?;
    }
    Ok(())
}

fn run_replay(path: &Path, common: &Common, out: Option<&Path>) -> CliResult {
    let cfg = load_config(common)?;
    let log = SessionLog::read(path).map_err(data_error)?;
    let rows = replay(&cfg, &log)?;
    let csv = metrics_csv(&rows);
    match out {
        Some(dir) => {
            create_dir(dir)?;
            write_file(&dir.join("metrics.csv"), csv)?;
            let s = Summary::from_rows(&rows, cfg.delay.round_trip, cfg.scenario.arms);
            println!("{}\n{}", Summary::TEXT_HEADER, s.text_row());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn gen_dataset(common: &Common, out: &Path, seed: u64, images: Option<usize>, noise: Option<f64>) -> CliResult {
    let cfg = load_config(common)?;
    let chain = cfg.chain().map_err(data_error)?;
    let mut g = SyntheticCalibration::standard(seed);
    g.board = cfg.checkerboard;
    g.true_side = cfg.checkerboard.side;
    if let Some(n) = images {
        g.images = n;
    }
    if let Some(s) = noise {
        if !(s >= 0.0 && s.is_finite()) {
            return Err(usage(format!("--noise must be non-negative, got {s}")));
        }
        g.noise_px = s;
    }
    let ds = g.generate(&cfg.intrinsics.left, &chain)?;
    write_file(out, ds.to_csv())?;
    println!("wrote {} images, {} corners to {}", ds.images.len(), ds.visible_count(), out.display());
    Ok(())
}
