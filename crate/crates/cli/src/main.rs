//! `reltrack`: synthesize data, build tracklets, train, track, evaluate,
//! self-check and benchmark.
//!
//! Exit status is 0 on success, 1 for invalid arguments, configs or input
//! files, and 2 for failures while running (I/O, diverged training, failed
//! checks).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use reltrack::checks::{gradient_suite, oracle_suite, sampling_direction, CheckOutcome};
use reltrack::config::TrainConfig;
use reltrack::evaldata::io::{read_dataset, read_scenes, read_tracklet, write_dataset, write_scenes};
use reltrack::evaldata::{
    build_tracklets, evaluate, synth_scenes, synth_suite, synth_tracklet, write_frame_csv, SuiteOptions, SynthSpec,
    Tracklet, MIN_LEN, MIN_POINTS,
};
use reltrack::numeric::Checkpoint;
use reltrack::pipeline::{
    bench_forward, init_model, track_sequence, train, write_metric_log, OracleModel, TrackSettings, TrackerNet,
    TrackingModel,
};
use reltrack::Error;

#[derive(Parser, Debug)]
#[command(name = "reltrack", version, about = "Relation-aware 3D single-object tracking toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Run configuration file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named profile used when no config file is given: desk, paper, tiny, check.
    #[arg(long)]
    profile: Option<String>,
    /// `key=value` override, applied after the config file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for every random choice of the run.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic tracklet dataset or annotated scenes.
    Synth {
        #[command(flatten)]
        common: Common,
        /// JSON object or array of scene object specs; a random suite is generated otherwise.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Suite size when no spec is given.
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// Frames per tracklet when no spec is given.
        #[arg(long, default_value_t = 10)]
        frames: usize,
        /// Write all specs as one annotated scene sequence (`scenes.jsonl`).
        #[arg(long)]
        scenes: bool,
    },
    /// Cut annotated scenes into tracklets.
    BuildDataset {
        #[command(flatten)]
        common: Common,
        /// JSON-lines scene file.
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long, default_value_t = MIN_POINTS)]
        min_points: usize,
        #[arg(long, default_value_t = MIN_LEN)]
        min_len: usize,
    },
    /// Train on a tracklet dataset; writes `model.ckpt` and `metrics.csv`.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Overrides the configured epoch count.
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from this checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Track one tracklet from its first box; writes `track.csv`.
    Track {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelChoice,
        #[arg(long)]
        tracklet: PathBuf,
    },
    /// Evaluate on a tracklet dataset; prints a table, writes `report.json` and `frames.csv`.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelChoice,
        #[arg(long)]
        data: PathBuf,
        /// Worker threads (default: all cores).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Gradient checks, brute-force oracles and the sampler comparison.
    Check {
        #[command(flatten)]
        common: Common,
        /// Seeds for the sampler comparison.
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Time the stages of one forward pass.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        iterations: usize,
    },
}

#[derive(Args, Debug, Clone)]
struct ModelChoice {
    #[arg(long, conflicts_with = "model")]
    checkpoint: Option<PathBuf>,
    /// Built-in model when no checkpoint is given.
    #[arg(long, value_enum)]
    model: Option<BuiltinModel>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq)]
enum BuiltinModel {
    /// Reads the ground truth; scores 100 by construction.
    Oracle,
    /// Freshly initialized weights.
    Random,
}

/// Which side of the exit-code split an error falls on.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_)
            | Error::Invalid(_)
            | Error::Format { .. }
            | Error::Annotation { .. }
            | Error::Json(_)
            | Error::Checkpoint(_)
            | Error::InvalidBox(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

fn prepare_out(common: &Common) -> Result<&Path, Failure> {
    fs::create_dir_all(&common.out).map_err(|e| io_err(&common.out, e))?;
    Ok(&common.out)
}

fn load_config(common: &Common) -> Result<TrainConfig, Failure> {
    let mut cfg = match (&common.config, &common.profile) {
        (Some(_), Some(_)) => return Err(Failure::Usage("give either --config or --profile".into())),
        (Some(path), None) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            TrainConfig::from_text(&text)?
        }
        (None, Some(name)) => TrainConfig::profile(name)?,
        (None, None) => TrainConfig::desk(),
    };
    cfg.apply_overrides(&common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn load_model(choice: &ModelChoice, cfg: &TrainConfig) -> Result<(Box<dyn TrackingModel>, TrainConfig, bool), Failure> {
    match (&choice.checkpoint, choice.model) {
        (Some(path), _) => {
            let ckpt = Checkpoint::read(path)?;
            let (saved, net) = TrackerNet::<f32>::from_checkpoint(&ckpt)?;
            Ok((Box::new(net), saved, false))
        }
        (None, Some(BuiltinModel::Oracle)) => Ok((Box::new(OracleModel), cfg.clone(), true)),
        (None, Some(BuiltinModel::Random)) => Ok((Box::new(init_model(cfg)), cfg.clone(), false)),
        (None, None) => Err(Failure::Usage("give --checkpoint or --model".into())),
    }
}

fn run_synth(common: &Common, spec: Option<&Path>, count: usize, frames: usize, scenes: bool) -> Outcome {
    let cfg = load_config(common)?;
    let out = prepare_out(common)?;
    let specs: Option<Vec<SynthSpec>> = match spec {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            let value: serde_json::Value = serde_json::from_str(&text).map_err(Error::from)?;
            let list = if value.is_array() { value } else { serde_json::Value::Array(vec![value]) };
            Some(serde_json::from_value(list).map_err(Error::from)?)
        }
        None => None,
    };
    if scenes {
        let specs = specs.ok_or_else(|| Failure::Usage("--scenes needs --spec".into()))?;
        let frames = synth_scenes(&specs, cfg.seed);
        write_scenes(&out.join("scenes.jsonl"), &frames)?;
        println!("wrote {} scenes to {}", frames.len(), out.join("scenes.jsonl").display());
        return Ok(());
    }
    let tracklets: Vec<Tracklet> = match specs {
        Some(specs) => specs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut t = synth_tracklet(s, cfg.seed.wrapping_add(i as u64));
                t.object_id = i.to_string();
                t
            })
            .collect(),
        None => {
            if count == 0 || frames < 2 {
                return Err(Failure::Usage("a suite needs --count >= 1 and --frames >= 2".into()));
            }
            let opts = SuiteOptions {
                frames,
                ..SuiteOptions::default()
            };
            synth_suite(&opts, count, cfg.seed)
        }
    };
    write_dataset(out, &tracklets)?;
    println!("wrote {} tracklets to {}", tracklets.len(), out.display());
    Ok(())
}

fn run_build(common: &Common, scenes: &Path, min_points: usize, min_len: usize) -> Outcome {
    let frames = read_scenes(scenes)?;
    let tracklets = build_tracklets(&frames, min_points, min_len)?;
    if tracklets.is_empty() {
        return Err(Failure::Usage("no object satisfies the tracklet rules".into()));
    }
    let out = prepare_out(common)?;
    write_dataset(out, &tracklets)?;
    println!("built {} tracklets from {} scenes into {}", tracklets.len(), frames.len(), out.display());
    Ok(())
}

fn run_train(common: &Common, data: Option<&Path>, epochs: Option<usize>, init: Option<&Path>) -> Outcome {
    let mut cfg = load_config(common)?;
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    let init = match init {
        Some(path) => {
            let (saved, net) = TrackerNet::<f32>::from_checkpoint(&Checkpoint::read(path)?)?;
            if saved.model != cfg.model {
                return Err(Failure::Usage("the --init checkpoint was built for a different model config".into()));
            }
            Some(net)
        }
        None => None,
    };
    let tracklets = match data {
        Some(d) => read_dataset(d)?,
        None if cfg.epochs == 0 => Vec::new(),
        None => return Err(Failure::Usage("training needs --data".into())),
    };
    let out = prepare_out(common)?;
    let outcome = train(&tracklets, &cfg, init, |e, _| {
        println!("epoch {:>4}  loss {:.6}  lr {:.2e}  samples {}", e.epoch + 1, e.loss.total, e.lr, e.samples);
        true
    })?;
    outcome.model.to_checkpoint(&cfg).write(&out.join("model.ckpt"))?;
    write_metric_log(&out.join("metrics.csv"), &outcome.log)?;
    println!("wrote {}", out.join("model.ckpt").display());
    Ok(())
}

fn run_track(common: &Common, choice: &ModelChoice, dir: &Path) -> Outcome {
    let cfg = load_config(common)?;
    let (model, model_cfg, needs_truth) = load_model(choice, &cfg)?;
    let t = read_tracklet(dir)?;
    let gt = t.boxes();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let settings = TrackSettings::from(&model_cfg);
    let result = track_sequence(&t.clouds(), &gt[0], model.as_ref(), &settings, needs_truth.then_some(&gt[..]), &mut rng)?;
    let mut csv = String::from("frame,x,y,z,l,w,h,yaw,flagged\n");
    for (f, (b, flag)) in result.boxes.iter().zip(&result.flagged).enumerate() {
        let v = b.to_array();
        csv.push_str(&format!(
            "{f},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
            v[0], v[1], v[2], v[3], v[4], v[5], v[6], *flag as u8
        ));
    }
    let out = prepare_out(common)?;
    write_text(&out.join("track.csv"), &csv)?;
    println!("tracked {} frames into {}", result.boxes.len(), out.join("track.csv").display());
    Ok(())
}

fn run_eval(common: &Common, choice: &ModelChoice, data: &Path, threads: Option<usize>) -> Outcome {
    let cfg = load_config(common)?;
    let (model, model_cfg, needs_truth) = load_model(choice, &cfg)?;
    let tracklets = read_dataset(data)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    let settings = TrackSettings::from(&model_cfg);
    let (report, records) =
        pool.install(|| evaluate(&tracklets, model.as_ref(), &settings, cfg.seed, needs_truth))?;
    let out = prepare_out(common)?;
    write_json(&out.join("report.json"), &report)?;
    write_frame_csv(&out.join("frames.csv"), &records)?;
    print!("{}", report.table());
    for f in &report.failures {
        eprintln!("tracklet {} ({}) failed: {}", f.tracklet, f.object_id, f.message);
    }
    Ok(())
}

#[derive(Serialize)]
struct CheckReport {
    checks: Vec<CheckOutcome>,
    sampling: reltrack::checks::DirectionReport,
}

fn run_check(common: &Common, trials: usize) -> Outcome {
    let seed = common.seed.unwrap_or(0);
    let mut checks = gradient_suite(seed)?;
    let worst = checks.iter().map(|c| c.value).fold(0.0, f64::max);
    let gradients_ok = checks.iter().all(|c| c.passed);
    checks.extend(oracle_suite(seed)?);
    for c in &checks {
        println!(
            "{:<4} {:<9} {:<34} {:>12.3e} (limit {:.0e})",
            if c.passed { "ok" } else { "FAIL" },
            c.suite,
            c.name,
            c.value,
            c.limit
        );
    }
    let sampling = sampling_direction(trials, seed)?;
    println!(
        "foreground kept over {} seeds (share {:.3}): random {:.3}  dfps {:.3}  ffps {:.3}  ras {:.3}  hybrid {:.3}",
        sampling.trials, sampling.foreground_share, sampling.random, sampling.dfps, sampling.ffps, sampling.ras, sampling.hybrid
    );
    if gradients_ok {
        println!("all gradient checks < 1e-4 (worst {worst:.2e})");
    }
    let out = prepare_out(common)?;
    write_json(&out.join("check.json"), &CheckReport { checks: checks.clone(), sampling })?;
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} checks failed")));
    }
    Ok(())
}

fn run_bench(common: &Common, iterations: usize) -> Outcome {
    let cfg = load_config(common)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    let report = pool.install(|| bench_forward(&cfg, iterations, cfg.seed))?;
    print!("{}", report.table());
    let out = prepare_out(common)?;
    write_json(&out.join("bench.json"), &report)
}

fn dispatch(cli: Cli) -> Outcome {
    match &cli.command {
        Command::Synth {
            common,
            spec,
            count,
            frames,
            scenes,
        } => run_synth(common, spec.as_deref(), *count, *frames, *scenes),
        Command::BuildDataset {
            common,
            scenes,
            min_points,
            min_len,
        } => run_build(common, scenes, *min_points, *min_len),
        Command::Train {
            common,
            data,
            epochs,
            init,
        } => run_train(common, data.as_deref(), *epochs, init.as_deref()),
        Command::Track {
            common,
            model,
            tracklet,
        } => run_track(common, model, tracklet),
        Command::Eval {
            common,
            model,
            data,
            threads,
        } => run_eval(common, model, data, *threads),
        Command::Check { common, trials } => run_check(common, *trials),
        Command::Bench { common, iterations } => run_bench(common, *iterations),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let informational = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return ExitCode::from(if informational { 0 } else { 1 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
