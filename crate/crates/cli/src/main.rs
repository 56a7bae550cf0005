use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use ftquad_core::experiments::{
    detect_bench, failure_rate, run_track, DetectBenchConfig, FailureMode, FailureRateConfig, ScenarioConfig,
};
use ftquad_core::fd::{generate_fd_dataset, train_fd, FdDataset, FdGenConfig, FdModel, FdStage, FdTrainConfig};
use ftquad_core::hash::config_hash;
use ftquad_core::ppo::{train_controller, write_training_log, BundleManifest, PpoConfig, Scenario, TrainingWorld};
use ftquad_core::supervisor::{write_events, ControllerSet, FdModels};

#[derive(Parser)]
#[command(name = "ftquad", version, about = "Fault-tolerant quadcopter control experiments")]
struct Cli {
    /// JSON configuration for the chosen command.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a PPO controller.
    Train {
        /// 4prop, 3prop, 3prop-f<k>, 2prop-opposing or 2prop-opposing-f13|f24
        #[arg(long, value_parser = parse_scenario)]
        scenario: Scenario,
        #[arg(long)]
        epochs: Option<usize>,
        /// Record real elapsed time in the log instead of zeros.
        #[arg(long)]
        wall_clock: bool,
    },
    /// Simulate failures and write a fault-detection dataset.
    GenFdData {
        /// 4to3 or 3to2
        #[arg(long)]
        scenario: FdStage,
        #[arg(long, default_value_t = 50)]
        runs: usize,
        /// Directory with trained controllers; defaults to --out.
        #[arg(long)]
        controllers: Option<PathBuf>,
    },
    /// Train a fault detector on a generated dataset.
    TrainFd {
        #[arg(long)]
        scenario: FdStage,
        #[arg(long)]
        epochs: Option<usize>,
        /// Dataset file; defaults to <out>/fd-<stage>.fqfd.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Fly the supervisor to a waypoint and log the trajectory.
    Track {
        /// Directory with controllers and detectors; defaults to --out.
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long, value_parser = parse_scenario)]
        scenario: Option<Scenario>,
        #[arg(long)]
        duration: Option<f64>,
        /// Propeller to fail; the step comes from the config or the seed.
        #[arg(long)]
        fail_prop: Option<usize>,
    },
    /// Measure detection latency for injected failures.
    DetectBench {
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Count crashes for isolated controllers or mid-flight failures.
    FailureRate {
        #[arg(long, default_value = "isolated")]
        mode: FailureMode,
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        runs: Option<usize>,
        /// Comma-separated target heights for midflight mode.
        #[arg(long, value_delimiter = ',')]
        heights: Option<Vec<f64>>,
        /// Controller flown in isolated mode.
        #[arg(long, value_parser = parse_scenario)]
        scenario: Option<Scenario>,
    },
}

fn parse_scenario(s: &str) -> Result<Scenario, String> {
    s.parse().map_err(|e: ftquad_core::Error| e.to_string())
}

/// Controller training settings read from `--config`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct TrainFile {
    ppo: PpoConfig,
    world: TrainingWorld,
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "inf".into(), |x| format!("{x:.2}"))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let out = cli.out.as_path();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let config = cli.config.as_deref();
    let seed = cli.seed;

    match cli.command {
        Command::Train {
            scenario,
            epochs,
            wall_clock,
        } => {
            let mut file: TrainFile = load_config(config)?;
            if let Some(e) = epochs {
                file.ppo.epochs_max = e;
            }
            let (bundle, log) = train_controller(scenario, &file.ppo, &file.world, seed, |row| {
                eprintln!(
                    "epoch {:>4}  cost {:.5}  value loss {:.3e}  surrogate {:+.4}",
                    row.epoch, row.mean_cost, row.value_loss, row.surrogate_loss
                );
            })?;
            let manifest = BundleManifest {
                scenario,
                config_hash: config_hash(&file),
                epochs: log.len(),
                seed,
            };
            bundle.save(out, &manifest)?;
            let log_path = out.join(format!("train-{}.csv", scenario.file_stem()));
            write_training_log(&log_path, &log, wall_clock)?;
            println!("trained {scenario} for {} epochs; log in {}", log.len(), log_path.display());
        }
        Command::GenFdData {
            scenario,
            runs,
            controllers,
        } => {
            let cfg: FdGenConfig = load_config(config)?;
            let dir = controllers.unwrap_or_else(|| out.to_path_buf());
            let set = ControllerSet::load_dir(&dir)?;
            let bundles: Vec<_> = set
                .scenarios()
                .into_iter()
                .filter(|s| match scenario {
                    FdStage::FourToThree => *s == Scenario::FourProp,
                    FdStage::ThreeToTwo => matches!(s, Scenario::ThreeProp { .. }),
                })
                .map(|s| set.get(&s.mask()).expect("listed scenario").clone())
                .collect();
            if bundles.is_empty() {
                bail!("no suitable controllers for {scenario} in {}", dir.display());
            }
            let data = generate_fd_dataset(scenario, &bundles, &cfg, runs, seed)?;
            let path = out.join(format!("fd-{scenario}.fqfd"));
            data.write(&path)?;
            println!(
                "wrote {} {scenario} windows (per class {:?}) to {}",
                data.samples.len(),
                data.class_counts(),
                path.display()
            );
        }
        Command::TrainFd {
            scenario,
            epochs,
            data,
        } => {
            let mut cfg: FdTrainConfig = load_config(config)?;
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            let data_path = data.unwrap_or_else(|| out.join(format!("fd-{scenario}.fqfd")));
            let dataset = FdDataset::read(&data_path).with_context(|| format!("reading {}", data_path.display()))?;
            if dataset.stage != scenario {
                bail!("{} holds {} data, not {scenario}", data_path.display(), dataset.stage);
            }
            let (model, report) = train_fd(&dataset, &cfg, seed)?;
            model.save(out.join(FdModel::file_name(scenario)))?;
            let mut w = csv::Writer::from_path(out.join(format!("fd-{scenario}-train.csv")))?;
            for row in &report.history {
                w.serialize(row)?;
            }
            w.flush()?;
            write_json(
                &out.join(format!("fd-{scenario}-report.json")),
                &serde_json::json!({ "config_hash": config_hash(&cfg), "seed": seed, "report": report }),
            )?;
            println!(
                "train accuracy {:.4}  held-out accuracy {:.4}",
                report.train_accuracy, report.heldout_accuracy
            );
        }
        Command::Track {
            models,
            scenario,
            duration,
            fail_prop,
        } => {
            let mut cfg: ScenarioConfig = load_config(config)?;
            if let Some(s) = scenario {
                cfg.scenario = s;
            }
            if let Some(d) = duration {
                cfg.duration_s = d;
            }
            if let Some(p) = fail_prop {
                let step = cfg.failure.and_then(|f| f.step);
                cfg.failure = Some(ftquad_core::experiments::FailureInjection { propeller: p, step });
            }
            let dir = models.unwrap_or_else(|| out.to_path_buf());
            let result = run_track(&ControllerSet::load_dir(&dir)?, &FdModels::load_dir(&dir)?, &cfg, seed)?;
            result.log.write(out.join("trajectory.csv"))?;
            write_events(BufWriter::new(fs::File::create(out.join("events.jsonl"))?), &result.events)?;
            write_json(
                &out.join("track-metrics.json"),
                &serde_json::json!({
                    "config_hash": config_hash(&cfg),
                    "seed": seed,
                    "injection_step": result.injection_step,
                    "metrics": result.metrics,
                }),
            )?;
            let m = &result.metrics;
            println!(
                "steps {}  crashed {}  max |x| {:.3}  max |y| {:.3}  max |z| {:.3}  final error {:.3}  mean |w_z| {:.3}",
                m.steps,
                m.crashed,
                m.max_abs_x_error,
                m.max_abs_y_error,
                m.max_abs_z_error,
                m.final_position_error,
                m.mean_abs_yaw_rate
            );
        }
        Command::DetectBench { models, runs } => {
            let mut cfg: DetectBenchConfig = load_config(config)?;
            if let Some(n) = runs {
                cfg.n_runs = n;
            }
            let dir = models.unwrap_or_else(|| out.to_path_buf());
            let report = detect_bench(&ControllerSet::load_dir(&dir)?, &FdModels::load_dir(&dir)?, &cfg, seed)?;
            write_json(&out.join("detect-bench.json"), &report)?;
            println!("stage  runs  detected  correct  false_alarms  miss_rate  mean_s  median_s");
            for s in &report.stages {
                println!(
                    "{:<5}  {:>4}  {:>8}  {:>7}  {:>12}  {:>9.3}  {:>6}  {:>8}",
                    s.stage,
                    s.runs,
                    s.detected,
                    s.correct,
                    s.false_alarms,
                    s.miss_rate,
                    fmt_opt(s.mean_latency_s),
                    fmt_opt(s.median_latency_s)
                );
            }
        }
        Command::FailureRate {
            mode,
            models,
            runs,
            heights,
            scenario,
        } => {
            let mut cfg: FailureRateConfig = load_config(config)?;
            cfg.mode = mode;
            if let Some(n) = runs {
                cfg.n_runs = n;
            }
            if let Some(h) = heights {
                cfg.heights = h;
            }
            if let Some(s) = scenario {
                cfg.scenario = s;
            }
            let dir = models.unwrap_or_else(|| out.to_path_buf());
            let report = failure_rate(&ControllerSet::load_dir(&dir)?, &FdModels::load_dir(&dir)?, &cfg, seed)?;
            let name = match mode {
                FailureMode::Isolated => "failure-rate-isolated.json",
                FailureMode::Midflight => "failure-rate-midflight.json",
            };
            write_json(&out.join(name), &report)?;
            println!("label     scenario  height  runs  crashes  rate");
            for r in &report.rows {
                println!(
                    "{:<8}  {:<8}  {:>6.2}  {:>4}  {:>7}  {:.3}",
                    r.label, r.scenario, r.height, r.runs, r.crashes, r.failure_rate
                );
            }
        }
    }
    Ok(())
}
