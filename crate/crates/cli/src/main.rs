use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use geoformer_core::experiment::{
    self, cell_dir, forecast, load_or_simulate, mc_forecast, run_cell, run_suite, CellSpec, ExperimentConfig,
    ExperimentKind, Forecaster, CHECKPOINT, TRAIN_LOG_CSV,
};
use geoformer_core::io;
use geoformer_core::model::Variant;
use geoformer_core::stats::{diebold_mariano_differential, pit_uniformity, pit_values, summarize, SpatialWeights};

mod svg;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const OUTPUT_ENV: &str = "GEOFORMER_OUTPUT_DIR";

#[derive(Parser)]
#[command(name = "geoformer", version, about = "Geostatistical attention experiments on simulated random fields")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON configuration file; missing keys keep their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one configuration leaf by dotted path, e.g. sim.rho_true=0.3.
    #[arg(long = "set", global = true, value_name = "K=V")]
    overrides: Vec<String>,
    /// Master seed for simulation, initialisation and batching.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// 10×10 lattice, 600 steps, 5 replicates.
    #[arg(long, global = true)]
    desk_scale: bool,
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    /// Output directory (falls back to $GEOFORMER_OUTPUT_DIR).
    #[arg(long, global = true, value_name = "PATH")]
    output_dir: Option<PathBuf>,
    /// Render SVG figures from the experiment tables.
    #[arg(long, global = true)]
    emit_svg: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Geo,
    Vanilla,
}

impl From<ModelArg> for Variant {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Geo => Variant::Geo,
            ModelArg::Vanilla => Variant::Vanilla,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    Kriging,
    HistoricalAverage,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate every replicate into <output>/data.
    Simulate,
    /// Train one model on one replicate and write its checkpoint and log.
    Train {
        #[arg(long, value_enum, default_value = "geo")]
        model: ModelArg,
        #[arg(long, default_value_t = 0)]
        replicate: usize,
        /// Training block length (defaults to primary_t_train).
        #[arg(long)]
        t_train: Option<usize>,
    },
    /// Forecast the test block from a checkpoint or a baseline.
    Evaluate {
        #[arg(long, conflicts_with = "baseline", required_unless_present = "baseline")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        baseline: Option<BaselineArg>,
        #[arg(long, default_value_t = 0)]
        replicate: usize,
        #[arg(long)]
        t_train: Option<usize>,
        /// Forecast horizon; models unroll recursively beyond 1.
        #[arg(long, default_value_t = 1)]
        horizon: usize,
    },
    /// Run an experiment and print one verdict per acceptance criterion.
    Experiment {
        /// Overrides the configured experiment.
        #[arg(value_parser = parse_kind)]
        kind: Option<ExperimentKind>,
    },
    /// Forecast diagnostics for saved forecast CSVs.
    Validate {
        #[arg(required = true)]
        forecasts: Vec<PathBuf>,
        /// Site coordinates for Moran's I.
        #[arg(long)]
        locations: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        bins: usize,
    },
}

fn parse_kind(s: &str) -> Result<ExperimentKind, String> {
    s.parse().map_err(|e: geoformer_core::Error| e.to_string())
}

enum Failure {
    Input(String),
    Runtime(String),
    Acceptance,
}

impl From<geoformer_core::Error> for Failure {
    fn from(e: geoformer_core::Error) -> Self {
        if e.is_input_error() {
            Failure::Input(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Acceptance) => ExitCode::from(3),
    }
}

fn load_config(c: &Common) -> CliResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    let mut dir_from_file = false;
    if let Some(path) = &c.config {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
        let raw: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
        dir_from_file = raw.get("output_dir").is_some();
        cfg = serde_json::from_value(raw).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    }
    if c.desk_scale {
        cfg.apply_desk_scale();
    }
    if let Some(s) = c.seed {
        cfg.sim.seed = s;
        cfg.geo.seed = s.wrapping_add(1);
        cfg.vanilla.seed = s.wrapping_add(2);
        cfg.train.seed = s.wrapping_add(3);
    }
    if let Some(j) = c.jobs {
        cfg.jobs = j;
    }
    if let Some(d) = &c.output_dir {
        cfg.output_dir = d.clone();
    } else if !dir_from_file {
        if let Some(d) = std::env::var_os(OUTPUT_ENV) {
            cfg.output_dir = PathBuf::from(d);
        }
    }
    for kv in &c.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Input(format!("--set expects K=V, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = load_config(&cli.common)?;
    if let Command::Experiment { kind: Some(k) } = &cli.command {
        cfg.experiment = *k;
    }
    if !matches!(cli.command, Command::Validate { .. }) {
        cfg.validate()?;
    }
    let root = cfg.output_dir.clone();
    match cli.command {
        Command::Simulate => {
            for r in 0..cfg.sim.n_replicates {
                load_or_simulate(&cfg, &root, r)?;
                println!("{}", experiment::dataset_dir(&root, r).display());
            }
        }
        Command::Train { model, replicate, t_train } => {
            check_replicate(&cfg, replicate)?;
            let ds = load_or_simulate(&cfg, &root, replicate)?;
            let spec = CellSpec {
                replicate,
                variant: model.into(),
                t_train: t_train.unwrap_or(cfg.primary_t_train),
                horizons: 1,
                monte_carlo: false,
                attention: false,
            };
            let log = run_cell(&ds, &spec, &cfg, &root)?;
            let dir = cell_dir(&root, replicate, spec.variant, spec.t_train);
            eprintln!(
                "trained {} epochs, best epoch {:?}, best val mse {:?}; log {}",
                log.records.len(),
                log.best_epoch,
                log.best_val_mse,
                dir.join(TRAIN_LOG_CSV).display()
            );
            println!("{}", dir.join(CHECKPOINT).with_extension("json").display());
        }
        Command::Evaluate { checkpoint, baseline, replicate, t_train, horizon } => {
            check_replicate(&cfg, replicate)?;
            let ds = load_or_simulate(&cfg, &root, replicate)?;
            let t_train = t_train.unwrap_or(cfg.primary_t_train);
            let loaded = match &checkpoint {
                Some(p) => Some(io::load_checkpoint(p)?.0),
                None => None,
            };
            let source = match (&loaded, baseline) {
                (Some(m), _) => Forecaster::Model(m),
                (None, Some(BaselineArg::Kriging)) => Forecaster::Kriging,
                (None, Some(BaselineArg::HistoricalAverage)) => Forecaster::HistoricalAverage,
                (None, None) => return Err(Failure::Input("need --checkpoint or --baseline".into())),
            };
            if let Forecaster::Model(m) = source {
                if m.grid() != &ds.grid {
                    return Err(Failure::Input("checkpoint sensor layout differs from the dataset".into()));
                }
            }
            let r = forecast(&ds, &cfg, t_train, source, horizon)?;
            let weights = SpatialWeights::inverse_distance(&ds.grid)?;
            let mut metrics = summarize(&r, Some(&weights))?;
            if let (Forecaster::Model(m), 1) = (source, horizon) {
                if m.config().dropout_p > 0.0 && m.config().n_mc > 1 {
                    let mc = summarize(&mc_forecast(&ds, &cfg, t_train, m, cfg.train.seed)?, None)?;
                    metrics.crps = mc.crps;
                    metrics.pit_ks = mc.pit_ks;
                    metrics.pit_histogram = mc.pit_histogram;
                    metrics.pit_outer_mass = mc.pit_outer_mass;
                }
            }
            let dir = root
                .join("eval")
                .join(format!("rep{replicate:02}"))
                .join(format!("{}_t{t_train}_h{horizon}", source.name()));
            let fpath = dir.join("forecast.csv");
            io::save_forecast(&fpath, &r)?;
            io::save_metrics(&dir.join("metrics.json"), &metrics)?;
            eprintln!("rmse {:.4}, mae {:.4}", metrics.rmse, metrics.mae);
            println!("{}", fpath.display());
        }
        Command::Experiment { .. } => {
            std::fs::create_dir_all(&root).map_err(|e| Failure::Input(format!("{}: {e}", root.display())))?;
            let summary = run_suite(&cfg, &|line: &str| eprintln!("{line}"))?;
            for c in &summary.criteria {
                println!("criterion {} ({}): {} | {}", c.id, c.name, c.verdict, c.detail);
            }
            for f in &summary.failures {
                eprintln!("failed job {}: {}", f.job, f.error);
            }
            if cli.common.emit_svg {
                for p in svg::render_figures(&root)? {
                    eprintln!("wrote {}", p.display());
                }
            }
            println!("{}", root.join(experiment::SUMMARY_JSON).display());
            if !summary.all_passed() {
                return Err(Failure::Acceptance);
            }
        }
        Command::Validate { forecasts, locations, bins } => validate(&forecasts, locations.as_deref(), bins)?,
    }
    Ok(())
}

fn check_replicate(cfg: &ExperimentConfig, r: usize) -> CliResult<()> {
    if r >= cfg.sim.n_replicates {
        return Err(Failure::Input(format!("replicate {r} out of range (n_replicates = {})", cfg.sim.n_replicates)));
    }
    Ok(())
}

/// Metrics per forecast file, PIT summaries where variances exist and a
/// Diebold–Mariano comparison of the first two files.
fn validate(paths: &[PathBuf], locations: Option<&Path>, bins: usize) -> CliResult<()> {
    let weights = match locations {
        Some(p) => Some(SpatialWeights::inverse_distance(&io::load_locations(p)?)?),
        None => None,
    };
    let mut out = serde_json::Map::new();
    let mut loaded = Vec::new();
    for p in paths {
        let r = io::load_forecast(p)?;
        let w = weights.as_ref().filter(|w| w.n() == r.n);
        if weights.is_some() && w.is_none() {
            return Err(Failure::Input(format!("{}: site count differs from --locations", p.display())));
        }
        let mut entry = serde_json::to_value(summarize(&r, w)?).map_err(|e| Failure::Runtime(e.to_string()))?;
        if r.variances.is_some() {
            let pit = pit_uniformity(&pit_values(&r)?, bins)?;
            entry["pit"] = serde_json::to_value(pit).map_err(|e| Failure::Runtime(e.to_string()))?;
        }
        out.insert(p.display().to_string(), entry);
        loaded.push(r);
    }
    if let [a, b, ..] = loaded.as_slice() {
        if a.predictions.len() != b.predictions.len() || a.targets != b.targets {
            return Err(Failure::Input("the first two forecasts cover different targets".into()));
        }
        let d: Vec<f64> = a.step_mse().iter().zip(b.step_mse()).map(|(x, y)| x - y).collect();
        let dm = diebold_mariano_differential(&d, a.horizon.max(b.horizon) - 1)?;
        out.insert("diebold_mariano".into(), serde_json::to_value(dm).map_err(|e| Failure::Runtime(e.to_string()))?);
    }
    println!("{}", serde_json::to_string_pretty(&out).map_err(|e| Failure::Runtime(e.to_string()))?);
    Ok(())
}
