//! Experiment suite: per-replicate training cells, baselines, persisted
//! artifacts and the acceptance verdicts derived from them.
//!
//! Running a suite writes every forecast, training log and checkpoint to
//! the output directory first; the tables and `summary.json` are then
//! computed by [`summarize_output`] from those files alone, so the verdicts
//! can be recomputed later without rerunning anything.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::baselines::{historical_average, KrigingOracle};
use crate::checks::{run_property_suite, CheckOutcome};
use crate::error::{Error, Result};
use crate::grf_sim::{simulate_replicate, split_tail_test, SimConfig, StDataset, WindowSet};
use crate::io;
use crate::model::{GeoFormer, ModelConfig, Variant};
use crate::stats::{
    diebold_mariano_differential, mean_morans_i, pit_uniformity, pit_values, rmse, summarize, DmResult,
    ForecastResult, MetricSummary, PitSummary, SpatialWeights,
};
use crate::training::{train, TrainConfig, TrainLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Variography,
    SampleEfficiency,
    HorizonDecay,
    ResidualWhitening,
    Calibration,
    FullTable,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 6] = [
        Self::Variography,
        Self::SampleEfficiency,
        Self::HorizonDecay,
        Self::ResidualWhitening,
        Self::Calibration,
        Self::FullTable,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Variography => "variography",
            Self::SampleEfficiency => "sample_efficiency",
            Self::HorizonDecay => "horizon_decay",
            Self::ResidualWhitening => "residual_whitening",
            Self::Calibration => "calibration",
            Self::FullTable => "full_table",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == key)
            .ok_or_else(|| Error::config("experiment", format!("unknown experiment {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub sim: SimConfig,
    pub geo: ModelConfig,
    pub vanilla: ModelConfig,
    pub train: TrainConfig,
    pub experiment: ExperimentKind,
    pub output_dir: PathBuf,
    pub desk_scale: bool,
    /// Training-set sizes compared in the sample-efficiency table.
    pub t_train_sizes: Vec<usize>,
    /// Training size used for every other experiment.
    pub primary_t_train: usize,
    pub t_test: usize,
    pub max_horizon: usize,
    pub kriging_depth: usize,
    pub pit_bins: usize,
    /// Worker threads for the cell pool.
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            geo: ModelConfig::with_variant(Variant::Geo),
            vanilla: ModelConfig::with_variant(Variant::Vanilla),
            train: TrainConfig::default(),
            experiment: ExperimentKind::FullTable,
            output_dir: PathBuf::from("geoformer-output"),
            desk_scale: false,
            t_train_sizes: vec![100, 500, 1500],
            primary_t_train: 1500,
            t_test: 500,
            max_horizon: 4,
            kriging_depth: crate::baselines::DEFAULT_CONDITIONING_DEPTH,
            pit_bins: 10,
            jobs: 1,
        }
    }
}

impl ExperimentConfig {
    /// Desk-scale suite: 10×10 lattice, 600 steps, 5 replicates, training
    /// sizes 100 and 500 against the final 100 steps, at most 25 epochs.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.apply_desk_scale();
        c
    }

    pub fn apply_desk_scale(&mut self) {
        let seed = self.sim.seed;
        self.sim = SimConfig {
            seed,
            ..SimConfig::desk_scale()
        };
        self.desk_scale = true;
        self.t_train_sizes = vec![100, 500];
        self.primary_t_train = 500;
        self.t_test = 100;
        self.train.max_epochs = 25;
        self.train.early_stop_patience = Some(8);
    }

    /// Sets one leaf by dotted path, e.g. `sim.rho_true` = `0.3`. The value
    /// is parsed as JSON and falls back to a plain string.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut root = serde_json::to_value(&*self)?;
        let mut node = &mut root;
        for part in key.split('.') {
            node = node
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::config(key, "no such configuration key"))?;
        }
        *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
        *self = serde_json::from_value(root).map_err(|e| Error::config(key, e.to_string()))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.geo.validate()?;
        self.vanilla.validate()?;
        self.train.validate()?;
        if self.geo.variant != Variant::Geo || self.vanilla.variant != Variant::Vanilla {
            return Err(Error::config("geo.variant / vanilla.variant", "must be geo and vanilla respectively"));
        }
        if self.geo.lookback != self.vanilla.lookback {
            return Err(Error::config("vanilla.lookback", "must equal geo.lookback"));
        }
        if self.t_train_sizes.is_empty() || !self.t_train_sizes.contains(&self.primary_t_train) {
            return Err(Error::config("primary_t_train", "must be one of t_train_sizes"));
        }
        let longest = self.t_train_sizes.iter().copied().max().unwrap_or(0);
        if longest + self.t_test > self.sim.t_steps {
            return Err(Error::config(
                "t_train_sizes",
                format!(
                    "largest training size {longest} plus t_test {} exceeds sim.t_steps {}",
                    self.t_test, self.sim.t_steps
                ),
            ));
        }
        if self.t_train_sizes.iter().any(|&t| t <= self.geo.lookback) {
            return Err(Error::config("t_train_sizes", "every size must exceed the lookback"));
        }
        if self.max_horizon == 0 || self.t_test <= self.max_horizon {
            return Err(Error::config("max_horizon", "must be >= 1 and below t_test"));
        }
        if self.kriging_depth == 0 || self.kriging_depth > self.geo.lookback {
            return Err(Error::config("kriging_depth", "must lie in 1..=lookback"));
        }
        if self.pit_bins < 2 {
            return Err(Error::config("pit_bins", "must be >= 2"));
        }
        if self.jobs == 0 {
            return Err(Error::config("jobs", "must be >= 1"));
        }
        Ok(())
    }

    fn model_config(&self, variant: Variant, replicate: usize) -> ModelConfig {
        let base = match variant {
            Variant::Geo => &self.geo,
            Variant::Vanilla => &self.vanilla,
        };
        ModelConfig {
            seed: base.seed.wrapping_add(1000 * replicate as u64),
            ..base.clone()
        }
    }

    fn train_config(&self, replicate: usize) -> TrainConfig {
        TrainConfig {
            seed: self.train.seed.wrapping_add(1000 * replicate as u64),
            ..self.train.clone()
        }
    }

    fn needs_all_sizes(&self) -> bool {
        matches!(self.experiment, ExperimentKind::SampleEfficiency | ExperimentKind::FullTable)
    }

    fn variants(&self) -> Vec<Variant> {
        match self.experiment {
            ExperimentKind::Variography => vec![Variant::Geo],
            _ => vec![Variant::Geo, Variant::Vanilla],
        }
    }

    fn wants(&self, what: Extra) -> bool {
        use ExperimentKind::*;
        match what {
            Extra::Recursive => matches!(self.experiment, HorizonDecay | FullTable),
            Extra::MonteCarlo => matches!(self.experiment, Calibration | FullTable),
            Extra::Baselines => matches!(self.experiment, HorizonDecay | ResidualWhitening | Calibration | FullTable),
        }
    }
}

#[derive(Clone, Copy)]
enum Extra {
    Recursive,
    MonteCarlo,
    Baselines,
}

/// One (replicate, model, training size) unit of work.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellSpec {
    pub replicate: usize,
    pub variant: Variant,
    pub t_train: usize,
    pub horizons: usize,
    pub monte_carlo: bool,
    pub attention: bool,
}

pub fn plan_cells(cfg: &ExperimentConfig) -> Vec<CellSpec> {
    let sizes: Vec<usize> = if cfg.needs_all_sizes() {
        cfg.t_train_sizes.clone()
    } else {
        vec![cfg.primary_t_train]
    };
    let mut out = Vec::new();
    for replicate in 0..cfg.sim.n_replicates {
        for &t_train in &sizes {
            for variant in cfg.variants() {
                let primary = t_train == cfg.primary_t_train;
                out.push(CellSpec {
                    replicate,
                    variant,
                    t_train,
                    horizons: if primary && cfg.wants(Extra::Recursive) { cfg.max_horizon } else { 1 },
                    monte_carlo: primary && cfg.wants(Extra::MonteCarlo),
                    attention: primary && replicate == 0,
                });
            }
        }
    }
    out
}

fn model_slug(variant: Variant) -> &'static str {
    match variant {
        Variant::Geo => "geo",
        Variant::Vanilla => "vanilla",
    }
}

pub fn replicate_dir(root: &Path, replicate: usize) -> PathBuf {
    root.join(format!("rep{replicate:02}"))
}

pub fn dataset_dir(root: &Path, replicate: usize) -> PathBuf {
    root.join("data").join(format!("rep{replicate:02}"))
}

/// Loads the replicate saved under `root` when it was generated with the
/// same simulation settings; otherwise simulates and saves it.
pub fn load_or_simulate(cfg: &ExperimentConfig, root: &Path, replicate: usize) -> Result<StDataset> {
    let dir = dataset_dir(root, replicate);
    if let Ok(meta) = io::read_json::<io::DatasetMeta>(&dir.join(io::META_JSON)) {
        if meta.sim == cfg.sim && meta.replicate_id == replicate {
            return io::load_dataset(&dir);
        }
    }
    let ds = simulate_replicate(&cfg.sim, replicate)?;
    io::save_dataset(&dir, &ds)?;
    Ok(ds)
}

pub fn cell_dir(root: &Path, replicate: usize, variant: Variant, t_train: usize) -> PathBuf {
    replicate_dir(root, replicate).join(format!("{}_t{t_train}", model_slug(variant)))
}

pub fn forecast_path(dir: &Path, horizon: usize) -> PathBuf {
    dir.join(format!("forecast_h{horizon}.csv"))
}

pub const MC_FORECAST: &str = "forecast_mc.csv";
pub const TRAIN_LOG_CSV: &str = "trainlog.csv";
pub const TRAIN_LOG_JSON: &str = "trainlog.json";
pub const CHECKPOINT: &str = "checkpoint";
pub const SUMMARY_JSON: &str = "summary.json";

/// Horizon-`h` targets and matching rows of `preds` for the test windows
/// whose `h`-step target still lies inside the series.
fn horizon_result(
    name: &str,
    ds: &StDataset,
    test: &WindowSet,
    h: usize,
    preds: impl Fn(usize) -> Vec<f64>,
    var: Option<&dyn Fn(usize) -> Vec<f64>>,
) -> Result<ForecastResult> {
    let usable: Vec<usize> = (0..test.len())
        .filter(|&k| test.targets()[k] + h - 1 < ds.t_steps())
        .collect();
    let mut p = Vec::new();
    let mut y = Vec::new();
    let mut v = var.map(|_| Vec::new());
    for &k in &usable {
        p.extend(preds(k));
        y.extend_from_slice(ds.at(test.targets()[k] + h - 1));
        if let (Some(acc), Some(f)) = (v.as_mut(), var) {
            acc.extend(f(k));
        }
    }
    ForecastResult::new(name, h, ds.n(), p, v, y)
}

/// One-step MC-dropout predictive mean and variance over the test block.
pub fn mc_forecast(ds: &StDataset, cfg: &ExperimentConfig, t_train: usize, model: &GeoFormer, seed: u64) -> Result<ForecastResult> {
    let sp = split_tail_test(ds, t_train, cfg.t_test, model.config().lookback)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means = Vec::with_capacity(sp.test.len());
    let mut vars = Vec::with_capacity(sp.test.len());
    for k in 0..sp.test.len() {
        let (m, v) = model.predict_distribution(&sp.test.input(k), model.config().n_mc, &mut rng)?;
        means.push(m);
        vars.push(v);
    }
    let var_of = |k: usize| vars[k].clone();
    horizon_result(model_slug(model.config().variant), ds, &sp.test, 1, |k| means[k].clone(), Some(&var_of))
}

/// Trains one model, writes its log, checkpoint and forecasts, and returns
/// the training log.
pub fn run_cell(ds: &StDataset, spec: &CellSpec, cfg: &ExperimentConfig, root: &Path) -> Result<TrainLog> {
    let dir = cell_dir(root, spec.replicate, spec.variant, spec.t_train);
    let lookback = cfg.geo.lookback;
    let sp = split_tail_test(ds, spec.t_train, cfg.t_test, lookback)?;
    let mut model = GeoFormer::new(cfg.model_config(spec.variant, spec.replicate), ds.grid.clone())?;
    let tcfg = cfg.train_config(spec.replicate);
    let log = train(&mut model, &sp.train, &tcfg)?;
    io::save_train_log(&dir.join(TRAIN_LOG_CSV), &log, spec.variant)?;
    io::write_json(&dir.join(TRAIN_LOG_JSON), &log)?;
    io::save_checkpoint(&dir.join(CHECKPOINT), &model, log.records.len(), tcfg.seed)?;
    if let Some(reason) = &log.diverged {
        return Err(Error::Diverged {
            epoch: log.records.len(),
            reason: reason.clone(),
        });
    }

    let name = model_slug(spec.variant);
    let batch = cfg.train.batch_size;
    let weights = SpatialWeights::inverse_distance(&ds.grid)?;
    if spec.horizons > 1 {
        let rec = model.predict_recursive(&sp.test, spec.horizons, batch)?;
        for h in 1..=spec.horizons {
            let r = horizon_result(name, ds, &sp.test, h, |k| rec[k][h - 1].clone(), None)?;
            io::save_forecast(&forecast_path(&dir, h), &r)?;
        }
    } else {
        let one = model.predict_many(&sp.test, batch)?;
        let r = horizon_result(name, ds, &sp.test, 1, |k| one[k].clone(), None)?;
        io::save_forecast(&forecast_path(&dir, 1), &r)?;
    }
    let h1 = io::load_forecast(&forecast_path(&dir, 1))?;
    let mut metrics = summarize(&h1, Some(&weights))?;

    if spec.monte_carlo {
        let r = mc_forecast(ds, cfg, spec.t_train, &model, tcfg.seed ^ 0x6d63)?;
        io::save_forecast(&dir.join(MC_FORECAST), &r)?;
        let mc = summarize(&r, None)?;
        metrics.crps = mc.crps;
        metrics.pit_ks = mc.pit_ks;
        metrics.pit_outer_mass = mc.pit_outer_mass;
        metrics.pit_histogram = mc.pit_histogram;
    }
    io::save_metrics(&dir.join("metrics.json"), &metrics)?;

    if spec.attention {
        let (_, recs) = model.encoder_forward(&sp.test.input(0))?;
        io::save_attention_maps(&dir.join("attention"), &recs)?;
    }
    Ok(log)
}

/// Source of a point (and possibly variance) forecast.
#[derive(Clone, Copy)]
pub enum Forecaster<'a> {
    Model(&'a GeoFormer),
    /// Exact conditioning on the generating covariance at the configured depth.
    Kriging,
    /// Per-site training mean with the training variance.
    HistoricalAverage,
}

impl Forecaster<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Forecaster::Model(m) => model_slug(m.config().variant),
            Forecaster::Kriging => "kriging",
            Forecaster::HistoricalAverage => "historical_average",
        }
    }
}

/// Direct `horizon`-step forecasts over the shared tail test block of a
/// `t_train` split; models unroll recursively.
pub fn forecast(
    ds: &StDataset,
    cfg: &ExperimentConfig,
    t_train: usize,
    source: Forecaster<'_>,
    horizon: usize,
) -> Result<ForecastResult> {
    if horizon == 0 {
        return Err(Error::InvalidInput("horizon must be >= 1".into()));
    }
    let lookback = match source {
        Forecaster::Model(m) => m.config().lookback,
        _ => cfg.geo.lookback,
    };
    let sp = split_tail_test(ds, t_train, cfg.t_test, lookback)?;
    let name = source.name();
    match source {
        Forecaster::Model(m) => {
            let batch = cfg.train.batch_size;
            if horizon == 1 {
                let one = m.predict_many(&sp.test, batch)?;
                horizon_result(name, ds, &sp.test, 1, |k| one[k].clone(), None)
            } else {
                let rec = m.predict_recursive(&sp.test, horizon, batch)?;
                horizon_result(name, ds, &sp.test, horizon, |k| rec[k][horizon - 1].clone(), None)
            }
        }
        Forecaster::Kriging => {
            let oracle = KrigingOracle::with_horizon(&ds.grid, &ds.config, cfg.kriging_depth, horizon)?;
            let preds: Vec<(Vec<f64>, Vec<f64>)> = (0..sp.test.len())
                .map(|k| oracle.predict_window(&sp.test.input(k), lookback))
                .collect::<Result<_>>()?;
            let var_of = |k: usize| preds[k].1.clone();
            horizon_result(name, ds, &sp.test, horizon, |k| preds[k].0.clone(), Some(&var_of))
        }
        Forecaster::HistoricalAverage => {
            let n = ds.n();
            let start = ds.t_steps() - cfg.t_test - t_train;
            let block: Vec<f64> = (start..start + t_train).flat_map(|t| ds.at(t).to_vec()).collect();
            let mean = historical_average(&block, n)?;
            let mut var = vec![0.0; n];
            for row in block.chunks(n) {
                for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                    *v += (x - m) * (x - m);
                }
            }
            let denom = (t_train - 1).max(1) as f64;
            var.iter_mut().for_each(|v| *v = (*v / denom).max(f64::MIN_POSITIVE));
            let var_of = |_: usize| var.clone();
            horizon_result(name, ds, &sp.test, horizon, |_| mean.clone(), Some(&var_of))
        }
    }
}

/// Kriging-oracle and historical-average forecasts for one replicate.
pub fn run_baselines(ds: &StDataset, cfg: &ExperimentConfig, root: &Path) -> Result<()> {
    let rep = replicate_dir(root, ds.replicate_id);
    let weights = SpatialWeights::inverse_distance(&ds.grid)?;
    let horizons = if cfg.wants(Extra::Recursive) { cfg.max_horizon } else { 1 };
    for (source, hmax) in [(Forecaster::Kriging, horizons), (Forecaster::HistoricalAverage, 1)] {
        let dir = rep.join(source.name());
        for h in 1..=hmax {
            let r = forecast(ds, cfg, cfg.primary_t_train, source, h)?;
            io::save_forecast(&forecast_path(&dir, h), &r)?;
            if h == 1 {
                io::save_metrics(&dir.join("metrics.json"), &summarize(&r, Some(&weights))?)?;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobFailure {
    pub job: String,
    pub error: String,
}

/// Runs the configured experiment end to end and returns the summary.
///
/// `progress` receives one line per finished job.
pub fn run_suite(cfg: &ExperimentConfig, progress: &(dyn Fn(&str) + Sync)) -> Result<Summary> {
    cfg.validate()?;
    let root = cfg.output_dir.clone();
    std::fs::create_dir_all(&root)?;
    io::write_json(&root.join("config.json"), cfg)?;
    let t0 = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;

    let datasets: Vec<Result<StDataset>> = pool.install(|| {
        (0..cfg.sim.n_replicates)
            .into_par_iter()
            .map(|r| {
                let ds = simulate_replicate(&cfg.sim, r)?;
                io::save_dataset(&dataset_dir(&root, r), &ds)?;
                Ok(ds)
            })
            .collect()
    });
    let mut failures = Vec::new();
    for (r, d) in datasets.iter().enumerate() {
        if let Err(e) = d {
            failures.push(JobFailure {
                job: format!("simulate rep{r:02}"),
                error: e.to_string(),
            });
        }
    }

    enum Job {
        Cell(CellSpec),
        Baselines(usize),
    }
    let mut jobs: Vec<Job> = plan_cells(cfg).into_iter().map(Job::Cell).collect();
    if cfg.wants(Extra::Baselines) {
        jobs.extend((0..cfg.sim.n_replicates).map(Job::Baselines));
    }
    let results: Vec<(String, Result<()>)> = pool.install(|| {
        jobs.par_iter()
            .map(|job| {
                let (label, rep) = match job {
                    Job::Cell(s) => (format!("rep{:02} {} t{}", s.replicate, model_slug(s.variant), s.t_train), s.replicate),
                    Job::Baselines(r) => (format!("rep{r:02} baselines"), *r),
                };
                let started = Instant::now();
                let res = match &datasets[rep] {
                    Err(_) => Err(Error::InvalidInput("replicate simulation failed".into())),
                    Ok(ds) => match job {
                        Job::Cell(s) => run_cell(ds, s, cfg, &root).map(|log| {
                            progress(&format!(
                                "{label}: {} epochs, best val mse {:.4}, {:.1}s",
                                log.records.len(),
                                log.best_val_mse.unwrap_or(f64::NAN),
                                started.elapsed().as_secs_f64()
                            ));
                        }),
                        Job::Baselines(_) => run_baselines(ds, cfg, &root).map(|()| progress(&format!("{label}: done"))),
                    },
                };
                if let Err(e) = &res {
                    progress(&format!("{label}: FAILED {e}"));
                }
                (label, res)
            })
            .collect()
    });
    for (job, r) in results {
        if let Err(e) = r {
            failures.push(JobFailure { job, error: e.to_string() });
        }
    }
    io::write_json(&root.join("failures.json"), &failures)?;

    if cfg.experiment == ExperimentKind::FullTable {
        let checks = run_property_suite(cfg.sim.seed)?;
        io::write_json(&root.join("property_suite.json"), &checks)?;
        progress("property suite: done");
    }
    let mut summary = summarize_output(&root)?;
    summary.wall_seconds = Some(t0.elapsed().as_secs_f64());
    io::write_json(&root.join(SUMMARY_JSON), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    /// Fewer than three replicates produced the required artifacts.
    Indeterminate,
    /// The experiment that feeds this criterion was not run.
    NotRun,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::Indeterminate => "INDETERMINATE",
            Verdict::NotRun => "NOT RUN",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionVerdict {
    pub id: u8,
    pub name: String,
    pub verdict: Verdict,
    pub measured: BTreeMap<String, f64>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub experiment: ExperimentKind,
    pub desk_scale: bool,
    pub replicates: usize,
    pub criteria: Vec<CriterionVerdict>,
    pub failures: Vec<JobFailure>,
    pub wall_seconds: Option<f64>,
}

impl Summary {
    /// True when no evaluated criterion failed or was indeterminate.
    pub fn all_passed(&self) -> bool {
        self.criteria
            .iter()
            .all(|c| matches!(c.verdict, Verdict::Pass | Verdict::NotRun))
    }
}

const MIN_REPLICATES: usize = 3;

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn fmt_f(x: f64) -> String {
    format!("{x}")
}

fn table(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    io::write_csv(path, &header.iter().map(|s| (*s).to_owned()).collect::<Vec<_>>(), &rows)
}

/// Artifacts of one replicate, loaded from disk; absent files are `None`.
struct RepArtifacts {
    grid: Option<crate::SensorGrid>,
    logs: BTreeMap<(Variant, usize), TrainLog>,
    final_rho: BTreeMap<usize, f64>,
    forecasts: BTreeMap<(String, usize, usize), ForecastResult>,
    mc: BTreeMap<Variant, ForecastResult>,
}

fn load_rep(root: &Path, cfg: &ExperimentConfig, r: usize) -> RepArtifacts {
    let mut a = RepArtifacts {
        grid: io::load_locations(&dataset_dir(root, r).join(io::LOCATIONS_CSV)).ok(),
        logs: BTreeMap::new(),
        final_rho: BTreeMap::new(),
        forecasts: BTreeMap::new(),
        mc: BTreeMap::new(),
    };
    for &t in &cfg.t_train_sizes {
        for v in [Variant::Geo, Variant::Vanilla] {
            let dir = cell_dir(root, r, v, t);
            if let Ok(log) = io::read_json::<TrainLog>(&dir.join(TRAIN_LOG_JSON)) {
                if log.diverged.is_none() {
                    a.logs.insert((v, t), log);
                }
            }
            if v == Variant::Geo {
                if let Ok(m) = io::read_json::<io::CheckpointManifest>(&dir.join(CHECKPOINT).with_extension("json")) {
                    if let Some(&rho) = m.rho.first() {
                        a.final_rho.insert(t, rho);
                    }
                }
            }
            for h in 1..=cfg.max_horizon {
                if let Ok(f) = io::load_forecast(&forecast_path(&dir, h)) {
                    a.forecasts.insert((model_slug(v).to_owned(), t, h), f);
                }
            }
            if t == cfg.primary_t_train {
                if let Ok(f) = io::load_forecast(&dir.join(MC_FORECAST)) {
                    a.mc.insert(v, f);
                }
            }
        }
    }
    let rep = replicate_dir(root, r);
    for name in ["kriging", "historical_average"] {
        for h in 1..=cfg.max_horizon {
            if let Ok(f) = io::load_forecast(&forecast_path(&rep.join(name), h)) {
                a.forecasts.insert((name.to_owned(), cfg.primary_t_train, h), f);
            }
        }
    }
    a
}

fn h1<'a>(a: &'a RepArtifacts, name: &str, t: usize) -> Option<&'a ForecastResult> {
    a.forecasts.get(&(name.to_owned(), t, 1))
}

fn verdict(id: u8, name: &str, v: Verdict, measured: &[(&str, f64)], detail: String) -> CriterionVerdict {
    CriterionVerdict {
        id,
        name: name.into(),
        verdict: v,
        measured: measured.iter().map(|(k, x)| ((*k).to_owned(), *x)).collect(),
        detail,
    }
}

fn not_run(id: u8, name: &str) -> CriterionVerdict {
    verdict(id, name, Verdict::NotRun, &[], String::new())
}

fn indeterminate(id: u8, name: &str, got: usize) -> CriterionVerdict {
    verdict(
        id,
        name,
        Verdict::Indeterminate,
        &[("replicates", got as f64)],
        format!("only {got} replicate(s) produced the required artifacts"),
    )
}

fn pass_if(ok: bool) -> Verdict {
    if ok {
        Verdict::Pass
    } else {
        Verdict::Fail
    }
}

/// Recomputes every table and acceptance verdict from the files under
/// `root` (the `config.json` written by [`run_suite`] included).
pub fn summarize_output(root: &Path) -> Result<Summary> {
    use ExperimentKind::*;
    let cfg: ExperimentConfig = io::read_json(&root.join("config.json"))?;
    let failures: Vec<JobFailure> = io::read_json(&root.join("failures.json")).unwrap_or_default();
    let reps: Vec<RepArtifacts> = (0..cfg.sim.n_replicates).map(|r| load_rep(root, &cfg, r)).collect();
    let tp = cfg.primary_t_train;
    let kind = cfg.experiment;
    let runs = |set: &[ExperimentKind]| set.contains(&kind) || kind == FullTable;
    let mut criteria = Vec::new();
    let tables = root.join("tables");

    // 1: variography
    const C1: &str = "deep variography";
    if runs(&[Variography]) {
        let rho_true = cfg.sim.rho_true;
        let mut rows = Vec::new();
        let mut traj = Vec::new();
        let mut finals = Vec::new();
        let mut improved = 0usize;
        let mut seconds = 0.0;
        for (r, a) in reps.iter().enumerate() {
            let (Some(log), Some(&fin)) = (a.logs.get(&(Variant::Geo, tp)), a.final_rho.get(&tp)) else { continue };
            let Some(init) = log.initial_rho else { continue };
            let better = (fin - rho_true).abs() < (init - rho_true).abs();
            improved += usize::from(better);
            finals.push(fin);
            seconds += log.records.iter().map(|e| e.seconds).sum::<f64>();
            rows.push(vec![
                r.to_string(),
                fmt_f(init),
                fmt_f(fin),
                fmt_f(fin * cfg.sim.grid_side as f64),
                fmt_f((init - rho_true).abs()),
                fmt_f((fin - rho_true).abs()),
                better.to_string(),
            ]);
            traj.push(vec![r.to_string(), "0".into(), fmt_f(init)]);
            for e in &log.records {
                traj.push(vec![r.to_string(), (e.epoch + 1).to_string(), fmt_f(e.rho)]);
            }
        }
        table(
            &tables.join("variography.csv"),
            &["replicate", "initial_rho", "final_rho", "final_rho_cells", "initial_abs_error", "final_abs_error", "improved"],
            rows,
        )?;
        table(&tables.join("rho_trajectory.csv"), &["replicate", "epoch", "rho"], traj)?;
        if !finals.is_empty() {
            let m = mean(&finals);
            table(
                &tables.join("variography_summary.csv"),
                &["replicates", "rho_true", "mean_final_rho", "sd_final_rho", "mean_final_rho_cells"],
                vec![vec![
                    finals.len().to_string(),
                    fmt_f(rho_true),
                    fmt_f(m),
                    fmt_f(sd(&finals)),
                    fmt_f(m * cfg.sim.grid_side as f64),
                ]],
            )?;
        }
        if finals.len() < MIN_REPLICATES {
            criteria.push(indeterminate(1, C1, finals.len()));
        } else {
            let m = mean(&finals);
            let need = (4 * finals.len()).div_ceil(5);
            let ok = (0.12..=0.30).contains(&m) && improved >= need && seconds <= 900.0;
            criteria.push(verdict(
                1,
                C1,
                pass_if(ok),
                &[
                    ("mean_final_rho", m),
                    ("sd_final_rho", sd(&finals)),
                    ("replicates_improved", improved as f64),
                    ("replicates", finals.len() as f64),
                    ("train_seconds", seconds),
                ],
                format!(
                    "mean rho {m:.4} in [0.12, 0.30]; |rho - {rho_true}| shrank in {improved}/{} (need {need}); geo training {seconds:.0}s (budget 900s)",
                    finals.len()
                ),
            ));
        }
    } else {
        criteria.push(not_run(1, C1));
    }

    // 2: residual whitening
    const C2: &str = "residual whitening";
    if runs(&[ResidualWhitening]) {
        let mut rows = Vec::new();
        let mut pairs = Vec::new();
        for (r, a) in reps.iter().enumerate() {
            let Some(grid) = &a.grid else { continue };
            let w = SpatialWeights::inverse_distance(grid)?;
            let mut vals = BTreeMap::new();
            for name in ["geo", "vanilla", "kriging"] {
                if let Some(f) = h1(a, name, tp) {
                    let i = mean_morans_i(f, &w)?;
                    rows.push(vec![r.to_string(), name.into(), fmt_f(i)]);
                    vals.insert(name, i);
                }
            }
            if let (Some(&g), Some(&v)) = (vals.get("geo"), vals.get("vanilla")) {
                pairs.push((g, v));
            }
            if r == 0 {
                for name in ["geo", "vanilla", "kriging"] {
                    if let Some(f) = h1(a, name, tp) {
                        let res = f.residual_snapshot(0);
                        let rows = grid
                            .locations()
                            .iter()
                            .zip(&res)
                            .enumerate()
                            .map(|(i, (p, e))| vec![i.to_string(), fmt_f(p[0]), fmt_f(p[1]), fmt_f(*e)])
                            .collect();
                        table(&tables.join(format!("residual_snapshot_{name}.csv")), &["site", "x", "y", "residual"], rows)?;
                    }
                }
            }
        }
        table(&tables.join("residual_whitening.csv"), &["replicate", "model", "morans_i"], rows)?;
        if pairs.len() < MIN_REPLICATES {
            criteria.push(indeterminate(2, C2, pairs.len()));
        } else {
            let ig = mean(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
            let iv = mean(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
            criteria.push(verdict(
                2,
                C2,
                pass_if(ig.abs() < 0.10 && iv > ig + 0.05),
                &[("morans_i_geo", ig), ("morans_i_vanilla", iv), ("replicates", pairs.len() as f64)],
                format!("I_geo {ig:.4} (|I| < 0.10), I_vanilla {iv:.4} (> I_geo + 0.05)"),
            ));
        }
    } else {
        criteria.push(not_run(2, C2));
    }

    // 3: ordering with oracle bound
    const C3: &str = "ordering and oracle bound";
    let mut full_rows = Vec::new();
    if kind == FullTable {
        let names = ["kriging", "geo", "vanilla", "historical_average"];
        let mut ordered = 0usize;
        let mut complete = 0usize;
        let mut per_model: BTreeMap<&str, Vec<MetricSummary>> = BTreeMap::new();
        for a in &reps {
            let Some(grid) = &a.grid else { continue };
            let w = SpatialWeights::inverse_distance(grid)?;
            let mut rm = Vec::new();
            for name in names {
                let Some(f) = h1(a, name, tp) else { continue };
                let mut s = summarize(f, Some(&w))?;
                let variant = match name {
                    "geo" => Some(Variant::Geo),
                    "vanilla" => Some(Variant::Vanilla),
                    _ => None,
                };
                if let Some(mc) = variant.and_then(|v| a.mc.get(&v)) {
                    let m = summarize(mc, None)?;
                    s.crps = m.crps;
                }
                rm.push(s.rmse);
                per_model.entry(name).or_default().push(s);
            }
            if rm.len() == names.len() {
                complete += 1;
                ordered += usize::from(rm.windows(2).all(|p| p[0] < p[1]));
            }
        }
        for name in names {
            let Some(v) = per_model.get(name) else { continue };
            let col = |f: &dyn Fn(&MetricSummary) -> Option<f64>| {
                let xs: Vec<f64> = v.iter().filter_map(f).collect();
                if xs.is_empty() { String::new() } else { fmt_f(mean(&xs)) }
            };
            full_rows.push(vec![
                name.to_owned(),
                col(&|m| Some(m.rmse)),
                col(&|m| Some(m.mae)),
                col(&|m| m.crps),
                col(&|m| m.morans_i),
                v.len().to_string(),
            ]);
        }
        if let Some(a) = reps.first() {
            let traces: Vec<&ForecastResult> = names.iter().filter_map(|m| h1(a, m, tp)).collect();
            if traces.len() == names.len() {
                let steps = traces.iter().map(|f| f.t_steps()).min().unwrap_or(0);
                let rows = (0..steps)
                    .map(|t| {
                        let mut row = vec![t.to_string(), fmt_f(traces[0].targets[t * traces[0].n])];
                        row.extend(traces.iter().map(|f| fmt_f(f.predictions[t * f.n])));
                        row
                    })
                    .collect();
                table(&tables.join("forecast_trace.csv"), &["step", "observed", "kriging", "geo", "vanilla", "historical_average"], rows)?;
            }
        }
        if complete < MIN_REPLICATES {
            criteria.push(indeterminate(3, C3, complete));
        } else {
            let need = (4 * complete).div_ceil(5);
            criteria.push(verdict(
                3,
                C3,
                pass_if(ordered >= need),
                &[("replicates_ordered", ordered as f64), ("replicates", complete as f64)],
                format!("kriging < geo < vanilla < historical average on {ordered}/{complete} replicates (need {need})"),
            ));
        }
    } else {
        criteria.push(not_run(3, C3));
    }

    // 4: sample efficiency
    const C4: &str = "sample efficiency direction";
    if runs(&[SampleEfficiency]) {
        let mut rows = Vec::new();
        let mut improvement = BTreeMap::new();
        let mut wide: [Vec<String>; 3] = [vec!["geo".into()], vec!["vanilla".into()], vec!["improvement_pct".into()]];
        let mut min_reps = usize::MAX;
        for &t in &cfg.t_train_sizes {
            let mut paired = (Vec::new(), Vec::new());
            for a in &reps {
                if let (Some(g), Some(v)) = (h1(a, "geo", t), h1(a, "vanilla", t)) {
                    paired.0.push(rmse(g));
                    paired.1.push(rmse(v));
                }
            }
            min_reps = min_reps.min(paired.0.len());
            if paired.0.is_empty() {
                continue;
            }
            let (g, v) = (mean(&paired.0), mean(&paired.1));
            let imp = 100.0 * (v - g) / v;
            improvement.insert(t, imp);
            for (row, x) in wide.iter_mut().zip([g, v, imp]) {
                row.push(fmt_f(x));
            }
            rows.push(vec![
                t.to_string(),
                fmt_f(g),
                fmt_f(sd(&paired.0)),
                fmt_f(v),
                fmt_f(sd(&paired.1)),
                fmt_f(imp),
                paired.0.len().to_string(),
            ]);
        }
        table(
            &tables.join("sample_efficiency.csv"),
            &["t_train", "rmse_geo", "rmse_geo_sd", "rmse_vanilla", "rmse_vanilla_sd", "improvement_pct", "replicates"],
            rows,
        )?;
        let mut header = vec!["model".to_owned()];
        header.extend(improvement.keys().map(|t| format!("t_train_{t}")));
        io::write_csv(&tables.join("sample_efficiency_table.csv"), &header, &wide)?;
        let (lo, hi) = (
            cfg.t_train_sizes.iter().copied().min().unwrap_or(0),
            cfg.t_train_sizes.iter().copied().filter(|&t| t <= tp).max().unwrap_or(0),
        );
        if min_reps < MIN_REPLICATES || lo == hi {
            criteria.push(indeterminate(4, C4, if min_reps == usize::MAX { 0 } else { min_reps }));
        } else {
            let (a, b) = (improvement[&lo], improvement[&hi]);
            criteria.push(verdict(
                4,
                C4,
                pass_if(a > b && a > 5.0),
                &[("improvement_pct_small", a), ("improvement_pct_large", b)],
                format!("improvement {a:.2}% at T_train={lo} vs {b:.2}% at T_train={hi}; need the first larger and > 5%"),
            ));
        }
    } else {
        criteria.push(not_run(4, C4));
    }

    // 5: horizon stability
    const C5: &str = "horizon stability";
    if runs(&[HorizonDecay]) {
        let mut rows = Vec::new();
        let mut ratios = Vec::new();
        let mut complete = usize::MAX;
        for h in 1..=cfg.max_horizon {
            let mut per: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
            let mut both = 0;
            for a in &reps {
                let g = a.forecasts.get(&("geo".to_owned(), tp, h));
                let v = a.forecasts.get(&("vanilla".to_owned(), tp, h));
                if let (Some(g), Some(v)) = (g, v) {
                    per.entry("geo").or_default().push(rmse(g));
                    per.entry("vanilla").or_default().push(rmse(v));
                    both += 1;
                }
                if let Some(k) = a.forecasts.get(&("kriging".to_owned(), tp, h)) {
                    per.entry("kriging").or_default().push(rmse(k));
                }
            }
            complete = complete.min(both);
            for (name, xs) in &per {
                rows.push(vec![h.to_string(), (*name).to_owned(), fmt_f(mean(xs)), fmt_f(sd(xs)), xs.len().to_string()]);
            }
            if both > 0 {
                ratios.push(mean(&per["vanilla"]) / mean(&per["geo"]));
            }
        }
        table(&tables.join("horizon_decay.csv"), &["horizon", "model", "rmse", "rmse_sd", "replicates"], rows)?;
        table(
            &tables.join("horizon_ratio.csv"),
            &["horizon", "vanilla_over_geo"],
            ratios.iter().enumerate().map(|(i, r)| vec![(i + 1).to_string(), fmt_f(*r)]).collect(),
        )?;
        if complete < MIN_REPLICATES || ratios.len() < cfg.max_horizon {
            criteria.push(indeterminate(5, C5, if complete == usize::MAX { 0 } else { complete }));
        } else {
            let ok = ratios.windows(2).all(|w| w[1] >= w[0]);
            let measured: Vec<(String, f64)> = ratios.iter().enumerate().map(|(i, r)| (format!("ratio_h{}", i + 1), *r)).collect();
            let m: Vec<(&str, f64)> = measured.iter().map(|(k, v)| (k.as_str(), *v)).collect();
            criteria.push(verdict(
                5,
                C5,
                pass_if(ok),
                &m,
                format!(
                    "vanilla/geo RMSE ratio by horizon: {}",
                    ratios.iter().map(|r| format!("{r:.4}")).collect::<Vec<_>>().join(", ")
                ),
            ));
        }
    } else {
        criteria.push(not_run(5, C5));
    }

    // 6: Diebold–Mariano, pooled over replicates
    const C6: &str = "Diebold-Mariano significance";
    if kind == FullTable {
        let mut d = Vec::new();
        let mut used = 0;
        for a in &reps {
            if let (Some(g), Some(v)) = (h1(a, "geo", tp), h1(a, "vanilla", tp)) {
                used += 1;
                d.extend(v.step_mse().iter().zip(g.step_mse()).map(|(x, y)| x - y));
            }
        }
        if used < MIN_REPLICATES {
            criteria.push(indeterminate(6, C6, used));
        } else {
            let dm: DmResult = diebold_mariano_differential(&d, 0)?;
            io::write_json(&tables.join("diebold_mariano.json"), &dm)?;
            criteria.push(verdict(
                6,
                C6,
                pass_if(dm.p_one_sided < 0.05),
                &[("statistic", dm.statistic), ("p_one_sided", dm.p_one_sided), ("p_two_sided", dm.p_two_sided), ("t", dm.t as f64)],
                format!("t_DM = {:.3}, one-sided p = {:.3e} (geo more accurate); need p < 0.05", dm.statistic, dm.p_one_sided),
            ));
        }
    } else {
        criteria.push(not_run(6, C6));
    }

    // 7: calibration
    const C7: &str = "calibration";
    if runs(&[Calibration]) {
        let mut pooled: BTreeMap<Variant, Vec<f64>> = BTreeMap::new();
        let mut used = 0;
        for a in &reps {
            if let (Some(g), Some(v)) = (a.mc.get(&Variant::Geo), a.mc.get(&Variant::Vanilla)) {
                used += 1;
                pooled.entry(Variant::Geo).or_default().extend(pit_values(g)?);
                pooled.entry(Variant::Vanilla).or_default().extend(pit_values(v)?);
            }
        }
        if used < MIN_REPLICATES {
            criteria.push(indeterminate(7, C7, used));
        } else {
            let sg: PitSummary = pit_uniformity(&pooled[&Variant::Geo], cfg.pit_bins)?;
            let sv: PitSummary = pit_uniformity(&pooled[&Variant::Vanilla], cfg.pit_bins)?;
            io::save_pit_histogram(&tables.join("pit_geo.csv"), &sg)?;
            io::save_pit_histogram(&tables.join("pit_vanilla.csv"), &sv)?;
            table(
                &tables.join("calibration.csv"),
                &["model", "ks", "outer_mass"],
                vec![
                    vec!["geo".into(), fmt_f(sg.ks), fmt_f(sg.outer_mass)],
                    vec!["vanilla".into(), fmt_f(sv.ks), fmt_f(sv.outer_mass)],
                ],
            )?;
            let under = sv.outer_mass > 2.0 / cfg.pit_bins as f64;
            criteria.push(verdict(
                7,
                C7,
                pass_if(sg.ks < sv.ks),
                &[
                    ("ks_geo", sg.ks),
                    ("ks_vanilla", sv.ks),
                    ("outer_mass_geo", sg.outer_mass),
                    ("outer_mass_vanilla", sv.outer_mass),
                ],
                format!(
                    "KS geo {:.4} vs vanilla {:.4}; vanilla outer-decile mass {:.3} ({})",
                    sg.ks,
                    sv.ks,
                    sv.outer_mass,
                    if under { "under-dispersed" } else { "no under-dispersion signature" }
                ),
            ));
        }
    } else {
        criteria.push(not_run(7, C7));
    }

    // 8: numerical property suite
    const C8: &str = "numerical property suite";
    match io::read_json::<Vec<CheckOutcome>>(&root.join("property_suite.json")) {
        Ok(checks) => {
            let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
            let measured: Vec<(&str, f64)> = checks.iter().map(|c| (c.name.as_str(), c.value)).collect();
            criteria.push(verdict(
                8,
                C8,
                pass_if(failed.is_empty()),
                &measured,
                if failed.is_empty() {
                    format!("{} checks passed", checks.len())
                } else {
                    format!("failed: {}", failed.join(", "))
                },
            ));
        }
        Err(_) => criteria.push(not_run(8, C8)),
    }

    if kind == FullTable {
        table(&tables.join("full_table.csv"), &["model", "rmse", "mae", "crps", "morans_i", "replicates"], full_rows)?;
    }
    Ok(Summary {
        experiment: kind,
        desk_scale: cfg.desk_scale,
        replicates: cfg.sim.n_replicates,
        criteria,
        failures,
        wall_seconds: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_overrides() {
        let mut c = ExperimentConfig::desk();
        c.set("sim.rho_true", "0.3").unwrap();
        c.set("train.max_epochs", "3").unwrap();
        c.set("experiment", "calibration").unwrap();
        c.set("output_dir", "/tmp/x").unwrap();
        assert_eq!(c.sim.rho_true, 0.3);
        assert_eq!(c.train.max_epochs, 3);
        assert_eq!(c.experiment, ExperimentKind::Calibration);
        assert_eq!(c.output_dir, PathBuf::from("/tmp/x"));
        assert!(c.set("sim.nope", "1").is_err());
        assert!(c.set("train.max_epochs", "\"many\"").is_err());
    }

    #[test]
    fn desk_scale_is_valid_and_full_scale_is_valid() {
        let d = ExperimentConfig::desk();
        d.validate().unwrap();
        assert_eq!((d.sim.grid_side, d.sim.t_steps, d.sim.n_replicates), (10, 600, 5));
        ExperimentConfig::default().validate().unwrap();
        let mut bad = d.clone();
        bad.sim.phi_t = 1.2;
        assert!(bad.validate().is_err());
        let mut bad = d;
        bad.t_test = 200;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn plan_covers_the_requested_experiment() {
        let mut c = ExperimentConfig::desk();
        assert_eq!(plan_cells(&c).len(), 5 * 2 * 2);
        c.experiment = ExperimentKind::Variography;
        let cells = plan_cells(&c);
        assert_eq!(cells.len(), 5);
        assert!(cells.iter().all(|s| s.variant == Variant::Geo && s.t_train == 500 && !s.monte_carlo));
        c.experiment = ExperimentKind::HorizonDecay;
        assert!(plan_cells(&c).iter().all(|s| s.horizons == 4));
    }

    #[test]
    fn experiment_names_round_trip() {
        for k in ExperimentKind::ALL {
            assert_eq!(k.to_string().parse::<ExperimentKind>().unwrap(), k);
        }
        assert_eq!("full-table".parse::<ExperimentKind>().unwrap(), ExperimentKind::FullTable);
        assert!("everything".parse::<ExperimentKind>().is_err());
    }
}
