//! Separable Matérn × AR(1) Gaussian random field simulator.
//!
//! The latent field follows `F_{t+1} = φ·F_t + √(1−φ²)·η_t` with
//! `η_t ~ N(0, σ²Ψ(D; ρ, ν))` and a stationary start, so
//! `Cov(F(s,t), F(s',t')) = σ²Ψ(|s−s'|)·φ^{|t−t'|}`. Observations add white
//! measurement noise of variance `nugget`.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geokernels::{KernelFamily, SensorGrid};
use crate::linalg::{cholesky_jittered, JitterSchedule};

/// Look-back length used when none is configured.
pub const DEFAULT_LOOKBACK: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub grid_side: usize,
    pub nu: f64,
    pub rho_true: f64,
    pub sigma2: f64,
    pub phi_t: f64,
    pub nugget: f64,
    pub t_steps: usize,
    pub n_replicates: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            grid_side: 20,
            nu: 1.5,
            rho_true: 0.2,
            sigma2: 1.0,
            phi_t: 0.8,
            nugget: 0.05,
            t_steps: 2000,
            n_replicates: 50,
            seed: 2024,
        }
    }
}

impl SimConfig {
    /// Reduced configuration: 10×10 lattice, 600 steps, 5 replicates.
    pub fn desk_scale() -> Self {
        Self {
            grid_side: 10,
            t_steps: 600,
            n_replicates: 5,
            ..Self::default()
        }
    }

    pub fn family(&self) -> Result<KernelFamily> {
        KernelFamily::from_nu(self.nu)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.phi_t.abs() < 1.0) {
            return Err(Error::config("sim.phi_t", format!("|phi_t| must be < 1, got {}", self.phi_t)));
        }
        if !(self.rho_true > 0.0) || !self.rho_true.is_finite() {
            return Err(Error::config("sim.rho_true", format!("must be > 0, got {}", self.rho_true)));
        }
        if !(self.nugget >= 0.0) || !self.nugget.is_finite() {
            return Err(Error::config("sim.nugget", format!("must be >= 0, got {}", self.nugget)));
        }
        if !(self.sigma2 >= 0.0) || !self.sigma2.is_finite() {
            return Err(Error::config("sim.sigma2", format!("must be >= 0, got {}", self.sigma2)));
        }
        if self.grid_side < 2 {
            return Err(Error::config("sim.grid_side", format!("must be >= 2, got {}", self.grid_side)));
        }
        if self.t_steps == 0 {
            return Err(Error::config("sim.t_steps", "must be >= 1"));
        }
        if self.n_replicates == 0 {
            return Err(Error::config("sim.n_replicates", "must be >= 1"));
        }
        self.family()
            .map_err(|e| Error::config("sim.nu", e.to_string()))?;
        Ok(())
    }

    pub fn n_sites(&self) -> usize {
        self.grid_side * self.grid_side
    }
}

/// One simulated replicate.
#[derive(Debug, Clone)]
pub struct StDataset {
    pub grid: SensorGrid,
    /// `T × N`, row `t` holds all sites at time `t`.
    pub observations: Arc<[f64]>,
    /// Noise-free field, same layout, when retained.
    pub latent: Option<Arc<[f64]>>,
    pub config: SimConfig,
    pub replicate_id: usize,
}

impl StDataset {
    pub fn new(
        grid: SensorGrid,
        observations: Vec<f64>,
        latent: Option<Vec<f64>>,
        config: SimConfig,
        replicate_id: usize,
    ) -> Result<Self> {
        let n = grid.n();
        if observations.is_empty() || observations.len() % n != 0 {
            return Err(Error::InvalidInput(format!(
                "observation length {} is not a multiple of {n} sites",
                observations.len()
            )));
        }
        if latent.as_ref().is_some_and(|l| l.len() != observations.len()) {
            return Err(Error::InvalidInput("latent field length differs from observations".into()));
        }
        if observations.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("observations contain non-finite values".into()));
        }
        Ok(Self {
            grid,
            observations: observations.into(),
            latent: latent.map(Into::into),
            config,
            replicate_id,
        })
    }

    pub fn n(&self) -> usize {
        self.grid.n()
    }

    pub fn t_steps(&self) -> usize {
        self.observations.len() / self.n()
    }

    /// All sites at time `t`.
    pub fn at(&self, t: usize) -> &[f64] {
        let n = self.n();
        &self.observations[t * n..(t + 1) * n]
    }

    /// Site `i` over time.
    pub fn site_series(&self, i: usize) -> Vec<f64> {
        self.observations.iter().skip(i).step_by(self.n()).copied().collect()
    }

    /// Copy restricted to time steps `start..end`.
    pub fn time_slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.t_steps() {
            return Err(Error::InvalidInput(format!(
                "time slice {start}..{end} outside 0..{}",
                self.t_steps()
            )));
        }
        let n = self.n();
        let obs = self.observations[start * n..end * n].to_vec();
        let lat = self.latent.as_ref().map(|l| l[start * n..end * n].to_vec());
        Self::new(self.grid.clone(), obs, lat, self.config.clone(), self.replicate_id)
    }
}

/// RNG for replicate `r`: the configured seed selects the key and the
/// replicate index selects an independent ChaCha stream.
pub fn replicate_rng(seed: u64, replicate: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate as u64);
    rng
}

/// Lower Cholesky factor of `σ²Ψ(D; ρ, ν)` (row-major), or `None` for a
/// degenerate zero-variance field.
fn spatial_factor(grid: &SensorGrid, cfg: &SimConfig) -> Result<Option<Vec<f64>>> {
    if cfg.sigma2 == 0.0 {
        return Ok(None);
    }
    let fam = cfg.family()?;
    let n = grid.n();
    let cov = DMatrix::from_fn(n, n, |i, j| cfg.sigma2 * fam.correlation(grid.distance(i, j), cfg.rho_true));
    let (chol, _) = cholesky_jittered(&cov, JitterSchedule::relative_to(cfg.sigma2))?;
    let l = chol.l();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            out[i * n + j] = l[(i, j)];
        }
    }
    Ok(Some(out))
}

fn lower_matvec(l: &[f64], z: &[f64], out: &mut [f64]) {
    let n = z.len();
    for i in 0..n {
        let row = &l[i * n..i * n + i + 1];
        out[i] = row.iter().zip(&z[..=i]).map(|(a, b)| a * b).sum();
    }
}

fn simulate_with_factor(
    grid: &SensorGrid,
    factor: Option<&[f64]>,
    cfg: &SimConfig,
    replicate: usize,
) -> Result<StDataset> {
    let n = grid.n();
    let t_steps = cfg.t_steps;
    let mut rng = replicate_rng(cfg.seed, replicate);
    let mut latent = vec![0.0; t_steps * n];
    let mut obs = vec![0.0; t_steps * n];
    let mut z = vec![0.0; n];
    let mut eta = vec![0.0; n];
    let innov = (1.0 - cfg.phi_t * cfg.phi_t).sqrt();
    let noise_sd = cfg.nugget.sqrt();
    for t in 0..t_steps {
        z.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
        match factor {
            Some(l) => lower_matvec(l, &z, &mut eta),
            None => eta.iter_mut().for_each(|v| *v = 0.0),
        }
        let (prev, cur) = latent.split_at_mut(t * n);
        let cur = &mut cur[..n];
        if t == 0 {
            cur.copy_from_slice(&eta);
        } else {
            let prev = &prev[(t - 1) * n..];
            for i in 0..n {
                cur[i] = cfg.phi_t * prev[i] + innov * eta[i];
            }
        }
        for i in 0..n {
            let e: f64 = StandardNormal.sample(&mut rng);
            obs[t * n + i] = cur[i] + noise_sd * e;
        }
    }
    StDataset::new(grid.clone(), obs, Some(latent), cfg.clone(), replicate)
}

/// Simulates one replicate on the configured lattice.
pub fn simulate_replicate(cfg: &SimConfig, replicate: usize) -> Result<StDataset> {
    cfg.validate()?;
    let grid = SensorGrid::lattice(cfg.grid_side)?;
    let factor = spatial_factor(&grid, cfg)?;
    simulate_with_factor(&grid, factor.as_deref(), cfg, replicate)
}

/// Simulates every replicate of `cfg`. Replicates are generated in parallel
/// and are independent of the thread count.
pub fn simulate(cfg: &SimConfig) -> Result<Vec<StDataset>> {
    cfg.validate()?;
    let grid = SensorGrid::lattice(cfg.grid_side)?;
    simulate_on_grid(&grid, cfg)
}

/// As [`simulate`] but on an arbitrary set of sites.
pub fn simulate_on_grid(grid: &SensorGrid, cfg: &SimConfig) -> Result<Vec<StDataset>> {
    cfg.validate()?;
    let factor = spatial_factor(grid, cfg)?;
    (0..cfg.n_replicates)
        .into_par_iter()
        .map(|r| simulate_with_factor(grid, factor.as_deref(), cfg, r))
        .collect()
}

/// One distance bin of an empirical spatial statistic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinEstimate {
    pub lo: f64,
    pub hi: f64,
    pub n_pairs: usize,
    /// `None` when the bin holds no usable pairs.
    pub value: Option<f64>,
}

impl BinEstimate {
    pub fn center(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }
}

pub(crate) fn check_bins(edges: &[f64], min_bins: usize) -> Result<()> {
    if edges.len() < min_bins + 1 {
        return Err(Error::InvalidInput(format!(
            "need at least {min_bins} bins ({} edges given)",
            edges.len()
        )));
    }
    if edges.windows(2).any(|w| !(w[1] > w[0])) || edges.iter().any(|e| !e.is_finite()) {
        return Err(Error::InvalidInput("bin edges must be finite and strictly increasing".into()));
    }
    Ok(())
}

/// Index of the half-open bin `[edges[k], edges[k+1])` containing `d`.
pub(crate) fn bin_of(edges: &[f64], d: f64) -> Option<usize> {
    if d < edges[0] || d >= edges[edges.len() - 1] {
        return None;
    }
    Some(edges.partition_point(|&e| e <= d) - 1)
}

/// Mean over site pairs (including each site with itself) of the temporal
/// sample correlation, binned by distance. Bins without pairs, or whose
/// pairs all involve constant series, are reported as missing.
pub fn empirical_spatial_correlation(dataset: &StDataset, edges: &[f64]) -> Result<Vec<BinEstimate>> {
    check_bins(edges, 2)?;
    let t = dataset.t_steps();
    if t < 100 {
        return Err(Error::InvalidInput(format!("need T >= 100, got {t}")));
    }
    let n = dataset.n();
    // column-major, centred and scaled to unit norm
    let mut cols: Vec<Vec<f64>> = (0..n).map(|i| dataset.site_series(i)).collect();
    let mut usable = vec![true; n];
    for (i, c) in cols.iter_mut().enumerate() {
        let m = c.iter().sum::<f64>() / t as f64;
        c.iter_mut().for_each(|v| *v -= m);
        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            usable[i] = false;
        } else {
            c.iter_mut().for_each(|v| *v /= norm);
        }
    }
    let nb = edges.len() - 1;
    let mut sums = vec![0.0; nb];
    let mut counts = vec![0usize; nb];
    let mut valid = vec![0usize; nb];
    for i in 0..n {
        for j in i..n {
            let Some(b) = bin_of(edges, dataset.grid.distance(i, j)) else { continue };
            counts[b] += 1;
            if usable[i] && usable[j] {
                let r: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
                sums[b] += r;
                valid[b] += 1;
            }
        }
    }
    Ok((0..nb)
        .map(|b| BinEstimate {
            lo: edges[b],
            hi: edges[b + 1],
            n_pairs: counts[b],
            value: (valid[b] > 0).then(|| sums[b] / valid[b] as f64),
        })
        .collect())
}

/// Lag-1 autocorrelation of a series.
pub fn lag1_autocorrelation(x: &[f64]) -> f64 {
    let n = x.len();
    let m = x.iter().sum::<f64>() / n as f64;
    let den: f64 = x.iter().map(|v| (v - m) * (v - m)).sum();
    let num: f64 = x.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum();
    num / den
}

/// Index set of one-step-ahead samples over a shared observation matrix.
///
/// Sample `k` predicts the row at `targets[k]` from the `lookback` rows
/// immediately before it.
#[derive(Debug, Clone)]
pub struct WindowSet {
    observations: Arc<[f64]>,
    n: usize,
    lookback: usize,
    targets: Vec<usize>,
}

impl WindowSet {
    pub fn new(observations: Arc<[f64]>, n: usize, lookback: usize, targets: Vec<usize>) -> Result<Self> {
        let t_steps = observations.len() / n;
        if let Some(&bad) = targets.iter().find(|&&t| t < lookback || t >= t_steps) {
            return Err(Error::InvalidInput(format!(
                "target index {bad} needs {lookback} past steps within 0..{t_steps}"
            )));
        }
        Ok(Self {
            observations,
            n,
            lookback,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn lookback(&self) -> usize {
        self.lookback
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn observations(&self) -> &Arc<[f64]> {
        &self.observations
    }

    /// Writes the `N × L` input of sample `k` into `out` (site-major, oldest
    /// step first).
    pub fn input_into(&self, k: usize, out: &mut [f64]) {
        let (n, l) = (self.n, self.lookback);
        let t = self.targets[k];
        for s in 0..l {
            let row = &self.observations[(t - l + s) * n..(t - l + s + 1) * n];
            for i in 0..n {
                out[i * l + s] = row[i];
            }
        }
    }

    pub fn input(&self, k: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n * self.lookback];
        self.input_into(k, &mut out);
        out
    }

    pub fn target(&self, k: usize) -> &[f64] {
        let t = self.targets[k];
        &self.observations[t * self.n..(t + 1) * self.n]
    }

    /// Subset of samples, in the given order.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            observations: Arc::clone(&self.observations),
            n: self.n,
            lookback: self.lookback,
            targets: idx.iter().map(|&k| self.targets[k]).collect(),
        }
    }

    /// Splits chronologically: the first `len - k` samples and the last `k`.
    pub fn split_tail(&self, k: usize) -> (Self, Self) {
        let cut = self.len().saturating_sub(k);
        let idx: Vec<usize> = (0..self.len()).collect();
        (self.select(&idx[..cut]), self.select(&idx[cut..]))
    }
}

/// Chronological train/test windows.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: WindowSet,
    pub test: WindowSet,
}

/// Training targets are `lookback..t_train`, test targets are
/// `t_train..t_train + t_test`.
pub fn split(dataset: &StDataset, t_train: usize, t_test: usize, lookback: usize) -> Result<Split> {
    split_at(dataset, 0, t_train, t_test, lookback)
}

/// Training block `[start, start + t_train)` followed directly by a test
/// block of `t_test` steps. Training windows never reach before `start`;
/// test windows may look back into the training block.
pub fn split_at(dataset: &StDataset, start: usize, t_train: usize, t_test: usize, lookback: usize) -> Result<Split> {
    let t = dataset.t_steps();
    if lookback == 0 {
        return Err(Error::InvalidInput("lookback must be >= 1".into()));
    }
    if t_train <= lookback {
        return Err(Error::InvalidInput(format!(
            "t_train = {t_train} leaves no training window for lookback {lookback}"
        )));
    }
    let end = start + t_train;
    if end + t_test > t {
        return Err(Error::InvalidInput(format!(
            "series of length {t} too short for start {start}, t_train = {t_train} and t_test = {t_test}"
        )));
    }
    let obs = Arc::clone(&dataset.observations);
    let n = dataset.n();
    Ok(Split {
        train: WindowSet::new(Arc::clone(&obs), n, lookback, (start + lookback..end).collect())?,
        test: WindowSet::new(obs, n, lookback, (end..end + t_test).collect())?,
    })
}

/// Training block of `t_train` steps immediately before a final test block
/// of `t_test` steps, so that different training sizes share one test set.
pub fn split_tail_test(dataset: &StDataset, t_train: usize, t_test: usize, lookback: usize) -> Result<Split> {
    let t = dataset.t_steps();
    let start = t.checked_sub(t_train + t_test).ok_or_else(|| {
        Error::InvalidInput(format!("series of length {t} too short for t_train = {t_train} plus t_test = {t_test}"))
    })?;
    split_at(dataset, start, t_train, t_test, lookback)
}
