//! Reference predictors: the simple-Kriging oracle that knows the true
//! generating covariance, and the per-site historical average.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::geokernels::{KernelFamily, SensorGrid};
use crate::grf_sim::SimConfig;
use crate::linalg::{cholesky_jittered, JitterSchedule};

pub const DEFAULT_CONDITIONING_DEPTH: usize = 3;

/// Zero-mean simple Kriging of `Y_{t+h}` from the last `k` observed
/// snapshots under the separable covariance
/// `σ²Ψ(d)·φ^{|Δt|} + σ_ε²·δ`.
///
/// The covariance is stationary in time, so the weight matrix
/// `W = C_{*o} Σ_oo⁻¹` and the predictive variance are computed once.
#[derive(Debug, Clone)]
pub struct KrigingOracle {
    n: usize,
    depth: usize,
    horizon: usize,
    /// `N × (N·k)`, columns ordered `(lag, site)` with lag 0 the newest.
    weights: Vec<f64>,
    variance: Vec<f64>,
    jitter: f64,
}

impl KrigingOracle {
    pub fn new(grid: &SensorGrid, sim: &SimConfig, depth: usize) -> Result<Self> {
        Self::with_horizon(grid, sim, depth, 1)
    }

    pub fn with_horizon(grid: &SensorGrid, sim: &SimConfig, depth: usize, horizon: usize) -> Result<Self> {
        if depth == 0 || horizon == 0 {
            return Err(Error::InvalidInput("conditioning depth and horizon must be >= 1".into()));
        }
        if !(sim.sigma2 >= 0.0) || !(sim.nugget >= 0.0) || !(sim.phi_t.abs() <= 1.0) || !(sim.rho_true > 0.0) {
            return Err(Error::config("sim", "oracle needs sigma2 >= 0, nugget >= 0, |phi_t| <= 1, rho_true > 0"));
        }
        let family = KernelFamily::from_nu(sim.nu)?;
        let n = grid.n();
        let m = n * depth;
        let psi: Vec<f64> = grid.dist_matrix().iter().map(|&d| family.correlation(d, sim.rho_true)).collect();
        let s2 = sim.sigma2;
        let phi = sim.phi_t;
        let sigma = DMatrix::from_fn(m, m, |r, c| {
            let (a, i) = (r / n, r % n);
            let (b, j) = (c / n, c % n);
            let mut v = s2 * psi[i * n + j] * phi.powi((a as i32 - b as i32).abs());
            if r == c {
                v += sim.nugget;
            }
            v
        });
        // cross covariance with the target, transposed: (N·k) × N
        let cross_t = DMatrix::from_fn(m, n, |r, j| {
            let (a, i) = (r / n, r % n);
            s2 * psi[i * n + j] * phi.powi((a + horizon) as i32)
        });
        let scale = (s2 + sim.nugget).max(f64::MIN_POSITIVE);
        let (chol, jitter) = cholesky_jittered(&sigma, JitterSchedule::exact_first(scale))?;
        let sol = chol.solve(&cross_t);
        let mut weights = vec![0.0; n * m];
        let mut variance = vec![0.0; n];
        for j in 0..n {
            let mut reduction = 0.0;
            for r in 0..m {
                weights[j * m + r] = sol[(r, j)];
                reduction += cross_t[(r, j)] * sol[(r, j)];
            }
            variance[j] = (s2 + sim.nugget - reduction).max(sim.nugget);
        }
        Ok(Self {
            n,
            depth,
            horizon,
            weights,
            variance,
            jitter,
        })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Diagonal jitter that was needed to factorise the system.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Predictive variance per site (identical for every history).
    pub fn variance(&self) -> &[f64] {
        &self.variance
    }

    /// `history` is `N × k`, site-major, oldest step first.
    pub fn predict(&self, history: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (n, k) = (self.n, self.depth);
        if history.len() != n * k {
            return Err(Error::ShapeMismatch {
                op: "kriging history",
                left: vec![history.len()],
                right: vec![n, k],
            });
        }
        let m = n * k;
        let mut obs = vec![0.0; m];
        for i in 0..n {
            for a in 0..k {
                obs[a * n + i] = history[i * k + (k - 1 - a)];
            }
        }
        let mean = self
            .weights
            .chunks(m)
            .map(|w| w.iter().zip(&obs).map(|(a, b)| a * b).sum())
            .collect();
        Ok((mean, self.variance.clone()))
    }

    /// Predicts from a longer `N × L` window (site-major, oldest first) by
    /// using its last `k` steps.
    pub fn predict_window(&self, window: &[f64], lookback: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        if lookback < self.depth || window.len() != self.n * lookback {
            return Err(Error::InvalidInput(format!(
                "window of {} values with lookback {lookback} cannot feed depth {}",
                window.len(),
                self.depth
            )));
        }
        let k = self.depth;
        let hist: Vec<f64> = window.chunks(lookback).flat_map(|row| row[lookback - k..].iter().copied()).collect();
        self.predict(&hist)
    }
}

/// Exact Kriging with the default conditioning depth.
pub fn kriging_predict(
    grid: &SensorGrid,
    sim: &SimConfig,
    history: &[f64],
    depth: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    KrigingOracle::new(grid, sim, depth)?.predict(history)
}

/// Per-site mean of a `T × N` block of training observations.
pub fn historical_average(observations: &[f64], n: usize) -> Result<Vec<f64>> {
    if n == 0 || observations.is_empty() || observations.len() % n != 0 {
        return Err(Error::InvalidInput(format!(
            "{} observations do not form a T × {n} block",
            observations.len()
        )));
    }
    let t = observations.len() / n;
    let mut mean = vec![0.0; n];
    for row in observations.chunks(n) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= t as f64);
    Ok(mean)
}
