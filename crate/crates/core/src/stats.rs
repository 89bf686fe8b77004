//! Forecast metrics and diagnostics: RMSE/MAE/CRPS, Diebold–Mariano,
//! PIT calibration, Moran's I and the Matheron variogram.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::geokernels::SensorGrid;
use crate::grf_sim::{bin_of, check_bins, BinEstimate};

/// Standard normal CDF.
pub fn norm_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Standard normal density.
pub fn norm_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Point forecasts (and optional predictive variances) against targets,
/// all stored `T_test × N` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastResult {
    pub model_name: String,
    pub horizon: usize,
    pub n: usize,
    pub predictions: Vec<f64>,
    pub variances: Option<Vec<f64>>,
    pub targets: Vec<f64>,
}

impl ForecastResult {
    pub fn new(
        model_name: impl Into<String>,
        horizon: usize,
        n: usize,
        predictions: Vec<f64>,
        variances: Option<Vec<f64>>,
        targets: Vec<f64>,
    ) -> Result<Self> {
        if n == 0 || predictions.is_empty() || predictions.len() % n != 0 || targets.len() != predictions.len() {
            return Err(Error::InvalidInput(format!(
                "forecast shapes disagree: {} predictions, {} targets, N = {n}",
                predictions.len(),
                targets.len()
            )));
        }
        if let Some(v) = &variances {
            if v.len() != predictions.len() {
                return Err(Error::InvalidInput("variance length differs from predictions".into()));
            }
            if let Some(bad) = v.iter().find(|&&x| !(x > 0.0) || !x.is_finite()) {
                return Err(Error::InvalidInput(format!("variances must be positive, found {bad}")));
            }
        }
        if predictions.iter().chain(&targets).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("forecast values".into()));
        }
        Ok(Self {
            model_name: model_name.into(),
            horizon,
            n,
            predictions,
            variances,
            targets,
        })
    }

    pub fn t_steps(&self) -> usize {
        self.predictions.len() / self.n
    }

    /// `targets − predictions`.
    pub fn residuals(&self) -> Vec<f64> {
        self.targets.iter().zip(&self.predictions).map(|(y, p)| y - p).collect()
    }

    pub fn residual_snapshot(&self, t: usize) -> Vec<f64> {
        let r = t * self.n..(t + 1) * self.n;
        self.targets[r.clone()].iter().zip(&self.predictions[r]).map(|(y, p)| y - p).collect()
    }

    /// Mean squared error of each test step (averaged over sites).
    pub fn step_mse(&self) -> Vec<f64> {
        self.residuals()
            .chunks(self.n)
            .map(|c| c.iter().map(|e| e * e).sum::<f64>() / self.n as f64)
            .collect()
    }
}

pub fn rmse(r: &ForecastResult) -> f64 {
    let res = r.residuals();
    (res.iter().map(|e| e * e).sum::<f64>() / res.len() as f64).sqrt()
}

pub fn mae(r: &ForecastResult) -> f64 {
    let res = r.residuals();
    res.iter().map(|e| e.abs()).sum::<f64>() / res.len() as f64
}

/// Closed-form CRPS of `N(mu, sigma²)` at observation `y`.
pub fn crps_gaussian(y: f64, mu: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Domain(format!("crps needs sigma > 0, got {sigma}")));
    }
    let z = (y - mu) / sigma;
    Ok(sigma * (z * (2.0 * norm_cdf(z) - 1.0) + 2.0 * norm_pdf(z) - 1.0 / std::f64::consts::PI.sqrt()))
}

/// Mean CRPS over all (t, site) pairs; requires variances.
pub fn crps(r: &ForecastResult) -> Result<f64> {
    let v = r
        .variances
        .as_ref()
        .ok_or_else(|| Error::InvalidInput(format!("{} has no predictive variances", r.model_name)))?;
    let mut s = 0.0;
    for ((y, m), var) in r.targets.iter().zip(&r.predictions).zip(v) {
        s += crps_gaussian(*y, *m, var.sqrt())?;
    }
    Ok(s / v.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DmResult {
    pub statistic: f64,
    pub p_two_sided: f64,
    /// p-value against the alternative that the second forecast is more
    /// accurate (mean loss differential > 0).
    pub p_one_sided: f64,
    pub lag: usize,
    pub t: usize,
}

/// Diebold–Mariano test on a loss-differential series with a Newey–West
/// (Bartlett) long-run variance truncated at `lag`.
pub fn diebold_mariano_differential(d: &[f64], lag: usize) -> Result<DmResult> {
    let t = d.len();
    if t < 10 {
        return Err(Error::InvalidInput(format!("Diebold–Mariano needs T >= 10, got {t}")));
    }
    if d.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("loss differential".into()));
    }
    let tf = t as f64;
    let mean = d.iter().sum::<f64>() / tf;
    let c: Vec<f64> = d.iter().map(|x| x - mean).collect();
    let autocov = |k: usize| c[k..].iter().zip(&c).map(|(a, b)| a * b).sum::<f64>() / tf;
    let mut lrv = autocov(0);
    for k in 1..=lag.min(t - 1) {
        lrv += 2.0 * (1.0 - k as f64 / (lag + 1) as f64) * autocov(k);
    }
    if !(lrv > 0.0) {
        return Err(Error::Degenerate("degenerate loss differential".into()));
    }
    let stat = mean / (lrv / tf).sqrt();
    Ok(DmResult {
        statistic: stat,
        p_two_sided: 2.0 * norm_cdf(-stat.abs()),
        p_one_sided: norm_cdf(-stat),
        lag,
        t,
    })
}

/// DM test of squared-error loss, `d_t = e1_t² − e2_t²`, with lag `h − 1`.
pub fn diebold_mariano(e1: &[f64], e2: &[f64], horizon: usize) -> Result<DmResult> {
    if e1.len() != e2.len() {
        return Err(Error::InvalidInput(format!("error series lengths differ: {} vs {}", e1.len(), e2.len())));
    }
    let d: Vec<f64> = e1.iter().zip(e2).map(|(a, b)| a * a - b * b).collect();
    diebold_mariano_differential(&d, horizon.saturating_sub(1))
}

/// Probability integral transform `Φ((y − μ)/σ)` for every (t, site).
pub fn pit_values(r: &ForecastResult) -> Result<Vec<f64>> {
    let v = r
        .variances
        .as_ref()
        .ok_or_else(|| Error::InvalidInput(format!("{} has no predictive variances", r.model_name)))?;
    Ok(r.targets
        .iter()
        .zip(&r.predictions)
        .zip(v)
        .map(|((y, m), var)| norm_cdf((y - m) / var.sqrt()))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PitSummary {
    /// Bin counts over `[0, 1]` split into equal bins.
    pub histogram: Vec<usize>,
    pub ks: f64,
    /// Share of values in the first and last bins.
    pub outer_mass: f64,
}

/// Histogram and Kolmogorov–Smirnov distance to `U[0, 1]`.
pub fn pit_uniformity(u: &[f64], bins: usize) -> Result<PitSummary> {
    if u.is_empty() || bins == 0 {
        return Err(Error::InvalidInput("pit_uniformity needs values and at least one bin".into()));
    }
    if let Some(bad) = u.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::Domain(format!("PIT value {bad} outside [0, 1]")));
    }
    let mut histogram = vec![0usize; bins];
    for &x in u {
        histogram[((x * bins as f64) as usize).min(bins - 1)] += 1;
    }
    let mut s = u.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let ks = s
        .iter()
        .enumerate()
        .map(|(i, &x)| ((i + 1) as f64 / n - x).max(x - i as f64 / n))
        .fold(0.0, f64::max);
    let outer = if bins >= 2 { histogram[0] + histogram[bins - 1] } else { histogram[0] };
    Ok(PitSummary {
        histogram,
        ks,
        outer_mass: outer as f64 / n,
    })
}

/// Inverse-distance weights with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialWeights {
    n: usize,
    w: Vec<f64>,
    total: f64,
}

impl SpatialWeights {
    pub fn inverse_distance(grid: &SensorGrid) -> Result<Self> {
        let n = grid.n();
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let d = grid.distance(i, j);
                    if !(d > 0.0) {
                        return Err(Error::InvalidInput(format!("sites {i} and {j} coincide")));
                    }
                    w[i * n + j] = 1.0 / d;
                }
            }
        }
        let total = w.iter().sum();
        Ok(Self { n, w, total })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn matrix(&self) -> &[f64] {
        &self.w
    }
}

/// Global Moran's I of one residual snapshot.
pub fn morans_i(eps: &[f64], weights: &SpatialWeights) -> Result<f64> {
    let n = weights.n;
    if eps.len() != n {
        return Err(Error::InvalidInput(format!("{} residuals for {n} sites", eps.len())));
    }
    let mean = eps.iter().sum::<f64>() / n as f64;
    let c: Vec<f64> = eps.iter().map(|e| e - mean).collect();
    let ss: f64 = c.iter().map(|x| x * x).sum();
    let scale = eps.iter().fold(0.0_f64, |m, e| m.max(e.abs()));
    if !(ss > n as f64 * (f64::EPSILON * scale).powi(2) * 16.0) {
        return Err(Error::Degenerate("zero residual variance".into()));
    }
    let mut cross = 0.0;
    for i in 0..n {
        let row = &weights.w[i * n..(i + 1) * n];
        cross += c[i] * row.iter().zip(&c).map(|(w, x)| w * x).sum::<f64>();
    }
    Ok(n as f64 / weights.total * cross / ss)
}

/// Mean Moran's I over the test snapshots of a forecast; snapshots with
/// zero residual variance are skipped.
pub fn mean_morans_i(r: &ForecastResult, weights: &SpatialWeights) -> Result<f64> {
    let vals: Vec<f64> = (0..r.t_steps()).filter_map(|t| morans_i(&r.residual_snapshot(t), weights).ok()).collect();
    if vals.is_empty() {
        return Err(Error::Degenerate("every residual snapshot is constant".into()));
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Matheron semivariance `½·mean (Z_i − Z_j)²` over site pairs in each
/// distance bin, pooled over all snapshots of a `T × N` series. Bins with
/// fewer than `min_pairs` site pairs report `None`.
pub fn empirical_variogram(
    series: &[f64],
    grid: &SensorGrid,
    edges: &[f64],
    min_pairs: usize,
) -> Result<Vec<BinEstimate>> {
    check_bins(edges, 1)?;
    let n = grid.n();
    if series.is_empty() || series.len() % n != 0 {
        return Err(Error::InvalidInput(format!("series length {} is not a multiple of N = {n}", series.len())));
    }
    let nb = edges.len() - 1;
    let mut pairs: Vec<Vec<(usize, usize)>> = vec![Vec::new(); nb];
    for i in 0..n {
        for j in i + 1..n {
            if let Some(b) = bin_of(edges, grid.distance(i, j)) {
                pairs[b].push((i, j));
            }
        }
    }
    let t = series.len() / n;
    Ok(pairs
        .iter()
        .enumerate()
        .map(|(b, ps)| {
            let value = (ps.len() >= min_pairs && !ps.is_empty()).then(|| {
                let mut s = 0.0;
                for snap in series.chunks(n) {
                    for &(i, j) in ps {
                        let d = snap[i] - snap[j];
                        s += d * d;
                    }
                }
                0.5 * s / (ps.len() * t) as f64
            });
            BinEstimate {
                lo: edges[b],
                hi: edges[b + 1],
                n_pairs: ps.len(),
                value,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub model_name: String,
    pub horizon: usize,
    pub rmse: f64,
    pub mae: f64,
    pub crps: Option<f64>,
    pub morans_i: Option<f64>,
    pub pit_ks: Option<f64>,
    pub pit_histogram: Option<Vec<usize>>,
    pub pit_outer_mass: Option<f64>,
}

/// Every metric that the forecast supports.
pub fn summarize(r: &ForecastResult, weights: Option<&SpatialWeights>) -> Result<MetricSummary> {
    let pit = match r.variances {
        Some(_) => Some(pit_uniformity(&pit_values(r)?, 10)?),
        None => None,
    };
    Ok(MetricSummary {
        model_name: r.model_name.clone(),
        horizon: r.horizon,
        rmse: rmse(r),
        mae: mae(r),
        crps: r.variances.as_ref().map(|_| crps(r)).transpose()?,
        morans_i: weights.map(|w| mean_morans_i(r, w)).transpose()?,
        pit_ks: pit.as_ref().map(|p| p.ks),
        pit_outer_mass: pit.as_ref().map(|p| p.outer_mass),
        pit_histogram: pit.map(|p| p.histogram),
    })
}
