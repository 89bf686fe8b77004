//! Numerical property suite: exact-arithmetic and Monte Carlo checks of the
//! building blocks, each reported as a measured value against a threshold.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{KernelGroup, Tape, Tensor};
use crate::baselines::KrigingOracle;
use crate::error::Result;
use crate::geokernels::{softplus, KernelFamily, SensorGrid};
use crate::grf_sim::{empirical_spatial_correlation, simulate_replicate, SimConfig};
use crate::model::{GeoFormer, ModelConfig, Variant};
use crate::stats::{crps_gaussian, diebold_mariano, morans_i, norm_cdf, SpatialWeights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn below(name: &str, value: f64, threshold: f64, detail: String) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            passed: value <= threshold,
            detail,
        }
    }
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest relative error of `∂Ψ/∂ρ` against central differences, over
/// every family, plus the chain through `λ·Ψ(d; softplus θρ)` on the tape.
pub fn kernel_gradient_error() -> Result<f64> {
    let mut worst: f64 = 0.0;
    for fam in KernelFamily::ALL {
        for &rho in &[0.05, 0.2, 0.7] {
            for &d in &[0.01, 0.1, 0.25, 0.5, 1.0] {
                let g = fam.correlation_grad_rho(d, rho);
                let h = 1e-6 * rho;
                let fd = (fam.correlation(d, rho + h) - fam.correlation(d, rho - h)) / (2.0 * h);
                if g.abs() > 1e-12 || fd.abs() > 1e-9 {
                    worst = worst.max(rel_err(g, fd, 1e-12));
                }
            }
        }
    }

    let grid = SensorGrid::lattice(3)?;
    let dist = grid.dist_matrix();
    let weights: Vec<f64> = (0..dist.len()).map(|k| ((k * 7) % 5) as f64 - 2.0).collect();
    for fam in KernelFamily::ALL {
        let (tr, tl) = (-1.2, 0.4);
        let eval = |tr: f64, tl: f64| -> f64 {
            let (rho, lam) = (softplus(tr), softplus(tl));
            dist.iter().zip(&weights).map(|(&d, w)| w * lam * fam.correlation(d, rho)).sum()
        };
        let rho = softplus(tr);
        let psi: Vec<f64> = dist.iter().map(|&d| fam.correlation(d, rho)).collect();
        let dpsi: Vec<f64> = dist.iter().map(|&d| fam.correlation_grad_rho(d, rho)).collect();
        let mut tape = Tape::new();
        let vr = tape.leaf(Tensor::new(vec![1], vec![tr])?);
        let vl = tape.leaf(Tensor::new(vec![1], vec![tl])?);
        let b = tape.kernel_bias(vr, vl, &[KernelGroup { psi: &psi, dpsi: &dpsi }])?;
        let w = tape.constant(Tensor::new(vec![1, 9, 9], weights.clone())?);
        let prod = tape.mul(b, w)?;
        let loss = tape.sum(prod);
        tape.backward(loss)?;
        let h = 1e-5;
        let fd_r = (eval(tr + h, tl) - eval(tr - h, tl)) / (2.0 * h);
        let fd_l = (eval(tr, tl + h) - eval(tr, tl - h)) / (2.0 * h);
        let gr = tape.grad(vr).map_or(0.0, |g| g[0]);
        let gl = tape.grad(vl).map_or(0.0, |g| g[0]);
        worst = worst.max(rel_err(gr, fd_r, 1e-12)).max(rel_err(gl, fd_l, 1e-12));
    }
    Ok(worst)
}

fn tiny_model(variant: Variant, seed: u64) -> Result<GeoFormer> {
    let cfg = ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        lookback: 3,
        dropout_p: 0.0,
        variant,
        rho_init: Some(0.3),
        lambda_init: 1.3,
        seed,
        ..ModelConfig::default()
    };
    GeoFormer::new(cfg, SensorGrid::lattice(3)?)
}

fn model_loss(model: &GeoFormer, inputs: &[f64], target: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let (y, _) = model.forward(&mut tape, inputs, target.shape()[0], false, false, &mut rng)?;
    let l = tape.mse(y, target)?;
    Ok(tape.value(l).item())
}

/// Largest relative error between backpropagated and central-difference
/// gradients over every parameter entry of a tiny model (N=9, L=3,
/// d_model=8), for both variants. The denominator is floored at `1e-5`:
/// central differences with `h = 1e-6` carry about `1e-10` of roundoff,
/// which would otherwise dominate entries whose true gradient is zero
/// (key biases cancel inside the row softmax).
pub fn model_gradient_error(seed: u64) -> Result<(f64, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = 2;
    let inputs: Vec<f64> = (0..batch * 9 * 3).map(|_| rng.gen_range(-1.5..1.5)).collect();
    let target = Tensor::new(vec![batch, 9], (0..batch * 9).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let mut worst: f64 = 0.0;
    let mut at = String::new();
    for variant in [Variant::Geo, Variant::Vanilla] {
        let mut model = tiny_model(variant, seed)?;
        let mut tape = Tape::new();
        let mut step = rand::rngs::mock::StepRng::new(0, 0);
        let (y, _) = model.forward(&mut tape, &inputs, batch, false, false, &mut step)?;
        let l = tape.mse(y, &target)?;
        tape.backward(l)?;
        model.params_mut().zero_grad();
        tape.accumulate_into(model.params_mut())?;
        let ids: Vec<_> = model.params().iter().map(|(id, _)| id).collect();
        for id in ids {
            let analytic = model.params().grad(id).to_vec();
            for (e, &a) in analytic.iter().enumerate() {
                let orig = model.params().value(id).data()[e];
                let h = 1e-6 * orig.abs().max(1.0);
                model.params_mut().value_mut(id).data_mut()[e] = orig + h;
                model.invalidate_kernel_cache();
                let up = model_loss(&model, &inputs, &target)?;
                model.params_mut().value_mut(id).data_mut()[e] = orig - h;
                model.invalidate_kernel_cache();
                let down = model_loss(&model, &inputs, &target)?;
                model.params_mut().value_mut(id).data_mut()[e] = orig;
                model.invalidate_kernel_cache();
                let fd = (up - down) / (2.0 * h);
                let r = rel_err(a, fd, 1e-5);
                if r > worst {
                    worst = r;
                    at = format!("{variant} {}[{e}]: backprop {a:e}, finite difference {fd:e}", model.params().get(id).name);
                }
            }
        }
    }
    Ok((worst, at))
}

/// With query and key projections zeroed, every layer's attention must
/// equal `softmax(λΨ)` row by row. Returns the largest deviation.
pub fn nadaraya_watson_deviation(seed: u64) -> Result<f64> {
    let grid = SensorGrid::lattice(5)?;
    let cfg = ModelConfig {
        d_model: 16,
        n_heads: 4,
        lookback: 6,
        rho_init: Some(0.25),
        lambda_init: 2.5,
        seed,
        ..ModelConfig::default()
    };
    let mut model = GeoFormer::new(cfg, grid.clone())?;
    model.zero_query_key();
    let (rho, lam) = (model.rho()[0], model.lambda()[0]);
    let fam = model.config().kernel_family;
    let n = grid.n();
    let mut expected = vec![0.0; n * n];
    for i in 0..n {
        let row: Vec<f64> = (0..n).map(|j| lam * fam.correlation(grid.distance(i, j), rho)).collect();
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        for j in 0..n {
            expected[i * n + j] = (row[j] - m).exp() / z;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..3 {
        let w: Vec<f64> = (0..n * 6).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let (_, recs) = model.encoder_forward(&w)?;
        for r in &recs {
            for head in r.weights.data().chunks(n * n) {
                for (a, b) in head.iter().zip(&expected) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    Ok(worst)
}

/// Largest `|Σ_j A_ij − 1|` (or negative entry magnitude) over every head
/// and layer of default-width models of both variants on random windows.
pub fn attention_row_deviation(seed: u64) -> Result<f64> {
    let grid = SensorGrid::lattice(6)?;
    let n = grid.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for variant in [Variant::Geo, Variant::Vanilla] {
        let cfg = ModelConfig {
            variant,
            seed,
            ..ModelConfig::default()
        };
        let model = GeoFormer::new(cfg, grid.clone())?;
        let w: Vec<f64> = (0..n * model.config().lookback).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let (_, recs) = model.encoder_forward(&w)?;
        for r in &recs {
            for row in r.weights.data().chunks(n) {
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                worst = worst.max(row.iter().map(|&v| (-v).max(0.0)).fold(0.0, f64::max));
            }
        }
    }
    Ok(worst)
}

/// CRPS of `F` at `y` by composite Simpson integration of
/// `∫ (F(x) − 1{x ≥ y})² dx`, split at `y`.
pub fn crps_by_integration(y: f64, mu: f64, sigma: f64) -> f64 {
    let f = |x: f64| norm_cdf((x - mu) / sigma);
    let simpson = |a: f64, b: f64, g: &dyn Fn(f64) -> f64| {
        let m = 20_000;
        let h = (b - a) / m as f64;
        let mut s = g(a) + g(b);
        for k in 1..m {
            let x = a + k as f64 * h;
            s += if k % 2 == 1 { 4.0 } else { 2.0 } * g(x);
        }
        s * h / 3.0
    };
    let lo = (mu - 12.0 * sigma).min(y);
    let hi = (mu + 12.0 * sigma).max(y);
    simpson(lo, y, &|x| f(x).powi(2)) + simpson(y, hi, &|x| (1.0 - f(x)).powi(2))
}

/// Largest absolute gap between closed-form and integrated CRPS over 100
/// random triples.
pub fn crps_integration_error(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let mu = rng.gen_range(-3.0..3.0);
        let sigma = rng.gen_range(0.1..3.0);
        let y = rng.gen_range(-5.0..5.0);
        let c = crps_gaussian(y, mu, sigma)?;
        worst = worst.max((c - crps_by_integration(y, mu, sigma)).abs());
    }
    Ok(worst)
}

/// Gaussian conditioning of the newest snapshot on the `k` before it,
/// written against the full `N(k+1)`-dimensional joint covariance with an
/// explicit inverse. Returns `(mean, variance)` per site.
pub fn brute_force_kriging(grid: &SensorGrid, s: &SimConfig, k: usize, hist: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = grid.n();
    let fam = s.family()?;
    let total = n * (k + 1);
    let full = DMatrix::from_fn(total, total, |r, c| {
        let (ti, i) = (r / n, r % n);
        let (tj, j) = (c / n, c % n);
        let mut v = s.sigma2 * fam.correlation(grid.distance(i, j), s.rho_true) * s.phi_t.powi((ti as i32 - tj as i32).abs());
        if r == c {
            v += s.nugget;
        }
        v
    });
    let m = n * k;
    let soo = full.view((0, 0), (m, m)).into_owned();
    let sto = full.view((m, 0), (n, m)).into_owned();
    let stt = full.view((m, m), (n, n)).into_owned();
    let inv = soo
        .try_inverse()
        .ok_or_else(|| crate::Error::Degenerate("observation covariance is singular".into()))?;
    let z = DVector::from_fn(m, |r, _| hist[(r % n) * k + r / n]);
    let mean = &sto * &inv * z;
    let cov = stt - &sto * &inv * sto.transpose();
    Ok((mean.iter().copied().collect(), (0..n).map(|i| cov[(i, i)]).collect()))
}

/// Oracle vs brute-force conditioning on a 2×2 grid with depth 2.
pub fn kriging_bruteforce_deviation(seed: u64) -> Result<f64> {
    let grid = SensorGrid::lattice(2)?;
    let s = SimConfig::default();
    let k = 2;
    let oracle = KrigingOracle::new(&grid, &s, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let hist: Vec<f64> = (0..grid.n() * k).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let (m, v) = oracle.predict(&hist)?;
        let (bm, bv) = brute_force_kriging(&grid, &s, k, &hist)?;
        for i in 0..grid.n() {
            worst = worst.max((m[i] - bm[i]).abs()).max((v[i] - bv[i]).abs());
        }
    }
    Ok(worst)
}

/// Monte Carlo mean of Moran's I on iid Gaussian fields over a 10×10
/// lattice, in units of its standard error away from `−1/(N−1)`.
pub fn morans_null_z(seed: u64, draws: usize) -> Result<(f64, f64)> {
    let grid = SensorGrid::lattice(10)?;
    let w = SpatialWeights::inverse_distance(&grid)?;
    let n = grid.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vals: Vec<f64> = (0..draws)
        .map(|_| {
            let eps: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            morans_i(&eps, &w)
        })
        .collect::<Result<_>>()?;
    let d = draws as f64;
    let mean = vals.iter().sum::<f64>() / d;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d - 1.0)).sqrt();
    let z = (mean + 1.0 / (n as f64 - 1.0)) / (sd / d.sqrt());
    Ok((mean, z))
}

/// Largest gap between the simulator's binned spatial correlogram and the
/// nugget-attenuated Matérn correlation averaged over the same pairs,
/// on one default-size replicate.
pub fn correlogram_deviation(seed: u64) -> Result<f64> {
    let cfg = SimConfig {
        seed,
        n_replicates: 1,
        ..SimConfig::default()
    };
    let ds = simulate_replicate(&cfg, 0)?;
    let fam = cfg.family()?;
    let edges = [0.04, 0.08, 0.12, 0.16, 0.24, 0.32, 0.48, 0.64];
    let bins = empirical_spatial_correlation(&ds, &edges)?;
    let atten = cfg.sigma2 / (cfg.sigma2 + cfg.nugget);
    let n = ds.n();
    let mut worst: f64 = 0.0;
    for b in &bins {
        let Some(v) = b.value else { continue };
        let mut s = 0.0;
        let mut c = 0usize;
        for i in 0..n {
            for j in i..n {
                let d = ds.grid.distance(i, j);
                if d >= b.lo && d < b.hi {
                    s += atten * fam.correlation(d, cfg.rho_true);
                    c += 1;
                }
            }
        }
        worst = worst.max((v - s / c as f64).abs());
    }
    Ok(worst)
}

/// `DM(e1, e2) + DM(e2, e1)` over random error pairs; exactly zero when the
/// statistic is antisymmetric.
pub fn dm_antisymmetry_gap(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for h in 1..=4 {
        let e1: Vec<f64> = (0..300).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let e2: Vec<f64> = (0..300).map(|_| 1.1 * rng.sample::<f64, _>(StandardNormal)).collect();
        let a = diebold_mariano(&e1, &e2, h)?.statistic;
        let b = diebold_mariano(&e2, &e1, h)?.statistic;
        worst = worst.max((a + b).abs());
    }
    Ok(worst)
}

/// Runs every check with the thresholds of the numerical property suite.
pub fn run_property_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    let v = kernel_gradient_error()?;
    out.push(CheckOutcome::below("kernel gradient rel. error", v, 1e-6, String::new()));
    let (v, at) = model_gradient_error(seed)?;
    out.push(CheckOutcome::below("full-model gradient rel. error", v, 1e-4, format!("N=9, L=3, d_model=8; worst {at}")));
    let v = nadaraya_watson_deviation(seed)?;
    out.push(CheckOutcome::below("Nadaraya-Watson reduction max deviation", v, 1e-12, String::new()));
    let v = crps_integration_error(seed)?;
    out.push(CheckOutcome::below("CRPS closed form vs integration", v, 1e-6, "100 triples".into()));
    let v = kriging_bruteforce_deviation(seed)?;
    out.push(CheckOutcome::below("Kriging vs brute-force conditioning", v, 1e-8, "N=4, k=2".into()));
    let (mean, z) = morans_null_z(seed, 4000)?;
    out.push(CheckOutcome::below(
        "Moran's I null mean (|z| vs -1/(N-1))",
        z.abs(),
        3.0,
        format!("mean {mean:.5}, expected {:.5}", -1.0 / 99.0),
    ));
    let v = correlogram_deviation(seed)?;
    out.push(CheckOutcome::below("simulator correlogram vs Matérn", v, 0.05, "N=400, T=2000".into()));
    let v = attention_row_deviation(seed)?;
    out.push(CheckOutcome::below("attention row-sum deviation", v, 1e-9, String::new()));
    let v = dm_antisymmetry_gap(seed)?;
    out.push(CheckOutcome::below("DM antisymmetry gap", v, 0.0, "exact".into()));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integrated_crps_matches_known_value() {
        assert!((crps_by_integration(0.0, 0.0, 1.0) - 0.2336949772551091).abs() < 1e-8);
    }

    #[test]
    fn cheap_checks_pass() {
        assert!(kernel_gradient_error().unwrap() <= 1e-6);
        assert!(kriging_bruteforce_deviation(1).unwrap() < 1e-8);
        assert_eq!(dm_antisymmetry_gap(2).unwrap(), 0.0);
        assert!(nadaraya_watson_deviation(3).unwrap() < 1e-12);
    }
}
