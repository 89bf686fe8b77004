use geoformer_core::baselines::KrigingOracle;
use geoformer_core::grf_sim::{lag1_autocorrelation, simulate_replicate, split, SimConfig};
use geoformer_core::stats::{empirical_variogram, pit_uniformity, rmse, ForecastResult};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn sim(side: usize, t: usize) -> SimConfig {
    SimConfig {
        grid_side: side,
        t_steps: t,
        n_replicates: 1,
        ..SimConfig::default()
    }
}

#[test]
fn marginal_variance_is_sill_plus_nugget() {
    let ds = simulate_replicate(&sim(10, 2000), 0).unwrap();
    let x = &ds.observations;
    let m = x.iter().sum::<f64>() / x.len() as f64;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64;
    assert!((v - 1.05).abs() < 0.15, "variance {v}");
}

#[test]
fn zero_persistence_removes_temporal_correlation() {
    let cfg = SimConfig { phi_t: 0.0, ..sim(6, 2000) };
    let ds = simulate_replicate(&cfg, 0).unwrap();
    for i in 0..ds.n() {
        let r = lag1_autocorrelation(&ds.site_series(i));
        assert!(r.abs() < 0.1, "site {i}: {r}");
    }
}

#[test]
fn variogram_matches_the_generating_covariance() {
    let ds = simulate_replicate(&sim(20, 400), 0).unwrap();
    let bins = empirical_variogram(&ds.observations, &ds.grid, &[0.18, 0.22, 0.9, 1.0], 10).unwrap();
    let at_rho = bins[0].value.unwrap();
    // nugget + σ²(1 − (1 + √3)e^{−√3}) at h = ρ
    assert!((at_rho - 0.567).abs() < 0.06, "gamma(0.2) = {at_rho}");
    let sill = bins[2].value.unwrap();
    assert!((sill - 1.05).abs() < 0.1, "sill {sill}");
}

#[test]
fn deeper_kriging_conditioning_never_hurts_much() {
    let ds = simulate_replicate(&sim(6, 700), 0).unwrap();
    let lookback = 6;
    let sp = split(&ds, 500, 200, lookback).unwrap();
    let mut prev = f64::INFINITY;
    for depth in 1..=4 {
        let oracle = KrigingOracle::new(&ds.grid, &ds.config, depth).unwrap();
        let mut p = Vec::new();
        let mut y = Vec::new();
        for k in 0..sp.test.len() {
            p.extend(oracle.predict_window(&sp.test.input(k), lookback).unwrap().0);
            y.extend_from_slice(sp.test.target(k));
        }
        let r = rmse(&ForecastResult::new("kriging", 1, ds.n(), p, None, y).unwrap());
        assert!(r <= prev * 1.02, "depth {depth}: {r} after {prev}");
        prev = r;
    }
}

#[test]
fn calibrated_gaussian_forecasts_pass_ks() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 500;
    // KS critical value at the 1% level
    let crit = 1.628 / (n as f64).sqrt();
    let trials = 200;
    let mut passed = 0;
    for _ in 0..trials {
        let mut u = Vec::with_capacity(n);
        for _ in 0..n {
            let mu: f64 = Normal::new(0.0, 2.0).unwrap().sample(&mut rng);
            let s = 0.5 + mu.abs();
            let y = Normal::new(mu, s).unwrap().sample(&mut rng);
            u.push(geoformer_core::stats::norm_cdf((y - mu) / s));
        }
        passed += usize::from(pit_uniformity(&u, 10).unwrap().ks < crit);
    }
    assert!(passed as f64 >= 0.95 * trials as f64, "{passed}/{trials}");
}
