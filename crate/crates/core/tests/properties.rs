use geoformer_core::geokernels::{inverse_softplus, pairwise_distances, softplus};
use geoformer_core::grf_sim::{simulate_replicate, split_at, SimConfig};
use geoformer_core::linalg::{cholesky_jittered, JitterSchedule};
use geoformer_core::stats::{crps_gaussian, diebold_mariano_differential, morans_i, pit_uniformity, SpatialWeights};
use geoformer_core::training::mse_loss;
use geoformer_core::{KernelFamily, SensorGrid};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn family() -> impl Strategy<Value = KernelFamily> {
    prop::sample::select(KernelFamily::ALL.to_vec())
}

fn points(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<[f64; 2]>> {
    prop::collection::vec((0.0..1.0f64, 0.0..1.0f64).prop_map(|(x, y)| [x, y]), n)
}

proptest! {
    #[test]
    fn correlation_is_bounded_and_decreasing(f in family(), rho in 0.01..2.0f64, a in 0.0..3.0f64, b in 0.0..3.0f64) {
        let (near, far) = if a <= b { (a, b) } else { (b, a) };
        let (cn, cf) = (f.correlation(near, rho), f.correlation(far, rho));
        prop_assert!((0.0..=1.0).contains(&cn) && (0.0..=1.0).contains(&cf));
        prop_assert!(cf <= cn + 1e-15);
        prop_assert_eq!(f.correlation(0.0, rho), 1.0);
    }

    #[test]
    fn distances_form_a_metric(pts in points(2..12)) {
        let n = pts.len();
        let d = pairwise_distances(&pts).unwrap();
        for i in 0..n {
            prop_assert_eq!(d[i * n + i], 0.0);
            for j in 0..n {
                prop_assert_eq!(d[i * n + j], d[j * n + i]);
                for k in 0..n {
                    prop_assert!(d[i * n + k] <= d[i * n + j] + d[j * n + k] + 1e-12);
                }
            }
        }
    }

    #[test]
    fn softplus_round_trips(y in 1e-6..50.0f64) {
        let x = inverse_softplus(y).unwrap();
        prop_assert!((softplus(x) - y).abs() <= 1e-10 * y.max(1.0));
    }

    #[test]
    fn covariance_on_distinct_sites_factorises(pts in points(3..30), rho in 0.02..0.5f64, f in family()) {
        let n = pts.len();
        let d = pairwise_distances(&pts).unwrap();
        let c = DMatrix::from_fn(n, n, |i, j| f.correlation(d[i * n + j], rho) + if i == j { 0.05 } else { 0.0 });
        let (chol, jitter) = cholesky_jittered(&c, JitterSchedule::exact_first(1.0)).unwrap();
        prop_assert_eq!(jitter, 0.0);
        let l = chol.l();
        prop_assert!((&l * l.transpose() - &c).amax() < 1e-10);
    }

    #[test]
    fn morans_i_ignores_affine_rescaling(
        pts in points(4..15),
        eps in prop::collection::vec(-3.0..3.0f64, 15),
        scale in prop_oneof![-10.0..-0.1f64, 0.1..10.0f64],
        shift in -5.0..5.0f64,
    ) {
        let grid = SensorGrid::new(pts).unwrap();
        prop_assume!(grid.dist_matrix().iter().enumerate().all(|(k, &v)| k % (grid.n() + 1) == 0 || v > 1e-6));
        let w = SpatialWeights::inverse_distance(&grid).unwrap();
        let e = &eps[..grid.n()];
        let var = e.iter().map(|x| x * x).sum::<f64>();
        prop_assume!(var > 1e-3);
        let i0 = morans_i(e, &w).unwrap();
        let moved: Vec<f64> = e.iter().map(|x| scale * x + shift).collect();
        let i1 = morans_i(&moved, &w).unwrap();
        prop_assert!((i0 - i1).abs() < 1e-9, "{} vs {}", i0, i1);
        prop_assert!(i0.is_finite() && i0.abs() <= grid.n() as f64);
    }

    #[test]
    fn dm_statistic_is_antisymmetric(d in prop::collection::vec(-2.0..2.0f64, 10..200), lag in 0usize..5) {
        let a = diebold_mariano_differential(&d, lag);
        let neg: Vec<f64> = d.iter().map(|x| -x).collect();
        let b = diebold_mariano_differential(&neg, lag);
        match (a, b) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(a.statistic, -b.statistic);
                prop_assert!((a.p_one_sided + b.p_one_sided - 1.0).abs() < 1e-12);
            }
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "one direction failed"),
        }
    }

    #[test]
    fn crps_is_non_negative_and_translation_invariant(y in -5.0..5.0f64, mu in -5.0..5.0f64, s in 0.01..5.0f64, c in -10.0..10.0f64, k in 0.1..10.0f64) {
        let v = crps_gaussian(y, mu, s).unwrap();
        prop_assert!(v >= 0.0);
        prop_assert!((crps_gaussian(y + c, mu + c, s).unwrap() - v).abs() < 1e-10);
        prop_assert!((crps_gaussian(k * y, k * mu, k * s).unwrap() - k * v).abs() < 1e-9 * k.max(1.0));
    }

    #[test]
    fn pit_histogram_counts_every_value(u in prop::collection::vec(0.0..=1.0f64, 1..300), bins in 1usize..20) {
        let s = pit_uniformity(&u, bins).unwrap();
        prop_assert_eq!(s.histogram.iter().sum::<usize>(), u.len());
        prop_assert!((0.0..=1.0).contains(&s.ks));
        prop_assert!((0.0..=1.0).contains(&s.outer_mass));
    }

    #[test]
    fn mse_of_a_constant_offset_is_its_square(x in prop::collection::vec(-5.0..5.0f64, 1..50), c in -3.0..3.0f64) {
        let y: Vec<f64> = x.iter().map(|v| v + c).collect();
        prop_assert!((mse_loss(&x, &y).unwrap() - c * c).abs() < 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn split_window_counts_follow_the_sizes(start in 0usize..20, lookback in 1usize..8, extra in 1usize..40, t_test in 1usize..20) {
        let sim = SimConfig { grid_side: 2, t_steps: 120, n_replicates: 1, ..SimConfig::default() };
        let ds = simulate_replicate(&sim, 0).unwrap();
        let t_train = lookback + extra;
        let sp = split_at(&ds, start, t_train, t_test, lookback);
        if start + t_train + t_test <= ds.t_steps() {
            let sp = sp.unwrap();
            prop_assert_eq!(sp.train.len(), t_train - lookback);
            prop_assert_eq!(sp.test.len(), t_test);
            prop_assert!(sp.train.targets().iter().all(|&t| t < start + t_train));
            prop_assert!(sp.test.targets().iter().all(|&t| t >= start + t_train));
        } else {
            prop_assert!(sp.is_err());
        }
    }
}
