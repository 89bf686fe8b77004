use geoformer_core::autodiff::{Tape, Tensor};
use geoformer_core::checks;
use geoformer_core::grf_sim::{simulate_replicate, split, SimConfig};
use geoformer_core::model::{GeoFormer, ModelConfig, Variant, THETA_LAMBDA, THETA_RHO};
use geoformer_core::SensorGrid;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(variant: Variant, seed: u64) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 4,
        n_layers: 2,
        lookback: 4,
        dropout_p: 0.1,
        variant,
        rho_init: Some(0.2),
        seed,
        ..ModelConfig::default()
    }
}

fn random_window(n: usize, l: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n * l).map(|_| rng.gen_range(-2.0..2.0)).collect()
}

/// Row `k` of the result is row `perm[k]` of `window` (rows of length `l`).
fn permute_rows(window: &[f64], perm: &[usize], l: usize) -> Vec<f64> {
    perm.iter().flat_map(|&p| window[p * l..(p + 1) * l].iter().copied()).collect()
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let (err, at) = checks::model_gradient_error(5).unwrap();
    assert!(err <= 1e-4, "max rel err {err:e} at {at}");
}

#[test]
fn zeroed_query_key_reduces_to_nadaraya_watson() {
    let dev = checks::nadaraya_watson_deviation(8).unwrap();
    assert!(dev < 1e-12, "{dev:e}");
}

#[test]
fn co_located_sensors_get_identical_rows_without_query_key() {
    let locs = vec![[0.1, 0.2], [0.5, 0.5], [0.5, 0.5], [0.9, 0.3], [0.3, 0.8]];
    let grid = SensorGrid::new(locs).unwrap();
    let mut m = GeoFormer::new(small(Variant::Geo, 1), grid).unwrap();
    m.zero_query_key();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (_, recs) = m.encoder_forward(&random_window(5, 4, &mut rng)).unwrap();
    for r in &recs {
        for head in r.weights.data().chunks(25) {
            assert_eq!(&head[5..10], &head[10..15]);
        }
    }
}

#[test]
fn zero_bias_is_plain_scaled_dot_product_attention() {
    let grid = SensorGrid::lattice(4).unwrap();
    let m = GeoFormer::new(small(Variant::Geo, 2), grid).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::new(vec![16, 16], (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();

    let mut t1 = Tape::new();
    let v1 = t1.leaf(x.clone());
    let (plain, _) = m.geo_attention(&mut t1, v1, 0, None, 1, false).unwrap();

    let mut t2 = Tape::new();
    let v2 = t2.leaf(x);
    let zero = t2.constant(Tensor::zeros(&[1, 16, 16]));
    let (biased, _) = m.geo_attention(&mut t2, v2, 0, Some(zero), 1, false).unwrap();
    assert_eq!(t1.value(plain).data(), t2.value(biased).data());
}

#[test]
fn vanishing_lambda_removes_the_prior() {
    let grid = SensorGrid::lattice(3).unwrap();
    let mut m = GeoFormer::new(small(Variant::Geo, 3), grid).unwrap();
    let id = m.params().id(THETA_LAMBDA).unwrap();
    m.params_mut().value_mut(id).data_mut()[0] = -1000.0;
    assert_eq!(m.lambda()[0], 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (_, recs) = m.encoder_forward(&random_window(9, 4, &mut rng)).unwrap();
    for r in &recs {
        assert!(r.bias.as_ref().unwrap().data().iter().all(|&b| b == 0.0));
        assert_eq!(r.geo_bias_share, 0.0);
    }
}

#[test]
fn geo_is_equivariant_only_when_geometry_moves_with_the_sensors() {
    let grid = SensorGrid::lattice(4).unwrap();
    let n = grid.n();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let m = GeoFormer::new(small(Variant::Geo, 4), grid.clone()).unwrap();
    let w = random_window(n, 4, &mut rng);
    let (y, _) = m.encoder_forward(&w).unwrap();
    let pw = permute_rows(&w, &perm, 4);

    let mut moved = m.clone();
    moved.set_grid(grid.permuted(&perm).unwrap()).unwrap();
    let (py, _) = moved.encoder_forward(&pw).unwrap();
    for (k, &p) in perm.iter().enumerate() {
        assert!((py[k] - y[p]).abs() < 1e-10, "site {k}");
    }

    let (stale, _) = m.encoder_forward(&pw).unwrap();
    let gap = perm.iter().enumerate().map(|(k, &p)| (stale[k] - y[p]).abs()).fold(0.0, f64::max);
    assert!(gap > 1e-6, "geometry had no effect: {gap:e}");
}

#[test]
fn vanilla_without_positions_is_permutation_blind() {
    let grid = SensorGrid::lattice(4).unwrap();
    let n = grid.n();
    let mut m = GeoFormer::new(small(Variant::Vanilla, 5), grid).unwrap();
    m.positional_embedding_mut().unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let w = random_window(n, 4, &mut rng);
    let (y, _) = m.encoder_forward(&w).unwrap();
    let (py, _) = m.encoder_forward(&permute_rows(&w, &perm, 4)).unwrap();
    for (k, &p) in perm.iter().enumerate() {
        assert!((py[k] - y[p]).abs() < 1e-10);
    }
}

#[test]
fn kernel_parameters_receive_gradient() {
    let grid = SensorGrid::lattice(4).unwrap();
    let mut m = GeoFormer::new(small(Variant::Geo, 6), grid).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let inputs = random_window(16 * 3, 4, &mut rng);
    let target = Tensor::new(vec![3, 16], (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let mut tape = Tape::new();
    let (y, _) = m.forward(&mut tape, &inputs, 3, true, false, &mut rng).unwrap();
    let loss = tape.mse(y, &target).unwrap();
    tape.backward(loss).unwrap();
    m.params_mut().zero_grad();
    tape.accumulate_into(m.params_mut()).unwrap();
    for name in [THETA_RHO, THETA_LAMBDA] {
        let g = m.params().grad(m.params().id(name).unwrap())[0];
        assert!(g != 0.0 && g.is_finite(), "{name}: {g}");
    }
}

#[test]
fn attention_rows_are_stochastic_at_default_width() {
    let dev = checks::attention_row_deviation(13).unwrap();
    assert!(dev < 1e-9, "{dev:e}");
}

#[test]
fn mc_mean_converges_near_deterministic_output() {
    let grid = SensorGrid::lattice(3).unwrap();
    let cfg = ModelConfig { seed: 7, ..ModelConfig::default() };
    let m = GeoFormer::new(cfg, grid).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w = random_window(9, 12, &mut rng);
    let (det, _) = m.encoder_forward(&w).unwrap();
    let scale = (det.iter().map(|v| v * v).sum::<f64>() / 9.0).sqrt();
    let n_mc = 500;
    let (m1, v1) = m.predict_distribution(&w, n_mc, &mut ChaCha8Rng::seed_from_u64(70)).unwrap();
    let (m2, v2) = m.predict_distribution(&w, n_mc, &mut ChaCha8Rng::seed_from_u64(71)).unwrap();
    for i in 0..9 {
        // two independent estimates agree within Monte Carlo error
        let se = ((v1[i] + v2[i]) / n_mc as f64).sqrt();
        assert!((m1[i] - m2[i]).abs() < 4.0 * se, "site {i}: {} vs {}", m1[i], m2[i]);
        // inverted dropout is unbiased only ahead of linear maps; layer norm
        // and ReLU leave an O(p) gap to the eval-mode output
        assert!((m1[i] - det[i]).abs() < 0.15 * scale + 4.0 * se, "site {i}: {} vs {}", m1[i], det[i]);
        assert!(v1[i] > 0.0);
    }
}

#[test]
fn recursive_forecast_first_step_is_one_step_prediction() {
    let sim = SimConfig {
        grid_side: 3,
        t_steps: 80,
        n_replicates: 1,
        ..SimConfig::default()
    };
    let ds = simulate_replicate(&sim, 0).unwrap();
    let sp = split(&ds, 50, 20, 4).unwrap();
    let m = GeoFormer::new(small(Variant::Geo, 8), ds.grid.clone()).unwrap();
    let one = m.predict_many(&sp.test, 7).unwrap();
    let rec = m.predict_recursive(&sp.test, 3, 7).unwrap();
    assert_eq!(rec.len(), sp.test.len());
    for (a, b) in one.iter().zip(&rec) {
        assert_eq!(b.len(), 3);
        assert_eq!(a, &b[0]);
    }
    // the second step sees the first prediction as its newest column
    let mut w = sp.test.input(0);
    for i in 0..9 {
        let row = &mut w[i * 4..(i + 1) * 4];
        row.copy_within(1.., 0);
        row[3] = rec[0][0][i];
    }
    let (y2, _) = m.encoder_forward(&w).unwrap();
    for i in 0..9 {
        assert!((y2[i] - rec[0][1][i]).abs() < 1e-12);
    }
    assert!(m.predict_recursive(&sp.test, 0, 4).is_err());
}
