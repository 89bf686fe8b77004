//! Wall-time scaling of one attention layer in the number of sensors. Kept
//! in its own test binary so it does not share the CPU with other tests.

use std::time::Instant;

use geoformer_core::autodiff::{Tape, Tensor};
use geoformer_core::model::{GeoFormer, ModelConfig};
use geoformer_core::SensorGrid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn attention_seconds(n: usize, reps: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
    let locs = (0..n).map(|_| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]).collect();
    let grid = SensorGrid::new(locs).unwrap();
    let m = GeoFormer::new(ModelConfig::default(), grid).unwrap();
    let d = m.config().d_model;
    let x = Tensor::new(vec![n, d], (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let bias = Tensor::new(vec![1, n, n], m.grid().dist_matrix().iter().map(|v| (-v).exp()).collect()).unwrap();
    let mut best = f64::INFINITY;
    for _ in 0..reps {
        let t0 = Instant::now();
        for _ in 0..10 {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let b = tape.constant(bias.clone());
            let (out, _) = m.geo_attention(&mut tape, xv, 0, Some(b), 1, false).unwrap();
            std::hint::black_box(tape.value(out).data()[0]);
        }
        best = best.min(t0.elapsed().as_secs_f64());
    }
    best
}

#[test]
fn attention_time_grows_roughly_quadratically() {
    // warm the allocator and caches
    attention_seconds(100, 2);
    let t100 = attention_seconds(100, 7);
    let t200 = attention_seconds(200, 7);
    let ratio = t200 / t100;
    eprintln!("attention time N=100 {t100:.4}s, N=200 {t200:.4}s, ratio {ratio:.2}");
    assert!((2.5..=6.0).contains(&ratio), "ratio {ratio:.2}");
}
