use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use geoformer_core::autodiff::{Tape, Tensor};
use geoformer_core::geokernels::kernel_bias_matrix;
use geoformer_core::model::{GeoFormer, ModelConfig};
use geoformer_core::{KernelFamily, KernelSpec, SensorGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_grid(n: usize, seed: u64) -> SensorGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SensorGrid::new((0..n).map(|_| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]).collect()).unwrap()
}

fn kernel_matrix(c: &mut Criterion) {
    let mut g = c.benchmark_group("kernel_bias_matrix");
    for n in [100, 200, 400] {
        let grid = random_grid(n, n as u64);
        g.throughput(Throughput::Elements((n * n) as u64));
        for family in [KernelFamily::Exponential, KernelFamily::Matern15] {
            let spec = KernelSpec::from_effective(family, 0.2, 1.0).unwrap();
            g.bench_with_input(BenchmarkId::new(format!("{family:?}"), n), &grid, |b, grid| {
                b.iter(|| kernel_bias_matrix(grid, &spec).unwrap())
            });
        }
    }
    g.finish();
}

fn attention(c: &mut Criterion) {
    let mut g = c.benchmark_group("geo_attention_forward");
    g.sample_size(20);
    for n in [50, 100, 200] {
        let grid = random_grid(n, 7);
        let m = GeoFormer::new(ModelConfig::default(), grid).unwrap();
        let d = m.config().d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::new(vec![n, d], (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let bias = Tensor::new(vec![1, n, n], m.grid().dist_matrix().iter().map(|v| (-v / 0.2).exp()).collect()).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| {
                let mut tape = Tape::new();
                let xv = tape.leaf(x.clone());
                let bv = tape.constant(bias.clone());
                let (out, _) = m.geo_attention(&mut tape, xv, 0, Some(bv), 1, false).unwrap();
                tape.value(out).data()[0]
            })
        });
    }
    g.finish();
}

fn window_forward(c: &mut Criterion) {
    let grid = SensorGrid::lattice(10).unwrap();
    let m = GeoFormer::new(ModelConfig::default(), grid).unwrap();
    let l = m.config().lookback;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w: Vec<f64> = (0..100 * l).map(|_| rng.gen_range(-2.0..2.0)).collect();
    c.bench_function("encoder_forward_n100", |b| b.iter(|| m.encoder_forward(&w).unwrap().0));
}

criterion_group!(benches, kernel_matrix, attention, window_forward);
criterion_main!(benches);
