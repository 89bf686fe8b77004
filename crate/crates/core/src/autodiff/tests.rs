use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::geokernels::{softplus, KernelFamily, SensorGrid};

type Build = dyn Fn(&mut Tape, &[Var]) -> Var;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Norm-wise relative error between the analytic gradient of
/// `sum(f(inputs) ⊙ w)` and its central finite difference.
fn grad_check(inputs: &[Tensor], rng: &mut ChaCha8Rng, f: &Build) -> f64 {
    let eval = |vals: &[Tensor], w: Option<&Tensor>| -> (f64, Tape, Vec<Var>, Tensor) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars);
        let w = w.cloned().unwrap_or_else(|| {
            let mut r = ChaCha8Rng::seed_from_u64(99);
            rand_tensor(&mut r, tape.value(out).shape())
        });
        let wv = tape.constant(w.clone());
        let prod = tape.mul(out, wv).unwrap();
        let s = tape.sum(prod);
        let val = tape.value(s).item();
        tape.backward(s).unwrap();
        (val, tape, vars, w)
    };
    let _ = rng;
    let (_, tape, vars, w) = eval(inputs, None);
    let h = 1e-5;
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (k, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[k]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; input.numel()]);
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let fd = (eval(&plus, Some(&w)).0 - eval(&minus, Some(&w)).0) / (2.0 * h);
            num += (analytic[i] - fd).powi(2);
            den = den.max(analytic[i].abs()).max(fd.abs());
        }
    }
    num.sqrt() / den.max(1e-12)
}

fn check_op(name: &str, shapes: &[&[usize]], trials: usize, tol: f64, f: &Build) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let inputs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
        worst = worst.max(grad_check(&inputs, &mut rng, f));
    }
    assert!(worst <= tol, "{name}: worst relative error {worst:e}");
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::new();
    let x = Tensor::from_fn(&[3, 2], |k| k as f64 + 0.5);
    let i3 = tape.constant(Tensor::eye(3));
    let xv = tape.constant(x.clone());
    let y = tape.matmul(i3, xv).unwrap();
    assert_eq!(tape.value(y), &x);

    let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let b = tape.constant(Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap());
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[2.0, 4.0]);

    let bad = tape.matmul(a, i3);
    assert!(matches!(bad, Err(Error::ShapeMismatch { .. })));
}

#[test]
fn matmul_gradient_of_sum_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[5, 4]);
    let b = rand_tensor(&mut rng, &[4, 3]);
    let err = grad_check(&[a, b], &mut rng, &|t, v| t.matmul(v[0], v[1]).unwrap());
    assert!(err < 1e-6, "{err}");
}

#[test]
fn gradcheck_matmul_all_transposes() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let sa: &[usize] = if ta { &[3, 4] } else { &[4, 3] };
        let sb: &[usize] = if tb { &[2, 3] } else { &[3, 2] };
        check_op("matmul", &[sa, sb], 100, 1e-5, &move |t, v| t.matmul_t(v[0], v[1], ta, tb).unwrap());
    }
}

#[test]
fn gradcheck_batch_matmul() {
    for (ta, tb) in [(false, false), (false, true), (true, false)] {
        let sa: &[usize] = if ta { &[2, 3, 4] } else { &[2, 4, 3] };
        let sb: &[usize] = if tb { &[2, 5, 3] } else { &[2, 3, 5] };
        check_op("batch_matmul", &[sa, sb], 100, 1e-5, &move |t, v| {
            t.batch_matmul_t(v[0], v[1], ta, tb).unwrap()
        });
    }
}

#[test]
fn gradcheck_elementwise() {
    check_op("add", &[&[3, 4], &[3, 4]], 100, 1e-5, &|t, v| t.add(v[0], v[1]).unwrap());
    check_op("sub", &[&[3, 4], &[3, 4]], 100, 1e-5, &|t, v| t.sub(v[0], v[1]).unwrap());
    check_op("mul", &[&[3, 4], &[3, 4]], 100, 1e-5, &|t, v| t.mul(v[0], v[1]).unwrap());
    check_op("scale", &[&[3, 4]], 100, 1e-5, &|t, v| t.scale(v[0], -1.7));
    check_op("add_tiled", &[&[6, 4], &[2, 4]], 100, 1e-5, &|t, v| t.add_tiled(v[0], v[1]).unwrap());
    check_op("relu", &[&[4, 5]], 100, 1e-5, &|t, v| t.relu(v[0]));
    check_op("sum", &[&[4, 5]], 100, 1e-5, &|t, v| t.sum(v[0]));
    check_op("mean", &[&[4, 5]], 100, 1e-5, &|t, v| t.mean(v[0]));
}

#[test]
fn gradcheck_softmax_rows() {
    check_op("softmax", &[&[3, 6]], 100, 1e-5, &|t, v| t.softmax_rows(v[0]));
}

#[test]
fn gradcheck_attention_softmax() {
    check_op("attention_softmax", &[&[4, 3, 3], &[2, 3, 3]], 100, 1e-5, &|t, v| {
        t.attention_softmax(v[0], Some(v[1]), 0.7).unwrap()
    });
    check_op("attention_softmax/no bias", &[&[2, 3, 3]], 100, 1e-5, &|t, v| {
        t.attention_softmax(v[0], None, 0.7).unwrap()
    });
}

#[test]
fn attention_softmax_matches_unfused_ops() {
    let mut t = Tape::new();
    let a = t.leaf(Tensor::from_fn(&[4, 3, 3], |k| (k as f64 * 0.7).sin()));
    let b = t.leaf(Tensor::from_fn(&[2, 3, 3], |k| (k as f64 * 0.3).cos()));
    let fused = t.attention_softmax(a, Some(b), 0.25).unwrap();
    let s = t.scale(a, 0.25);
    let s = t.add_tiled(s, b).unwrap();
    let plain = t.softmax_rows(s);
    for (x, y) in t.value(fused).data().iter().zip(t.value(plain).data()) {
        assert!((x - y).abs() < 1e-15);
    }
}

#[test]
fn gradcheck_layer_norm() {
    check_op("layer_norm", &[&[4, 6], &[6], &[6]], 100, 1e-5, &|t, v| {
        t.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS).unwrap()
    });
}

#[test]
fn gradcheck_dropout_with_fixed_mask() {
    check_op("dropout", &[&[5, 5]], 100, 1e-5, &|t, v| {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        t.dropout(v[0], 0.3, true, &mut r).unwrap()
    });
}

#[test]
fn gradcheck_head_split_merge_and_reshape() {
    check_op("split_heads", &[&[6, 4]], 100, 1e-5, &|t, v| t.split_heads(v[0], 3, 2).unwrap());
    check_op("merge_heads", &[&[4, 3, 2]], 100, 1e-5, &|t, v| t.merge_heads(v[0], 2).unwrap());
    check_op("reshape", &[&[6, 4]], 100, 1e-5, &|t, v| t.reshape(v[0], &[4, 6]).unwrap());
}

#[test]
fn gradcheck_mse() {
    let target = Tensor::from_fn(&[2, 3], |k| k as f64 * 0.1);
    check_op("mse", &[&[2, 3]], 100, 1e-5, &move |t, v| t.mse(v[0], &target).unwrap());
}

#[test]
fn gradcheck_kernel_bias() {
    let grid = SensorGrid::lattice(3).unwrap();
    for fam in KernelFamily::ALL {
        let grid = grid.clone();
        check_op("kernel_bias", &[&[2], &[2]], 100, 1e-5, &move |t, v| {
            let tr = t.value(v[0]).data().to_vec();
            let mats: Vec<(Vec<f64>, Vec<f64>)> = tr
                .iter()
                .map(|&x| {
                    let rho = softplus(x);
                    let d = grid.dist_matrix();
                    (
                        d.iter().map(|&z| fam.correlation(z, rho)).collect(),
                        d.iter().map(|&z| fam.correlation_grad_rho(z, rho)).collect(),
                    )
                })
                .collect();
            let groups: Vec<KernelGroup<'_>> = mats
                .iter()
                .map(|(p, dp)| KernelGroup { psi: p, dpsi: dp })
                .collect();
            t.kernel_bias(v[0], v[1], &groups).unwrap()
        });
    }
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 3], vec![2.5; 3]).unwrap());
    let y = tape.softmax_rows(x);
    for &p in tape.value(y).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = tape.constant(Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap());
    let y = tape.softmax_rows(x);
    let d = tape.value(y).data();
    assert!((d[0] - 1.0).abs() < 1e-12 && d[1].abs() < 1e-12 && d[1] >= 0.0);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_fn(&[20, 17], |_| rng.gen_range(-30.0..30.0)));
    let y = tape.softmax_rows(x);
    for row in tape.value(y).data().chunks(17) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn dropout_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_fn(&[10, 10], |k| k as f64));
    let same = tape.dropout(x, 0.0, true, &mut rng).unwrap();
    assert_eq!(same, x);
    let eval = tape.dropout(x, 0.5, false, &mut rng).unwrap();
    assert_eq!(eval, x);
    assert!(matches!(tape.dropout(x, 1.0, true, &mut rng), Err(Error::Domain(_))));
    assert!(tape.dropout(x, -0.1, true, &mut rng).is_err());

    let ones = tape.constant(Tensor::full(&[100, 100], 1.0));
    let d = tape.dropout(ones, 0.25, true, &mut rng).unwrap();
    let vals = tape.value(d).data();
    let zeros = vals.iter().filter(|&&v| v == 0.0).count() as f64 / vals.len() as f64;
    assert!((zeros - 0.25).abs() < 0.02);
    assert!(vals.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-15));
}

#[test]
fn layer_norm_of_constant_row_is_zero() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[2, 8], 3.7));
    let g = tape.constant(Tensor::full(&[8], 1.0));
    let b = tape.constant(Tensor::zeros(&[8]));
    let y = tape.layer_norm(x, g, b, LAYER_NORM_EPS).unwrap();
    assert!(tape.value(y).data().iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn relu_gradient_vanishes_for_negative_input() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![3], vec![-2.0, -0.5, 1.5]).unwrap());
    let y = tape.relu(x);
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
}

#[test]
fn linear_sum_gradient_is_broadcast_of_input() {
    // loss = sum(W·x) ⇒ ∂loss/∂W_ij = x_j
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::from_fn(&[2, 3], |k| k as f64), true).unwrap();
    let mut tape = Tape::new();
    let wv = tape.param(&store, w);
    let x = tape.constant(Tensor::new(vec![3, 1], vec![0.5, -1.0, 2.0]).unwrap());
    let y = tape.matmul(wv, x).unwrap();
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    tape.accumulate_into(&mut store).unwrap();
    assert_eq!(store.grad(w), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
}

#[test]
fn backward_twice_is_an_error() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(2.0));
    let y = tape.scale(x, 3.0);
    tape.backward(y).unwrap();
    assert!(matches!(tape.backward(y), Err(Error::Autodiff(_))));
}

#[test]
fn accumulating_without_zero_grad_is_an_error() {
    let mut store = ParamStore::new();
    let p = store.add("p", Tensor::scalar(1.0), true).unwrap();
    for round in 0..2 {
        let mut tape = Tape::new();
        let v = tape.param(&store, p);
        let y = tape.scale(v, 2.0);
        tape.backward(y).unwrap();
        let r = tape.accumulate_into(&mut store);
        if round == 0 {
            r.unwrap();
        } else {
            assert!(matches!(r, Err(Error::Autodiff(_))));
        }
    }
    store.zero_grad();
    assert_eq!(store.grad(p), &[0.0]);
}

#[test]
fn backward_needs_scalar_root() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2]));
    assert!(tape.backward(x).is_err());
}

#[test]
fn duplicate_parameter_names_rejected() {
    let mut store = ParamStore::new();
    store.add("a", Tensor::scalar(0.0), true).unwrap();
    assert!(store.add("a", Tensor::scalar(1.0), true).is_err());
}

#[test]
fn constant_branches_receive_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[2, 2], 1.0));
    let c = tape.constant(Tensor::full(&[2, 2], 3.0));
    let y = tape.mul(x, c).unwrap();
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert!(tape.grad(c).is_none());
    assert_eq!(tape.grad(x).unwrap(), &[3.0; 4]);
}
