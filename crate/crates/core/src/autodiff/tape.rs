//! Dynamic reverse-mode tape.
//!
//! Every forward pass records its operations on a fresh [`Tape`]; node ids are
//! assigned in creation order, so a reverse sweep over ids is a valid
//! topological order and gradient accumulation is deterministic.

use rand::Rng;

use super::gemm::gemm;
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::geokernels::softplus_grad;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Per-group kernel data for [`Tape::kernel_bias`]: Ψ(D; ρ_g) and ∂Ψ/∂ρ at ρ_g.
pub struct KernelGroup<'a> {
    pub psi: &'a [f64],
    pub dpsi: &'a [f64],
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `a + b` with `b` repeated cyclically over `a`'s flat index.
    AddTiled(Var, Var),
    Relu(Var),
    Dropout {
        a: Var,
        mask: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    /// `softmax_rows(scale·a + tile(bias))`.
    AttentionSoftmax {
        a: Var,
        bias: Option<Var>,
        scale: f64,
    },
    SplitHeads {
        a: Var,
        rows: usize,
        heads: usize,
    },
    MergeHeads {
        a: Var,
        rows: usize,
        heads: usize,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Mse {
        pred: Var,
        target: Vec<f64>,
    },
    KernelBias {
        theta_rho: Var,
        theta_lambda: Var,
        psi: Vec<f64>,
        dpsi: Vec<f64>,
        nn: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph for one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    bindings: Vec<(Var, ParamId)>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            bindings: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Input that gradients flow into (a differentiable leaf).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Input excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf holding a copy of a stored parameter; its gradient is written
    /// back by [`Tape::accumulate_into`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.leaf(store.value(id).clone());
        self.bindings.push((v, id));
        v
    }

    /// `op(a)·op(b)` for rank-2 operands.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 {
            return Err(shape_err("matmul", av, bv));
        }
        let (m, ka) = if ta {
            (av.shape()[1], av.shape()[0])
        } else {
            (av.shape()[0], av.shape()[1])
        };
        let (kb, n) = if tb {
            (bv.shape()[1], bv.shape()[0])
        } else {
            (bv.shape()[0], bv.shape()[1])
        };
        if ka != kb {
            return Err(shape_err("matmul", av, bv));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, ka, n, av.data(), ta, bv.data(), tb, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, ta, tb }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Slice-wise `op(a[s])·op(b[s])` for rank-3 operands `[S, ·, ·]`.
    pub fn batch_matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 3 || bv.rank() != 3 || av.shape()[0] != bv.shape()[0] {
            return Err(shape_err("batch_matmul", av, bv));
        }
        let s = av.shape()[0];
        let (r0, r1) = (av.shape()[1], av.shape()[2]);
        let (c0, c1) = (bv.shape()[1], bv.shape()[2]);
        let (m, ka) = if ta { (r1, r0) } else { (r0, r1) };
        let (kb, n) = if tb { (c1, c0) } else { (c0, c1) };
        if ka != kb {
            return Err(shape_err("batch_matmul", av, bv));
        }
        let mut out = vec![0.0; s * m * n];
        let (sa, sb, sc) = (r0 * r1, c0 * c1, m * n);
        for i in 0..s {
            gemm(
                m,
                ka,
                n,
                &av.data()[i * sa..(i + 1) * sa],
                ta,
                &bv.data()[i * sb..(i + 1) * sb],
                tb,
                0.0,
                &mut out[i * sc..(i + 1) * sc],
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![s, m, n], out)?,
            Op::BatchMatMul { a, b, ta, tb },
            rg,
        ))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(op, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let t = Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| x * c).collect())
            .expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    /// `a + b` where `b` is repeated over `a`: `out[k] = a[k] + b[k mod |b|]`.
    ///
    /// Covers bias rows (`b` of length = last dim), per-node tables broadcast
    /// over a batch, and per-head bias matrices broadcast over `[B·H, N, N]`.
    pub fn add_tiled(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let lb = bv.numel();
        if lb == 0 || av.numel() % lb != 0 {
            return Err(shape_err("add_tiled", av, bv));
        }
        let mut out = av.data().to_vec();
        for chunk in out.chunks_exact_mut(lb) {
            for (o, &y) in chunk.iter_mut().zip(bv.data()) {
                *o += y;
            }
        }
        let shape = av.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddTiled(a, b), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let t = Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| x.max(0.0)).collect())
            .expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    /// Inverted dropout. When `active` is false (or `p == 0`) this is the
    /// identity and records nothing.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, active: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Domain(format!("dropout rate must lie in [0, 1), got {p}")));
        }
        if !active || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let av = self.value(a);
        let mask: Vec<f64> = (0..av.numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = av.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Dropout { a, mask }, rg))
    }

    /// Layer normalisation over the last dimension with variance floor `eps`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.numel() != d || bv.numel() != d {
            return Err(shape_err("layer_norm", xv, gv));
        }
        let rows = xv.numel() / d;
        let mut xhat = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Softmax over the last dimension, with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let d = av.last_dim();
        let mut out = av.data().to_vec();
        for row in out.chunks_exact_mut(d) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            let inv = 1.0 / s;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let t = Tensor::new(av.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::SoftmaxRows(a), rg)
    }

    /// Fused `softmax_rows(scale·a + b)` with `b` tiled over `a` as in
    /// [`add_tiled`](Self::add_tiled). Saves two full-size intermediates on
    /// the attention logits.
    pub fn attention_softmax(&mut self, a: Var, bias: Option<Var>, scale: f64) -> Result<Var> {
        let av = self.value(a);
        let d = av.last_dim();
        let bv = match bias {
            Some(b) => {
                let bv = self.value(b);
                if bv.numel() == 0 || av.numel() % bv.numel() != 0 || bv.numel() % d != 0 {
                    return Err(shape_err("attention_softmax", av, bv));
                }
                Some(bv.data())
            }
            None => None,
        };
        let mut out = vec![0.0; av.numel()];
        for (r, (dst, src)) in out.chunks_exact_mut(d).zip(av.data().chunks_exact(d)).enumerate() {
            match bv {
                Some(b) => {
                    let off = (r * d) % b.len();
                    for ((o, x), y) in dst.iter_mut().zip(src).zip(&b[off..off + d]) {
                        *o = scale * x + y;
                    }
                }
                None => dst.iter_mut().zip(src).for_each(|(o, x)| *o = scale * x),
            }
            let mx = dst.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in dst.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            let inv = 1.0 / s;
            dst.iter_mut().for_each(|v| *v *= inv);
        }
        let t = Tensor::new(av.shape().to_vec(), out)?;
        let rg = self.rg(a) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(t, Op::AttentionSoftmax { a, bias, scale }, rg))
    }

    /// `[B·N, H·dk]` → `[B·H, N, dk]` given `rows = N`.
    pub fn split_heads(&mut self, a: Var, rows: usize, heads: usize) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 || av.shape()[0] % rows != 0 || av.shape()[1] % heads != 0 {
            return Err(Error::ShapeMismatch {
                op: "split_heads",
                left: av.shape().to_vec(),
                right: vec![rows, heads],
            });
        }
        let b = av.shape()[0] / rows;
        let d = av.shape()[1];
        let dk = d / heads;
        let src = av.data();
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for h in 0..heads {
                for i in 0..rows {
                    let s = (bi * rows + i) * d + h * dk;
                    let o = ((bi * heads + h) * rows + i) * dk;
                    out[o..o + dk].copy_from_slice(&src[s..s + dk]);
                }
            }
        }
        let t = Tensor::new(vec![b * heads, rows, dk], out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::SplitHeads { a, rows, heads }, rg))
    }

    /// Inverse of [`split_heads`](Self::split_heads): `[B·H, N, dk]` → `[B·N, H·dk]`.
    pub fn merge_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 3 || av.shape()[0] % heads != 0 {
            return Err(Error::ShapeMismatch {
                op: "merge_heads",
                left: av.shape().to_vec(),
                right: vec![heads],
            });
        }
        let (s, rows, dk) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let b = s / heads;
        let d = dk * heads;
        let src = av.data();
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for h in 0..heads {
                for i in 0..rows {
                    let o = (bi * rows + i) * d + h * dk;
                    let sidx = ((bi * heads + h) * rows + i) * dk;
                    out[o..o + dk].copy_from_slice(&src[sidx..sidx + dk]);
                }
            }
        }
        let t = Tensor::new(vec![b * rows, d], out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::MergeHeads { a, rows, heads }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.data().iter().sum::<f64>() / av.numel() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Mean squared error against a fixed target of the same shape.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(shape_err("mse", pv, target));
        }
        if pv.numel() == 0 {
            return Err(Error::InvalidInput("mse of empty vectors".into()));
        }
        let n = pv.numel() as f64;
        let s = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(s),
            Op::Mse {
                pred,
                target: target.data().to_vec(),
            },
            rg,
        ))
    }

    /// `[G, N, N]` stack of `softplus(θλ_g)·Ψ(D; softplus(θρ_g))`.
    ///
    /// `theta_rho` and `theta_lambda` hold `G` raw values; `groups[g]`
    /// carries Ψ and ∂Ψ/∂ρ evaluated at the current ρ_g.
    pub fn kernel_bias(&mut self, theta_rho: Var, theta_lambda: Var, groups: &[KernelGroup<'_>]) -> Result<Var> {
        let g = groups.len();
        let (tr, tl) = (self.value(theta_rho), self.value(theta_lambda));
        if g == 0 || tr.numel() != g || tl.numel() != g {
            return Err(shape_err("kernel_bias", tr, tl));
        }
        let nn = groups[0].psi.len();
        if groups.iter().any(|k| k.psi.len() != nn || k.dpsi.len() != nn) {
            return Err(Error::InvalidInput("kernel groups disagree in size".into()));
        }
        let n = (nn as f64).sqrt().round() as usize;
        if n * n != nn {
            return Err(Error::InvalidInput("kernel matrix is not square".into()));
        }
        let mut psi = Vec::with_capacity(g * nn);
        let mut dpsi = Vec::with_capacity(g * nn);
        let mut out = Vec::with_capacity(g * nn);
        for (k, grp) in groups.iter().enumerate() {
            let lam = crate::geokernels::softplus(tl.data()[k]);
            psi.extend_from_slice(grp.psi);
            dpsi.extend_from_slice(grp.dpsi);
            out.extend(grp.psi.iter().map(|p| lam * p));
        }
        let rg = self.rg(theta_rho) || self.rg(theta_lambda);
        Ok(self.push(
            Tensor::new(vec![g, n, n], out)?,
            Op::KernelBias {
                theta_rho,
                theta_lambda,
                psi,
                dpsi,
                nn,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar root. May be called once per tape.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Autodiff(
                "backward already ran on this tape; build a new graph".into(),
            ));
        }
        if self.value(root).numel() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        if !self.rg(root) {
            return Err(Error::Autodiff("root is not connected to any differentiable input".into()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        let acc = |v: Var, grads: &mut [Option<Vec<f64>>], f: &dyn Fn(&mut [f64])| {
            if !self.rg(v) {
                return;
            }
            let n = self.value(v).numel();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, n) = (out.shape()[0], out.shape()[1]);
                let k = if *ta { av.shape()[0] } else { av.shape()[1] };
                acc(*a, grads, &|ga| {
                    if *ta {
                        // stored k×m: op(B)·Gᵀ
                        gemm(k, n, m, bv.data(), *tb, g, true, 1.0, ga);
                    } else {
                        gemm(m, n, k, g, false, bv.data(), !*tb, 1.0, ga);
                    }
                });
                acc(*b, grads, &|gb| {
                    if *tb {
                        // stored n×k: Gᵀ·op(A)
                        gemm(n, m, k, g, true, av.data(), *ta, 1.0, gb);
                    } else {
                        gemm(k, m, n, av.data(), !*ta, g, false, 1.0, gb);
                    }
                });
            }
            Op::BatchMatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (s, m, n) = (out.shape()[0], out.shape()[1], out.shape()[2]);
                let k = if *ta { av.shape()[1] } else { av.shape()[2] };
                let (sa, sb, sc) = (m * k, k * n, m * n);
                acc(*a, grads, &|ga| {
                    for i in 0..s {
                        let gs = &g[i * sc..(i + 1) * sc];
                        let bs = &bv.data()[i * sb..(i + 1) * sb];
                        let dst = &mut ga[i * sa..(i + 1) * sa];
                        if *ta {
                            gemm(k, n, m, bs, *tb, gs, true, 1.0, dst);
                        } else {
                            gemm(m, n, k, gs, false, bs, !*tb, 1.0, dst);
                        }
                    }
                });
                acc(*b, grads, &|gb| {
                    for i in 0..s {
                        let gs = &g[i * sc..(i + 1) * sc];
                        let as_ = &av.data()[i * sa..(i + 1) * sa];
                        let dst = &mut gb[i * sb..(i + 1) * sb];
                        if *tb {
                            gemm(n, m, k, gs, true, as_, *ta, 1.0, dst);
                        } else {
                            gemm(k, m, n, as_, !*ta, gs, false, 1.0, dst);
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, grads, &|ga| add_into(ga, g));
                acc(*b, grads, &|gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, grads, &|ga| add_into(ga, g));
                acc(*b, grads, &|gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, grads, &|ga| {
                    for ((x, y), z) in ga.iter_mut().zip(g).zip(bv.data()) {
                        *x += y * z;
                    }
                });
                acc(*b, grads, &|gb| {
                    for ((x, y), z) in gb.iter_mut().zip(g).zip(av.data()) {
                        *x += y * z;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, grads, &|ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)),
            Op::AddTiled(a, b) => {
                acc(*a, grads, &|ga| add_into(ga, g));
                acc(*b, grads, &|gb| {
                    let lb = gb.len();
                    for chunk in g.chunks_exact(lb) {
                        add_into(gb, chunk);
                    }
                });
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                acc(*a, grads, &|ga| {
                    for ((x, y), z) in ga.iter_mut().zip(g).zip(av.data()) {
                        if *z > 0.0 {
                            *x += y;
                        }
                    }
                });
            }
            Op::Dropout { a, mask } => acc(*a, grads, &|ga| {
                for ((x, y), m) in ga.iter_mut().zip(g).zip(mask) {
                    *x += y * m;
                }
            }),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = out.last_dim();
                let gainv = self.value(*gain).data();
                acc(*x, grads, &|gx| {
                    let mut dxhat = vec![0.0; d];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let (mut s1, mut s2) = (0.0, 0.0);
                        for c in 0..d {
                            dxhat[c] = gr[c] * gainv[c];
                            s1 += dxhat[c];
                            s2 += dxhat[c] * hr[c];
                        }
                        let dn = d as f64;
                        for c in 0..d {
                            gx[r * d + c] += is / dn * (dn * dxhat[c] - s1 - hr[c] * s2);
                        }
                    }
                });
                acc(*gain, grads, &|gg| {
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for c in 0..d {
                            gg[c] += gr[c] * hr[c];
                        }
                    }
                });
                acc(*bias, grads, &|gb| {
                    for gr in g.chunks_exact(d) {
                        add_into(gb, gr);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let d = out.last_dim();
                acc(*a, grads, &|ga| {
                    for ((dst, gr), yr) in ga.chunks_exact_mut(d).zip(g.chunks_exact(d)).zip(out.data().chunks_exact(d)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for c in 0..d {
                            dst[c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::AttentionSoftmax { a, bias, scale } => {
                let d = out.last_dim();
                let mut dz = vec![0.0; g.len()];
                for ((dst, gr), yr) in dz.chunks_exact_mut(d).zip(g.chunks_exact(d)).zip(out.data().chunks_exact(d)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    for c in 0..d {
                        dst[c] = yr[c] * (gr[c] - dot);
                    }
                }
                acc(*a, grads, &|ga| ga.iter_mut().zip(&dz).for_each(|(x, y)| *x += scale * y));
                if let Some(b) = bias {
                    acc(*b, grads, &|gb| {
                        let lb = gb.len();
                        for chunk in dz.chunks_exact(lb) {
                            add_into(gb, chunk);
                        }
                    });
                }
            }
            Op::SplitHeads { a, rows, heads } => {
                let (rows, heads) = (*rows, *heads);
                let s = out.shape()[0];
                let dk = out.shape()[2];
                let d = dk * heads;
                let b = s / heads;
                acc(*a, grads, &|ga| {
                    for bi in 0..b {
                        for h in 0..heads {
                            for i in 0..rows {
                                let dst = (bi * rows + i) * d + h * dk;
                                let src = ((bi * heads + h) * rows + i) * dk;
                                add_into(&mut ga[dst..dst + dk], &g[src..src + dk]);
                            }
                        }
                    }
                });
            }
            Op::MergeHeads { a, rows, heads } => {
                let (rows, heads) = (*rows, *heads);
                let d = out.shape()[1];
                let dk = d / heads;
                let b = out.shape()[0] / rows;
                acc(*a, grads, &|ga| {
                    for bi in 0..b {
                        for h in 0..heads {
                            for i in 0..rows {
                                let src = (bi * rows + i) * d + h * dk;
                                let dst = ((bi * heads + h) * rows + i) * dk;
                                add_into(&mut ga[dst..dst + dk], &g[src..src + dk]);
                            }
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(*a, grads, &|ga| add_into(ga, g)),
            Op::Sum(a) => acc(*a, grads, &|ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                acc(*a, grads, &|ga| ga.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::Mse { pred, target } => {
                let pv = self.value(*pred);
                let n = pv.numel() as f64;
                acc(*pred, grads, &|gp| {
                    for ((x, p), t) in gp.iter_mut().zip(pv.data()).zip(target) {
                        *x += g[0] * 2.0 * (p - t) / n;
                    }
                });
            }
            Op::KernelBias {
                theta_rho,
                theta_lambda,
                psi,
                dpsi,
                nn,
            } => {
                let tr = self.value(*theta_rho).data();
                let tl = self.value(*theta_lambda).data();
                let nn = *nn;
                acc(*theta_rho, grads, &|gr| {
                    for k in 0..gr.len() {
                        let lam = crate::geokernels::softplus(tl[k]);
                        let s: f64 = g[k * nn..(k + 1) * nn]
                            .iter()
                            .zip(&dpsi[k * nn..(k + 1) * nn])
                            .map(|(x, y)| x * y)
                            .sum();
                        gr[k] += s * lam * softplus_grad(tr[k]);
                    }
                });
                acc(*theta_lambda, grads, &|gl| {
                    for k in 0..gl.len() {
                        let s: f64 = g[k * nn..(k + 1) * nn]
                            .iter()
                            .zip(&psi[k * nn..(k + 1) * nn])
                            .map(|(x, y)| x * y)
                            .sum();
                        gl[k] += s * softplus_grad(tl[k]);
                    }
                });
            }
        }
    }

    /// Adds the gradients of every bound parameter into `store`.
    ///
    /// Fails if `backward` has not run, or if the store still holds
    /// gradients from a previous step (call [`ParamStore::zero_grad`]).
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        if !self.backward_done {
            return Err(Error::Autodiff("accumulate_into before backward".into()));
        }
        store.begin_accumulate()?;
        for &(v, id) in &self.bindings {
            if let Some(g) = self.grad(v) {
                add_into(store.grad_mut(id), g);
            }
        }
        Ok(())
    }
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
