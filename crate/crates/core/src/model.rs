//! Transformer encoder over sensor tokens with optional geostatistical
//! attention bias.
//!
//! Each sensor is one token whose features are its own `L`-step history.
//! Attention mixes information across sensors; the Geo variant adds
//! `λ·Ψ(d_ij; ρ)` to every head's logits, the Vanilla variant instead adds a
//! learnable per-node positional embedding to the tokens.

use std::sync::Mutex;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{KernelGroup, ParamId, ParamStore, Tape, Tensor, Var, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::geokernels::{inverse_softplus, softplus, KernelCache, KernelFamily, KernelSpec, SensorGrid};
use crate::grf_sim::{WindowSet, DEFAULT_LOOKBACK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Geo,
    Vanilla,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Geo => "geo",
            Variant::Vanilla => "vanilla",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "geo" | "geoformer" | "geo-transformer" => Ok(Variant::Geo),
            "vanilla" => Ok(Variant::Vanilla),
            other => Err(Error::InvalidInput(format!("unknown model variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub lookback: usize,
    pub dropout_p: f64,
    pub variant: Variant,
    pub kernel_family: KernelFamily,
    /// Effective initial range; drawn from `rho_init_range` when absent.
    pub rho_init: Option<f64>,
    pub rho_init_range: (f64, f64),
    pub lambda_init: f64,
    pub share_kernel_across_heads: bool,
    /// Monte Carlo dropout passes for predictive variance.
    pub n_mc: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            lookback: DEFAULT_LOOKBACK,
            dropout_p: 0.1,
            variant: Variant::Geo,
            kernel_family: KernelFamily::Matern15,
            rho_init: None,
            rho_init_range: (0.01, 0.5),
            lambda_init: 1.0,
            share_kernel_across_heads: true,
            n_mc: 50,
            seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn with_variant(variant: Variant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config(
                "model.d_model",
                format!("d_model = {} must be a positive multiple of n_heads = {}", self.d_model, self.n_heads),
            ));
        }
        if self.lookback == 0 {
            return Err(Error::config("model.lookback", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config("model.dropout_p", format!("must lie in [0, 1), got {}", self.dropout_p)));
        }
        let (lo, hi) = self.rho_init_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::config("model.rho_init_range", format!("need 0 < lo <= hi, got ({lo}, {hi})")));
        }
        if let Some(r) = self.rho_init {
            if !(r > 0.0) {
                return Err(Error::config("model.rho_init", format!("must be > 0, got {r}")));
            }
        }
        if !(self.lambda_init > 0.0) {
            return Err(Error::config("model.lambda_init", "must be > 0"));
        }
        if self.n_mc < 2 {
            return Err(Error::config("model.n_mc", "need at least 2 Monte Carlo passes"));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Number of independent (ρ, λ) pairs.
    pub fn kernel_groups(&self) -> usize {
        if self.share_kernel_across_heads {
            1
        } else {
            self.n_heads
        }
    }
}

/// Attention diagnostics for one layer and one window.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    /// `n_heads × N × N`, row-stochastic per head.
    pub weights: Tensor,
    /// `mean|λΨ| / (mean|QKᵀ/√d_k| + mean|λΨ|)`; zero for the Vanilla variant.
    pub geo_bias_share: f64,
    /// The `λΨ` matrices added to the logits (`groups × N × N`), Geo only.
    pub bias: Option<Tensor>,
}

#[derive(Debug, Clone)]
struct LayerIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
struct ModelIds {
    w_in: ParamId,
    b_in: ParamId,
    pos: Option<ParamId>,
    layers: Vec<LayerIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    w_out: ParamId,
    b_out: ParamId,
    theta_rho: Option<ParamId>,
    theta_lambda: Option<ParamId>,
}

/// Names of the raw kernel parameters (excluded from weight decay).
pub const THETA_RHO: &str = "kernel.theta_rho";
pub const THETA_LAMBDA: &str = "kernel.theta_lambda";

/// Geo-Transformer or its Vanilla counterpart, bound to one sensor grid.
pub struct GeoFormer {
    config: ModelConfig,
    grid: SensorGrid,
    params: ParamStore,
    ids: ModelIds,
    cache: Mutex<Vec<KernelCache>>,
    /// Variance added to every Monte Carlo predictive variance.
    nugget_floor: f64,
}

impl Clone for GeoFormer {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            grid: self.grid.clone(),
            params: self.params.clone(),
            ids: self.ids.clone(),
            cache: Mutex::new(vec![KernelCache::new(); self.config.kernel_groups()]),
            nugget_floor: self.nugget_floor,
        }
    }
}

impl std::fmt::Debug for GeoFormer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GeoFormer")
            .field("config", &self.config)
            .field("n", &self.grid.n())
            .field("params", &self.params.numel())
            .finish()
    }
}

fn xavier<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(&[fan_in, fan_out], |_| rng.gen_range(-a..a))
}

impl GeoFormer {
    /// Fresh model with weights drawn from an RNG seeded by `config.seed`.
    pub fn new(config: ModelConfig, grid: SensorGrid) -> Result<Self> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
        Self::with_rng(config, grid, &mut rng)
    }

    pub fn with_rng<R: Rng>(config: ModelConfig, grid: SensorGrid, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, l, n) = (config.d_model, config.lookback, grid.n());
        let ff = 4 * d;
        let mut p = ParamStore::new();
        let w_in = p.add("embed.weight", xavier(rng, l, d), true)?;
        let b_in = p.add("embed.bias", Tensor::zeros(&[d]), true)?;
        let pos = match config.variant {
            Variant::Vanilla => {
                let normal = Normal::new(0.0, 0.02).expect("valid sd");
                Some(p.add("embed.pos", Tensor::from_fn(&[n, d], |_| normal.sample(rng)), true)?)
            }
            Variant::Geo => None,
        };
        let mut layers = Vec::with_capacity(config.n_layers);
        for k in 0..config.n_layers {
            let name = |s: &str| format!("layers.{k}.{s}");
            layers.push(LayerIds {
                ln1_g: p.add(&name("ln1.gain"), Tensor::full(&[d], 1.0), true)?,
                ln1_b: p.add(&name("ln1.bias"), Tensor::zeros(&[d]), true)?,
                wq: p.add(&name("attn.wq"), xavier(rng, d, d), true)?,
                bq: p.add(&name("attn.bq"), Tensor::zeros(&[d]), true)?,
                wk: p.add(&name("attn.wk"), xavier(rng, d, d), true)?,
                bk: p.add(&name("attn.bk"), Tensor::zeros(&[d]), true)?,
                wv: p.add(&name("attn.wv"), xavier(rng, d, d), true)?,
                bv: p.add(&name("attn.bv"), Tensor::zeros(&[d]), true)?,
                wo: p.add(&name("attn.wo"), xavier(rng, d, d), true)?,
                bo: p.add(&name("attn.bo"), Tensor::zeros(&[d]), true)?,
                ln2_g: p.add(&name("ln2.gain"), Tensor::full(&[d], 1.0), true)?,
                ln2_b: p.add(&name("ln2.bias"), Tensor::zeros(&[d]), true)?,
                w1: p.add(&name("ff.w1"), xavier(rng, d, ff), true)?,
                b1: p.add(&name("ff.b1"), Tensor::zeros(&[ff]), true)?,
                w2: p.add(&name("ff.w2"), xavier(rng, ff, d), true)?,
                b2: p.add(&name("ff.b2"), Tensor::zeros(&[d]), true)?,
            });
        }
        let lnf_g = p.add("final_ln.gain", Tensor::full(&[d], 1.0), true)?;
        let lnf_b = p.add("final_ln.bias", Tensor::zeros(&[d]), true)?;
        let w_out = p.add("head.weight", xavier(rng, d, 1), true)?;
        let b_out = p.add("head.bias", Tensor::zeros(&[1]), true)?;
        let (theta_rho, theta_lambda) = match config.variant {
            Variant::Geo => {
                let g = config.kernel_groups();
                let (lo, hi) = config.rho_init_range;
                let rhos: Vec<f64> = (0..g)
                    .map(|_| config.rho_init.unwrap_or_else(|| if hi > lo { rng.gen_range(lo..hi) } else { lo }))
                    .collect();
                let tr = rhos.iter().map(|&r| inverse_softplus(r)).collect::<Result<Vec<_>>>()?;
                let tl = vec![inverse_softplus(config.lambda_init)?; g];
                (
                    Some(p.add(THETA_RHO, Tensor::new(vec![g], tr)?, false)?),
                    Some(p.add(THETA_LAMBDA, Tensor::new(vec![g], tl)?, false)?),
                )
            }
            Variant::Vanilla => (None, None),
        };
        let groups = config.kernel_groups();
        Ok(Self {
            config,
            grid,
            params: p,
            ids: ModelIds {
                w_in,
                b_in,
                pos,
                layers,
                lnf_g,
                lnf_b,
                w_out,
                b_out,
                theta_rho,
                theta_lambda,
            },
            cache: Mutex::new(vec![KernelCache::new(); groups]),
            nugget_floor: 0.0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn grid(&self) -> &SensorGrid {
        &self.grid
    }

    /// Replaces the sensor geometry (same site count).
    pub fn set_grid(&mut self, grid: SensorGrid) -> Result<()> {
        if grid.n() != self.grid.n() {
            return Err(Error::InvalidInput(format!(
                "grid has {} sites, model was built for {}",
                grid.n(),
                self.grid.n()
            )));
        }
        self.grid = grid;
        self.invalidate_kernel_cache();
        Ok(())
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Must be called after any direct change to the kernel parameters.
    pub fn invalidate_kernel_cache(&self) {
        for c in self.cache.lock().expect("kernel cache poisoned").iter_mut() {
            c.invalidate();
        }
    }

    pub fn nugget_floor(&self) -> f64 {
        self.nugget_floor
    }

    pub fn set_nugget_floor(&mut self, v: f64) -> Result<()> {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::Domain(format!("nugget floor must be >= 0, got {v}")));
        }
        self.nugget_floor = v;
        Ok(())
    }

    /// Effective ranges ρ_g (empty for Vanilla).
    pub fn rho(&self) -> Vec<f64> {
        self.ids
            .theta_rho
            .map(|id| self.params.value(id).data().iter().map(|&t| softplus(t)).collect())
            .unwrap_or_default()
    }

    /// Effective bias weights λ_g (empty for Vanilla).
    pub fn lambda(&self) -> Vec<f64> {
        self.ids
            .theta_lambda
            .map(|id| self.params.value(id).data().iter().map(|&t| softplus(t)).collect())
            .unwrap_or_default()
    }

    /// Current kernel parameters of group 0.
    pub fn kernel_spec(&self) -> Option<KernelSpec> {
        let (tr, tl) = (self.ids.theta_rho?, self.ids.theta_lambda?);
        Some(KernelSpec {
            family: self.config.kernel_family,
            theta_rho: self.params.value(tr).data()[0],
            theta_lambda: self.params.value(tl).data()[0],
            sigma2: 1.0,
        })
    }

    /// Sets every group's effective ρ and λ.
    pub fn set_kernel(&mut self, rho: f64, lambda: f64) -> Result<()> {
        let (Some(tr), Some(tl)) = (self.ids.theta_rho, self.ids.theta_lambda) else {
            return Err(Error::InvalidInput("the Vanilla variant has no kernel".into()));
        };
        let (a, b) = (inverse_softplus(rho)?, inverse_softplus(lambda)?);
        self.params.value_mut(tr).data_mut().iter_mut().for_each(|v| *v = a);
        self.params.value_mut(tl).data_mut().iter_mut().for_each(|v| *v = b);
        self.invalidate_kernel_cache();
        Ok(())
    }

    /// Zeroes the query and key projections of every layer.
    pub fn zero_query_key(&mut self) {
        for l in self.ids.layers.clone() {
            for id in [l.wq, l.bq, l.wk, l.bk] {
                self.params.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Zeroes the input projection (weight and bias).
    pub fn zero_embedding_projection(&mut self) {
        for id in [self.ids.w_in, self.ids.b_in] {
            self.params.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Positional table of the Vanilla variant.
    pub fn positional_embedding(&self) -> Option<&Tensor> {
        self.ids.pos.map(|id| self.params.value(id))
    }

    pub fn positional_embedding_mut(&mut self) -> Option<&mut Tensor> {
        self.ids.pos.map(|id| self.params.value_mut(id))
    }

    fn check_inputs(&self, inputs: &[f64], batch: usize) -> Result<()> {
        let expect = batch * self.grid.n() * self.config.lookback;
        if inputs.len() != expect || batch == 0 {
            return Err(Error::ShapeMismatch {
                op: "encoder input",
                left: vec![inputs.len()],
                right: vec![batch, self.grid.n(), self.config.lookback],
            });
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoder input window".into()));
        }
        Ok(())
    }

    /// Token embedding for `batch` stacked `N × L` windows: `[B·N, d_model]`.
    pub fn embed(&self, tape: &mut Tape, inputs: &[f64], batch: usize) -> Result<Var> {
        self.check_inputs(inputs, batch)?;
        let (n, l) = (self.grid.n(), self.config.lookback);
        let x = tape.constant(Tensor::new(vec![batch * n, l], inputs.to_vec())?);
        let w = tape.param(&self.params, self.ids.w_in);
        let b = tape.param(&self.params, self.ids.b_in);
        let h = tape.matmul(x, w)?;
        let mut h = tape.add_tiled(h, b)?;
        if let Some(pos) = self.ids.pos {
            let e = tape.param(&self.params, pos);
            h = tape.add_tiled(h, e)?;
        }
        Ok(h)
    }

    /// `[G, N, N]` stack of `λ_g·Ψ(D; ρ_g)` on the tape, Geo only.
    fn kernel_bias(&self, tape: &mut Tape) -> Result<Option<Var>> {
        let (Some(tr), Some(tl)) = (self.ids.theta_rho, self.ids.theta_lambda) else {
            return Ok(None);
        };
        let rhos = self.rho();
        let trv = tape.param(&self.params, tr);
        let tlv = tape.param(&self.params, tl);
        let mut caches = self.cache.lock().expect("kernel cache poisoned");
        let fam = self.config.kernel_family;
        let mats: Vec<(Vec<f64>, Vec<f64>)> = caches
            .iter_mut()
            .zip(&rhos)
            .map(|(c, &rho)| {
                let (p, dp) = c.get(&self.grid, fam, rho);
                (p.to_vec(), dp.to_vec())
            })
            .collect();
        drop(caches);
        let groups: Vec<KernelGroup<'_>> = mats.iter().map(|(p, dp)| KernelGroup { psi: p, dpsi: dp }).collect();
        Ok(Some(tape.kernel_bias(trv, tlv, &groups)?))
    }

    fn linear(&self, tape: &mut Tape, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let wv = tape.param(&self.params, w);
        let bv = tape.param(&self.params, b);
        let y = tape.matmul(x, wv)?;
        tape.add_tiled(y, bv)
    }

    /// Multi-head attention over sensor tokens `x: [B·N, d]`.
    ///
    /// Logits are `QKᵀ/√d_k`, plus `bias` broadcast over the batch when
    /// present. Returns the projected output and, when `record` is set, the
    /// diagnostics for the first window of the batch.
    #[allow(clippy::too_many_arguments)]
    pub fn geo_attention(
        &self,
        tape: &mut Tape,
        x: Var,
        layer: usize,
        bias: Option<Var>,
        batch: usize,
        record: bool,
    ) -> Result<(Var, Option<AttentionRecord>)> {
        let ids = &self.ids.layers[layer];
        let (n, h) = (self.grid.n(), self.config.n_heads);
        let q = self.linear(tape, x, ids.wq, ids.bq)?;
        let k = self.linear(tape, x, ids.wk, ids.bk)?;
        let v = self.linear(tape, x, ids.wv, ids.bv)?;
        let q = tape.split_heads(q, n, h)?;
        let k = tape.split_heads(k, n, h)?;
        let v = tape.split_heads(v, n, h)?;
        let scores = tape.batch_matmul_t(q, k, false, true)?;
        let scale = 1.0 / (self.config.d_head() as f64).sqrt();
        let attn = tape.attention_softmax(scores, bias, scale)?;
        let ctx = tape.batch_matmul_t(attn, v, false, false)?;
        let merged = tape.merge_heads(ctx, h)?;
        let out = self.linear(tape, merged, ids.wo, ids.bo)?;

        let rec = record.then(|| {
            let nn = n * n;
            let weights = Tensor::new(vec![h, n, n], tape.value(attn).data()[..h * nn].to_vec())
                .expect("attention slice");
            let data_term: f64 =
                scale * tape.value(scores).data()[..h * nn].iter().map(|v| v.abs()).sum::<f64>() / (h * nn) as f64;
            let (share, bias_t) = match bias {
                Some(b) => {
                    let bt = tape.value(b).clone();
                    let g = bt.shape()[0];
                    // mean over the heads actually seen by window 0
                    let prior: f64 = (0..h).map(|hh| {
                        let s = &bt.data()[(hh % g) * nn..(hh % g + 1) * nn];
                        s.iter().map(|v| v.abs()).sum::<f64>()
                    }).sum::<f64>() / (h * nn) as f64;
                    let denom = data_term + prior;
                    (if denom > 0.0 { prior / denom } else { 0.0 }, Some(bt))
                }
                None => (0.0, None),
            };
            AttentionRecord {
                weights,
                geo_bias_share: share,
                bias: bias_t,
            }
        });
        let _ = batch;
        Ok((out, rec))
    }

    /// Full forward pass for `batch` stacked windows (each `N × L`,
    /// site-major). Returns predictions `[B, N]` and per-layer attention
    /// records for window 0 when `record` is set.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        inputs: &[f64],
        batch: usize,
        dropout_active: bool,
        record: bool,
        rng: &mut R,
    ) -> Result<(Var, Vec<AttentionRecord>)> {
        let n = self.grid.n();
        let p = self.config.dropout_p;
        let mut x = self.embed(tape, inputs, batch)?;
        let bias = self.kernel_bias(tape)?;
        let mut records = Vec::new();
        for (li, ids) in self.ids.layers.iter().enumerate() {
            let g1 = tape.param(&self.params, ids.ln1_g);
            let b1 = tape.param(&self.params, ids.ln1_b);
            let hn = tape.layer_norm(x, g1, b1, LAYER_NORM_EPS)?;
            let (a, rec) = self.geo_attention(tape, hn, li, bias, batch, record)?;
            records.extend(rec);
            let a = tape.dropout(a, p, dropout_active, rng)?;
            x = tape.add(x, a)?;

            let g2 = tape.param(&self.params, ids.ln2_g);
            let b2 = tape.param(&self.params, ids.ln2_b);
            let hn = tape.layer_norm(x, g2, b2, LAYER_NORM_EPS)?;
            let f = self.linear(tape, hn, ids.w1, ids.b1)?;
            let f = tape.relu(f);
            let f = tape.dropout(f, p, dropout_active, rng)?;
            let f = self.linear(tape, f, ids.w2, ids.b2)?;
            x = tape.add(x, f)?;
        }
        let gf = tape.param(&self.params, self.ids.lnf_g);
        let bf = tape.param(&self.params, self.ids.lnf_b);
        let x = tape.layer_norm(x, gf, bf, LAYER_NORM_EPS)?;
        let y = self.linear(tape, x, self.ids.w_out, self.ids.b_out)?;
        let y = tape.reshape(y, &[batch, n])?;
        Ok((y, records))
    }

    /// Deterministic (dropout off) one-step prediction for one `N × L`
    /// window, with attention records for every layer.
    pub fn encoder_forward(&self, window: &[f64]) -> Result<(Vec<f64>, Vec<AttentionRecord>)> {
        let mut tape = Tape::new();
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let (y, recs) = self.forward(&mut tape, window, 1, false, true, &mut rng)?;
        Ok((tape.value(y).data().to_vec(), recs))
    }

    /// Deterministic predictions for many windows, batched internally.
    pub fn predict_many(&self, windows: &WindowSet, batch: usize) -> Result<Vec<Vec<f64>>> {
        let (n, l) = (self.grid.n(), self.config.lookback);
        if windows.n() != n || windows.lookback() != l {
            return Err(Error::InvalidInput("window set does not match the model".into()));
        }
        let mut out = Vec::with_capacity(windows.len());
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let idx: Vec<usize> = (0..windows.len()).collect();
        for chunk in idx.chunks(batch.max(1)) {
            let mut inputs = vec![0.0; chunk.len() * n * l];
            for (b, &k) in chunk.iter().enumerate() {
                windows.input_into(k, &mut inputs[b * n * l..(b + 1) * n * l]);
            }
            let mut tape = Tape::new();
            let (y, _) = self.forward(&mut tape, &inputs, chunk.len(), false, false, &mut rng)?;
            out.extend(tape.value(y).data().chunks(n).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    /// Recursive forecasts for horizons `1..=horizon` of every window: each
    /// prediction is appended as the newest history column and the oldest
    /// column dropped. Returns `[window][step][site]`.
    pub fn predict_recursive(&self, windows: &WindowSet, horizon: usize, batch: usize) -> Result<Vec<Vec<Vec<f64>>>> {
        let (n, l) = (self.grid.n(), self.config.lookback);
        if windows.n() != n || windows.lookback() != l {
            return Err(Error::InvalidInput("window set does not match the model".into()));
        }
        if horizon == 0 {
            return Err(Error::InvalidInput("horizon must be >= 1".into()));
        }
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut out = Vec::with_capacity(windows.len());
        let idx: Vec<usize> = (0..windows.len()).collect();
        for chunk in idx.chunks(batch.max(1)) {
            let b = chunk.len();
            let mut inputs = vec![0.0; b * n * l];
            for (j, &k) in chunk.iter().enumerate() {
                windows.input_into(k, &mut inputs[j * n * l..(j + 1) * n * l]);
            }
            let mut steps: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(horizon); b];
            for _ in 0..horizon {
                let mut tape = Tape::new();
                let (y, _) = self.forward(&mut tape, &inputs, b, false, false, &mut rng)?;
                let pred = tape.value(y).data();
                for j in 0..b {
                    let p = &pred[j * n..(j + 1) * n];
                    for (i, &v) in p.iter().enumerate() {
                        let row = &mut inputs[(j * n + i) * l..(j * n + i + 1) * l];
                        row.copy_within(1.., 0);
                        row[l - 1] = v;
                    }
                    steps[j].push(p.to_vec());
                }
            }
            out.extend(steps);
        }
        Ok(out)
    }

    /// Monte Carlo dropout predictive mean and variance for one window.
    ///
    /// The variance is the unbiased sample variance over `n_mc` stochastic
    /// passes plus the model's nugget floor.
    pub fn predict_distribution<R: Rng + ?Sized>(
        &self,
        window: &[f64],
        n_mc: usize,
        rng: &mut R,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        if n_mc < 2 {
            return Err(Error::InvalidInput(format!("n_mc must be >= 2, got {n_mc}")));
        }
        let n = self.grid.n();
        let per = n * self.config.lookback;
        self.check_inputs(window, 1)?;
        let mut inputs = Vec::with_capacity(n_mc * per);
        for _ in 0..n_mc {
            inputs.extend_from_slice(window);
        }
        let mut tape = Tape::new();
        let (y, _) = self.forward(&mut tape, &inputs, n_mc, true, false, rng)?;
        let samples = tape.value(y).data();
        let mut mean = vec![0.0; n];
        for s in samples.chunks(n) {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n_mc as f64);
        let mut var = vec![0.0; n];
        for s in samples.chunks(n) {
            for ((acc, v), m) in var.iter_mut().zip(s).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|v| *v = *v / (n_mc - 1) as f64 + self.nugget_floor);
        Ok((mean, var))
    }
}
