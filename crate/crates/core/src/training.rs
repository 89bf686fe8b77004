//! Optimisation loop: AdamW, plateau scheduling, gradient clipping and
//! best-validation checkpointing, with a per-epoch log of the learned
//! kernel parameters.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::grf_sim::WindowSet;
use crate::model::GeoFormer;

/// Mean squared error of two equal-length vectors.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.is_empty() || pred.len() != target.len() {
        return Err(Error::InvalidInput(format!(
            "mse needs equal non-empty lengths, got {} and {}",
            pred.len(),
            target.len()
        )));
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub min_lr: f64,
    pub val_fraction: f64,
    pub clip_norm: f64,
    /// Learning-rate multiplier for the raw kernel parameters θρ, θλ.
    pub kernel_lr_scale: f64,
    /// Stop after this many epochs without a new best validation loss.
    pub early_stop_patience: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: 32,
            max_epochs: 100,
            plateau_patience: 5,
            plateau_factor: 0.5,
            min_lr: 1e-6,
            val_fraction: 0.2,
            clip_norm: 5.0,
            kernel_lr_scale: 30.0,
            early_stop_patience: None,
            seed: 11,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config("train.lr", "must be > 0"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::config("train.plateau_factor", "must lie in (0, 1)"));
        }
        if !(self.min_lr >= 0.0) {
            return Err(Error::config("train.min_lr", "must be >= 0"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::config("train.val_fraction", "must lie in (0, 1)"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("train.clip_norm", "must be > 0"));
        }
        if !(self.kernel_lr_scale > 0.0) {
            return Err(Error::config("train.kernel_lr_scale", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment estimates for one parameter vector.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update with decoupled weight decay.
///
/// `decay` selects whether `config.weight_decay` applies to this vector.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    config: &AdamConfig,
    decay: bool,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            left: vec![params.len()],
            right: vec![grads.len(), state.m.len()],
        });
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {i} is {}", grads[i])));
    }
    state.t += 1;
    let bc1 = 1.0 - config.beta1.powi(state.t as i32);
    let bc2 = 1.0 - config.beta2.powi(state.t as i32);
    let wd = if decay { config.weight_decay } else { 0.0 };
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = config.beta1 * *m + (1.0 - config.beta1) * g;
        *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
        let mhat = *m / bc1;
        let vhat = *v / bc2;
        *p -= lr * (mhat / (vhat.sqrt() + config.eps) + wd * *p);
    }
    Ok(())
}

/// Adam over every parameter of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    states: Vec<AdamState>,
    lr_scale: Vec<f64>,
}

impl Adam {
    /// Parameters without weight decay get `kernel_lr_scale` on their step.
    pub fn new(store: &ParamStore, config: AdamConfig, kernel_lr_scale: f64) -> Self {
        Self {
            config,
            states: store.iter().map(|(_, p)| AdamState::new(p.value.numel())).collect(),
            lr_scale: store
                .iter()
                .map(|(_, p)| if p.decay { 1.0 } else { kernel_lr_scale })
                .collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if !store.grads_finite() {
            return Err(Error::NonFinite("non-finite gradient; optimiser step aborted".into()));
        }
        for ((p, state), scale) in store.iter_mut().zip(&mut self.states).zip(&self.lr_scale) {
            let grad = p.grad.clone();
            adam_step(p.value.data_mut(), &grad, state, lr * scale, &self.config, p.decay)?;
        }
        Ok(())
    }
}

/// Scales every gradient so the global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for p in store.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// Halves (by `factor`) the learning rate after `patience` epochs without a
/// relative improvement of more than `threshold`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    pub threshold: f64,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize, min_lr: f64) -> Self {
        Self {
            lr,
            factor,
            patience,
            min_lr,
            threshold: 1e-6,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Feeds one validation loss; returns the (possibly reduced) rate.
    pub fn step(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best * (1.0 - self.threshold) {
            self.best = val_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs > self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub lr: f64,
    /// Effective ρ of kernel group 0 (NaN for Vanilla).
    pub rho: f64,
    pub lambda: f64,
    pub geo_bias_share: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were restored at the end.
    pub best_epoch: Option<usize>,
    pub best_val_mse: Option<f64>,
    /// Set when training stopped on a non-finite loss or gradient.
    pub diverged: Option<String>,
    /// ρ and λ of the model before the first update.
    pub initial_rho: Option<f64>,
    pub initial_lambda: Option<f64>,
    pub nugget_floor: f64,
}

impl TrainLog {
    pub const CSV_HEADER: [&'static str; 8] =
        ["epoch", "train_mse", "val_mse", "lr", "rho", "lambda", "geo_bias_share", "seconds"];

    pub fn rho_trajectory(&self) -> Vec<f64> {
        self.initial_rho.into_iter().chain(self.records.iter().map(|r| r.rho)).collect()
    }
}

fn gather(windows: &WindowSet, idx: &[usize], inputs: &mut Vec<f64>, targets: &mut Vec<f64>) {
    let per = windows.n() * windows.lookback();
    inputs.clear();
    inputs.resize(idx.len() * per, 0.0);
    targets.clear();
    for (b, &k) in idx.iter().enumerate() {
        windows.input_into(k, &mut inputs[b * per..(b + 1) * per]);
        targets.extend_from_slice(windows.target(k));
    }
}

fn eval_mse(model: &GeoFormer, windows: &WindowSet, batch: usize) -> Result<f64> {
    let preds = model.predict_many(windows, batch)?;
    let mut s = 0.0;
    for (k, p) in preds.iter().enumerate() {
        s += mse_loss(p, windows.target(k))?;
    }
    Ok(s / preds.len() as f64)
}

fn kernel_head(model: &GeoFormer) -> (f64, f64) {
    (
        model.rho().first().copied().unwrap_or(f64::NAN),
        model.lambda().first().copied().unwrap_or(f64::NAN),
    )
}

/// Trains `model` in place on `windows` (chronologically ordered).
///
/// The trailing `val_fraction` of the windows is held out for validation,
/// the best-validation parameters are restored at the end, and the nugget
/// floor is set to the validation residual variance. Divergence restores
/// the last good parameters and is reported through [`TrainLog::diverged`].
pub fn train(model: &mut GeoFormer, windows: &WindowSet, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if windows.is_empty() {
        return Err(Error::InvalidInput("no training windows".into()));
    }
    if windows.n() != model.grid().n() || windows.lookback() != model.config().lookback {
        return Err(Error::InvalidInput("training windows do not match the model".into()));
    }
    let (rho0, lam0) = kernel_head(model);
    let mut log = TrainLog {
        initial_rho: rho0.is_finite().then_some(rho0),
        initial_lambda: lam0.is_finite().then_some(lam0),
        ..TrainLog::default()
    };
    if cfg.max_epochs == 0 {
        return Ok(log);
    }
    let n_val = ((windows.len() as f64 * cfg.val_fraction).round() as usize).max(1);
    if n_val >= windows.len() {
        return Err(Error::InvalidInput(format!(
            "{} windows are too few for a {} validation split",
            windows.len(),
            cfg.val_fraction
        )));
    }
    let (train_set, val_set) = windows.split_tail(n_val);
    let val_probe = val_set.input(0);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let adam_cfg = AdamConfig {
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    };
    let mut adam = Adam::new(model.params(), adam_cfg, cfg.kernel_lr_scale);
    let mut sched = PlateauScheduler::new(cfg.lr, cfg.plateau_factor, cfg.plateau_patience, cfg.min_lr);
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;
    let mut last_good = model.params().snapshot();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let (mut inputs, mut targets) = (Vec::new(), Vec::new());
    let n = model.grid().n();

    'epochs: for epoch in 0..cfg.max_epochs {
        let started = Instant::now();
        let lr = sched.lr;
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            gather(&train_set, chunk, &mut inputs, &mut targets);
            let mut tape = Tape::new();
            let (pred, _) = model.forward(&mut tape, &inputs, chunk.len(), true, false, &mut rng)?;
            let target = Tensor::new(vec![chunk.len(), n], targets.clone())?;
            let loss = tape.mse(pred, &target)?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                log.diverged = Some(format!("non-finite training loss at epoch {epoch}"));
                break 'epochs;
            }
            tape.backward(loss)?;
            model.params_mut().zero_grad();
            tape.accumulate_into(model.params_mut())?;
            let norm = clip_grad_norm(model.params_mut(), cfg.clip_norm);
            if !norm.is_finite() {
                log.diverged = Some(format!("non-finite gradient norm at epoch {epoch}"));
                break 'epochs;
            }
            adam.step(model.params_mut(), lr)?;
            loss_sum += lv * chunk.len() as f64;
        }
        let train_mse = loss_sum / train_set.len() as f64;
        let val_mse = eval_mse(model, &val_set, cfg.batch_size)?;
        if !val_mse.is_finite() || !model.params().iter().all(|(_, p)| p.value.is_finite()) {
            log.diverged = Some(format!("non-finite parameters or validation loss at epoch {epoch}"));
            break;
        }
        last_good = model.params().snapshot();
        let share = model
            .encoder_forward(&val_probe)?
            .1
            .iter()
            .map(|r| r.geo_bias_share)
            .sum::<f64>()
            / model.config().n_layers.max(1) as f64;
        let (rho, lambda) = kernel_head(model);
        if model.config().variant == crate::model::Variant::Geo && !(rho > 0.0) {
            return Err(Error::Diverged {
                epoch,
                reason: format!("effective range left the positive domain: {rho}"),
            });
        }
        log.records.push(EpochRecord {
            epoch,
            train_mse,
            val_mse,
            lr,
            rho,
            lambda,
            geo_bias_share: share,
            seconds: started.elapsed().as_secs_f64(),
        });
        if best.as_ref().map_or(true, |(b, _, _)| val_mse < *b) {
            best = Some((val_mse, epoch, last_good.clone()));
        }
        sched.step(val_mse);
        if let (Some(p), Some((_, be, _))) = (cfg.early_stop_patience, &best) {
            if epoch - be >= p {
                break;
            }
        }
    }

    match best {
        Some((v, e, snap)) => {
            model.params_mut().restore(&snap)?;
            log.best_epoch = Some(e);
            log.best_val_mse = Some(v);
        }
        None => model.params_mut().restore(&last_good)?,
    }
    model.invalidate_kernel_cache();
    let floor = eval_mse(model, &val_set, cfg.batch_size)?;
    if floor.is_finite() {
        model.set_nugget_floor(floor)?;
        log.nugget_floor = floor;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_examples() {
        assert_eq!(mse_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((mse_loss(&[3.0, 4.0], &[1.0, 2.0]).unwrap() - 4.0).abs() < 1e-15);
        assert_eq!(mse_loss(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), 2.5);
        assert!(mse_loss(&[], &[]).is_err());
        assert!(mse_loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let cfg = AdamConfig::default();
        for g in [3.0, -0.2] {
            let mut p = [0.0];
            let mut s = AdamState::new(1);
            adam_step(&mut p, &[g], &mut s, 1e-3, &cfg, false).unwrap();
            assert!((p[0] + 1e-3 * f64::signum(g)).abs() < 1e-10);
        }
    }

    #[test]
    fn adam_zero_grad_only_decays() {
        let cfg = AdamConfig {
            weight_decay: 0.1,
            ..AdamConfig::default()
        };
        let mut p = [2.0];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[0.0], &mut s, 1e-2, &cfg, false).unwrap();
        assert_eq!(p[0], 2.0);
        adam_step(&mut p, &[0.0], &mut s, 1e-2, &cfg, true).unwrap();
        assert!((p[0] - 2.0 * (1.0 - 1e-3)).abs() < 1e-15);
    }

    #[test]
    fn adam_three_step_reference() {
        let reference = [-0.000_999_999_990_000_000_1, -0.001_999_999_980_000_000_2, -0.002_261_992_597_306_273_3];
        let cfg = AdamConfig::default();
        let mut p = [0.0];
        let mut s = AdamState::new(1);
        for (g, want) in [1.0, 1.0, -1.0].iter().zip(reference) {
            adam_step(&mut p, &[*g], &mut s, 1e-3, &cfg, false).unwrap();
            assert!((p[0] - want).abs() < 1e-15, "{} vs {want}", p[0]);
        }
    }

    #[test]
    fn adam_rejects_non_finite_grad() {
        let mut p = [0.0];
        let mut s = AdamState::new(1);
        assert!(adam_step(&mut p, &[f64::NAN], &mut s, 1e-3, &AdamConfig::default(), true).is_err());
        assert_eq!(p[0], 0.0);
        assert_eq!(s.t, 0);
    }

    #[test]
    fn plateau_scheduler_behaviour() {
        let mut s = PlateauScheduler::new(1e-3, 0.5, 5, 1e-6);
        for k in 0..20 {
            assert_eq!(s.step(1.0 / (k + 1) as f64), 1e-3);
        }
        let mut s = PlateauScheduler::new(1e-3, 0.5, 5, 1e-6);
        let lrs: Vec<f64> = (0..7).map(|_| s.step(1.0)).collect();
        // the first call sets the best; six flat epochs exceed patience once
        assert_eq!(lrs.iter().filter(|&&l| l < 1e-3).count(), 1);
        assert_eq!(lrs[6], 5e-4);
        let mut s = PlateauScheduler::new(1e-6, 0.5, 0, 1e-6);
        s.step(1.0);
        for _ in 0..5 {
            assert_eq!(s.step(1.0), 1e-6);
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { plateau_factor: 1.0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { lr: 0.0, ..TrainConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
