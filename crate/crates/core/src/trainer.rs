//! Joint NLL + lambda * MAE training with gradual layer unfreezing.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Mode;
use crate::error::{Error, Result};
use crate::fusion::TargetScaling;
use crate::model::QosModel;
use crate::params::{Grads, ParamGroup, ParamStore};
use crate::stats::mix_seed;
use crate::templater::FeatureExample;
use crate::tokenizer::TokenSequence;

/// Mean of `(y - mu)^2 / (2 var) + 0.5 ln var` (no `ln(2 pi)` constant).
pub fn gaussian_nll(y: &[f64], mu: &[f64], var_cal: &[f64]) -> Result<f64> {
    check_lengths(y, mu, var_cal)?;
    Ok(y.iter()
        .zip(mu)
        .zip(var_cal)
        .map(|((y, m), v)| (y - m).powi(2) / (2.0 * v) + 0.5 * v.ln())
        .sum::<f64>()
        / y.len() as f64)
}

/// Per-sample derivatives of the NLL term w.r.t. `(mu, log_var)`.
pub fn gaussian_nll_grad(y: f64, mu: f64, log_var: f64) -> (f64, f64) {
    let var = log_var.exp();
    let r = y - mu;
    (-r / var, 0.5 - r * r / (2.0 * var))
}

fn check_lengths(y: &[f64], mu: &[f64], var_cal: &[f64]) -> Result<()> {
    if y.is_empty() || y.len() != mu.len() || y.len() != var_cal.len() {
        return Err(Error::Input(format!(
            "loss inputs have lengths {}, {}, {}",
            y.len(),
            mu.len(),
            var_cal.len()
        )));
    }
    if let Some(i) = var_cal.iter().position(|v| !(*v > 0.0)) {
        return Err(Error::numeric("loss", format!("variance at index {i} is not positive")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub nll: f64,
    pub mae: f64,
}

pub fn joint_loss(y: &[f64], mu: &[f64], var_cal: &[f64], lambda: f64) -> Result<LossBreakdown> {
    let nll = gaussian_nll(y, mu, var_cal)?;
    let mae = y.iter().zip(mu).map(|(y, m)| (y - m).abs()).sum::<f64>() / y.len() as f64;
    Ok(LossBreakdown {
        total: nll + lambda * mae,
        nll,
        mae,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnfreezeSchedule {
    /// Epochs between unfreezing steps (`k`).
    pub step_epochs: usize,
    /// Layers unfrozen per step.
    pub layers_per_step: usize,
}

impl Default for UnfreezeSchedule {
    fn default() -> Self {
        UnfreezeSchedule {
            step_epochs: 1,
            layers_per_step: 1,
        }
    }
}

/// Zero-based indices of the trainable encoder blocks at `epoch`: the top
/// `min(n_layers, floor(epoch / k) * n_step)` blocks. Embedding and
/// LayerNorm parameters are trainable at every epoch regardless.
pub fn active_layers(epoch: usize, schedule: &UnfreezeSchedule, n_layers: usize) -> Vec<usize> {
    let k = schedule.step_epochs.max(1);
    let n = (epoch / k).saturating_mul(schedule.layers_per_step).min(n_layers);
    (n_layers - n..n_layers).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_grad_norm: f64,
    pub epochs: usize,
    /// Weight of the MAE term.
    pub lambda: f64,
    pub seed: u64,
    pub weight_decay: f64,
    /// Fit the output affine map to the train-target mean/std before training.
    pub standardize_targets: bool,
    /// Learning rate at the last step as a fraction of `learning_rate`,
    /// reached by linear decay. `1.0` keeps the rate constant.
    pub final_lr_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-5,
            batch_size: 128,
            max_grad_norm: 1.0,
            epochs: 10,
            lambda: 1.0,
            seed: 42,
            weight_decay: 0.0,
            standardize_targets: true,
            final_lr_fraction: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.max_grad_norm > 0.0) {
            return Err(Error::Config("max_grad_norm must be positive".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return Err(Error::Config("final_lr_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Learning rate for 1-based `step` out of `total_steps`.
    pub fn lr_at(&self, step: u64, total_steps: u64) -> f64 {
        if total_steps <= 1 {
            return self.learning_rate;
        }
        let progress = (step - 1) as f64 / (total_steps - 1) as f64;
        self.learning_rate * (1.0 - (1.0 - self.final_lr_fraction) * progress)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_total: f64,
    pub train_nll: f64,
    pub train_mae: f64,
    pub valid_mae: f64,
    pub n_active_layers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub batch: usize,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub steps: Vec<StepLog>,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path.display().to_string(), e))?;
        for row in &self.epochs {
            w.serialize(row)
                .map_err(|e| Error::csv(path.display().to_string(), e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Vec<EpochLog>> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path.display().to_string(), e))?;
        r.deserialize()
            .collect::<std::result::Result<Vec<EpochLog>, _>>()
            .map_err(|e| Error::csv(path.display().to_string(), e))
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(len: usize, lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    /// Updates `params[i]` for every `i` with `trainable[i]`; `step` is 1-based.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], trainable: &[bool], step: u64) {
        let bc1 = 1.0 - self.beta1.powi(step as i32);
        let bc2 = 1.0 - self.beta2.powi(step as i32);
        for i in 0..params.len() {
            if !trainable[i] {
                continue;
            }
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let update = (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + self.eps);
            params[i] -= self.lr * (update + self.weight_decay * params[i]);
        }
    }
}

/// Elementwise trainable mask of the backbone at `epoch`.
pub fn backbone_trainable(store: &ParamStore, active: &[usize]) -> Vec<bool> {
    let mut mask = vec![false; store.len()];
    for e in store.entries() {
        let on = match e.group {
            ParamGroup::Embedding | ParamGroup::LayerNorm | ParamGroup::Head => true,
            ParamGroup::Layer(i) => active.contains(&i),
        };
        if on {
            mask[e.range()].iter_mut().for_each(|m| *m = true);
        }
    }
    mask
}

/// Token sequences paired with targets, ready for the training loop.
pub fn prepare(model: &QosModel, examples: &[FeatureExample]) -> Result<Vec<(TokenSequence, f64)>> {
    examples.iter().map(|e| Ok((model.sequence(e)?, e.target))).collect()
}

fn group_norms(store: &ParamStore) -> String {
    let mut groups: Vec<(ParamGroup, f64)> = Vec::new();
    for e in store.entries() {
        let sq: f64 = store.data[e.range()].iter().map(|v| v * v).sum();
        match groups.iter_mut().find(|(g, _)| *g == e.group) {
            Some((_, acc)) => *acc += sq,
            None => groups.push((e.group, sq)),
        }
    }
    groups
        .iter()
        .map(|(g, sq)| format!("{g:?}={:.4e}", sq.sqrt()))
        .collect::<Vec<_>>()
        .join(", ")
}

pub fn mean_abs_error(model: &QosModel, data: &[(TokenSequence, f64)]) -> Result<f64> {
    let mut acc = 0.0;
    for (seq, y) in data {
        acc += (model.predict_deterministic(seq)?.mu - y).abs();
    }
    Ok(acc / data.len() as f64)
}

/// Trains `model` in place. `on_epoch` runs after each epoch's log entry is
/// recorded (e.g. to write periodic checkpoints).
pub fn train_with(
    model: &mut QosModel,
    train: &[(TokenSequence, f64)],
    valid: &[(TokenSequence, f64)],
    config: &TrainConfig,
    schedule: &UnfreezeSchedule,
    mut on_epoch: impl FnMut(&QosModel, &EpochLog) -> Result<()>,
) -> Result<TrainLog> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    if valid.is_empty() {
        return Err(Error::Input("validation set is empty".into()));
    }
    if config.standardize_targets {
        let ys: Vec<f64> = train.iter().map(|(_, y)| *y).collect();
        model.set_scaling(TargetScaling::fit(&ys));
    }
    let n_layers = model.backbone.config().num_layers;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, &[1]));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, &[2]));
    let mut opt_backbone = AdamW::new(model.backbone.params.len(), config.learning_rate, config.weight_decay);
    let mut opt_head = AdamW::new(model.head.params.len(), config.learning_rate, config.weight_decay);
    let head_trainable = vec![true; model.head.params.len()];
    let mut g_backbone = model.backbone.params.zeros_like();
    let mut g_head = model.head.params.zeros_like();
    let mut log = TrainLog::default();
    let mut step = 0u64;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let total_steps = (config.epochs * train.len().div_ceil(config.batch_size)) as u64;

    for epoch in 0..config.epochs {
        let active = active_layers(epoch, schedule, n_layers);
        let bb_trainable = backbone_trainable(&model.backbone.params, &active);
        order.shuffle(&mut shuffle_rng);
        let (mut sum_nll, mut sum_mae) = (0.0, 0.0);

        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            g_backbone.zero();
            g_head.zero();
            let b = batch.len() as f64;
            let (mut nll, mut mae) = (0.0, 0.0);
            for &i in batch {
                let (seq, y) = &train[i];
                let (pred, cache) = model.forward(seq, Mode::Train, &mut dropout_rng)?;
                let var = pred.var();
                let r = y - pred.mu;
                nll += r * r / (2.0 * var) + 0.5 * pred.log_var;
                mae += r.abs();
                let (d_mu_nll, d_lv) = gaussian_nll_grad(*y, pred.mu, pred.log_var);
                let d_mu = d_mu_nll - config.lambda * r.signum() * (r != 0.0) as u8 as f64;
                model.backward(&cache, d_mu / b, d_lv / b, &mut g_backbone, &mut g_head);
            }
            let loss = LossBreakdown {
                total: nll / b + config.lambda * (mae / b),
                nll: nll / b,
                mae: mae / b,
            };
            if !loss.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    diagnostics: format!(
                        "nll={}, mae={}, backbone [{}], head [{}]",
                        loss.nll,
                        loss.mae,
                        group_norms(&model.backbone.params),
                        group_norms(&model.head.params)
                    ),
                });
            }
            sum_nll += nll;
            sum_mae += mae;

            for (g, t) in g_backbone.data.iter_mut().zip(&bb_trainable) {
                if !t {
                    *g = 0.0;
                }
            }
            let grad_norm = (g_backbone.sq_norm() + g_head.sq_norm()).sqrt();
            let clipped_norm = clip(&mut [&mut g_backbone, &mut g_head], grad_norm, config.max_grad_norm);
            step += 1;
            let lr = config.lr_at(step, total_steps);
            opt_backbone.lr = lr;
            opt_head.lr = lr;
            opt_backbone.step(&mut model.backbone.params.data, &g_backbone.data, &bb_trainable, step);
            opt_head.step(&mut model.head.params.data, &g_head.data, &head_trainable, step);
            log.steps.push(StepLog {
                epoch,
                batch: batch_idx,
                loss,
                grad_norm,
                clipped_norm,
            });
        }

        let n = train.len() as f64;
        let (train_nll, train_mae) = (sum_nll / n, sum_mae / n);
        let entry = EpochLog {
            epoch,
            train_total: train_nll + config.lambda * train_mae,
            train_nll,
            train_mae,
            valid_mae: mean_abs_error(model, valid)?,
            n_active_layers: active.len(),
        };
        log::info!(
            "epoch {epoch}: total {:.5} nll {:.5} mae {:.5} valid_mae {:.5} active {}",
            entry.train_total,
            entry.train_nll,
            entry.train_mae,
            entry.valid_mae,
            entry.n_active_layers
        );
        on_epoch(model, &entry)?;
        log.epochs.push(entry);
    }
    Ok(log)
}

pub fn train(
    model: &mut QosModel,
    train: &[(TokenSequence, f64)],
    valid: &[(TokenSequence, f64)],
    config: &TrainConfig,
    schedule: &UnfreezeSchedule,
) -> Result<TrainLog> {
    train_with(model, train, valid, config, schedule, |_, _| Ok(()))
}

/// Global-norm clipping; returns the norm after clipping.
fn clip(grads: &mut [&mut Grads], norm: f64, max_norm: f64) -> f64 {
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale(s);
        }
    }
    grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt()
}
