//! AdamW with a linearly decaying learning rate, early stopping and
//! best-epoch restoration.

use std::time::Instant;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::{select_sdt_mask, AdapterSpec, Method};
use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::model::{argmax, MambaModel, ParamStore, Trainable};
use crate::tasks::{TaskInstance, Target, LABEL_TOKENS};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    LinearDecay,
}

fn yes() -> bool {
    true
}
fn default_patience() -> usize {
    5
}
fn default_weight_decay() -> f64 {
    0.01
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_sdt_warmup() -> usize {
    8
}
fn default_probe() -> usize {
    32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default = "yes")]
    pub early_stopping: bool,
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Candidate learning rates; when set, `lr` is replaced by the grid winner.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<Vec<f64>>,
    #[serde(default = "default_probe")]
    pub probe_size: usize,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Sequences used to pick SDT dimensions.
    #[serde(default = "default_sdt_warmup")]
    pub sdt_warmup: usize,
}

impl TrainConfig {
    pub fn new(lr: f64, epochs: usize, batch_size: usize, seed: u64) -> Self {
        TrainConfig {
            lr,
            epochs,
            batch_size,
            seed,
            schedule: Schedule::LinearDecay,
            early_stopping: true,
            patience: default_patience(),
            grid: None,
            probe_size: default_probe(),
            weight_decay: default_weight_decay(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            sdt_warmup: default_sdt_warmup(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| Error::Config {
            path: format!("train.{field}"),
            message: message.into(),
        };
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(bad("lr", "must be positive and finite"));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(bad("epochs", "must be at least 1"));
        }
        if let Some(g) = &self.grid {
            if g.is_empty() {
                return Err(bad("grid", "must not be empty"));
            }
            if g.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(bad("grid", "learning rates must be positive and finite"));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(bad("beta1", "betas must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 || self.eps <= 0.0 {
            return Err(bad("weight_decay", "weight decay must be ≥ 0 and eps > 0"));
        }
        Ok(())
    }
}

/// Moment estimates keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub step: u64,
    moments: IndexMap<String, (Vec<f64>, Vec<f64>)>,
}

/// `base_lr · (1 − step/total_steps)`.
pub fn lr_at(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    base_lr * (1.0 - step.min(total_steps) as f64 / total_steps as f64)
}

/// One AdamW update of every parameter that has a gradient. Decay is
/// decoupled and hits only trainable entries of parameters flagged for it.
/// Non-finite gradients abort before anything changes.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &IndexMap<String, Vec<f64>>,
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    for (name, g) in grads {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient for parameter {name}")));
        }
        let p = params.get(name).ok_or_else(|| Error::Lookup {
            kind: "parameter",
            name: name.clone(),
        })?;
        if p.tensor.len() != g.len() {
            return Err(Error::dim("adamw_step", format!("{name}: {} grads for {} values", g.len(), p.tensor.len())));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    for (name, g) in grads {
        let p = params.get_mut(name)?;
        let mask = match &p.trainable {
            Trainable::Frozen => continue,
            Trainable::Full => None,
            Trainable::Masked(m) => Some(m.clone()),
        };
        let decay = if p.decay { cfg.weight_decay } else { 0.0 };
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
        let data = p.tensor.data_mut();
        for i in 0..g.len() {
            if mask.as_ref().is_some_and(|mk| !mk[i]) {
                continue;
            }
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let update = (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
            data[i] = data[i] * (1.0 - lr * decay) - lr * update;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct TaskData {
    pub train: Vec<TaskInstance>,
    pub val: Vec<TaskInstance>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub loss: f64,
    /// fraction of scored targets predicted correctly
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub method: String,
    pub lr: f64,
    pub seed: u64,
    pub trainable: usize,
    pub total: usize,
    pub epochs: Vec<EpochMetrics>,
    /// 1-based; 0 when no epoch ran
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    /// Not serialized so that metric files stay reproducible byte for byte.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Correct predictions in one instance. Classes compare the two label
/// logits only; sequences take the argmax over the whole vocabulary.
pub fn score_instance(inst: &TaskInstance, logits: &Tensor) -> usize {
    match &inst.target {
        Target::Class(c) => {
            let row = logits.row(inst.mask[0]);
            let pick = usize::from(row[LABEL_TOKENS[1]] > row[LABEL_TOKENS[0]]);
            usize::from(pick == *c)
        }
        Target::Sequence(_) => inst
            .loss_targets()
            .iter()
            .filter(|&&(pos, tok)| argmax(logits.row(pos)) == tok)
            .count(),
    }
}

/// Mean per-instance cross-entropy and target-level accuracy.
pub fn evaluate(model: &MambaModel, data: &[TaskInstance]) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::contract("evaluation needs at least one instance"));
    }
    let per: Vec<(f64, usize, usize)> = data
        .par_iter()
        .map(|inst| {
            let logits = model.forward(&inst.tokens)?;
            let targets = inst.loss_targets();
            let loss = targets
                .iter()
                .map(|&(pos, tok)| -log_softmax_row(logits.row(pos))[tok])
                .sum::<f64>()
                / targets.len() as f64;
            Ok((loss, score_instance(inst, &logits), targets.len()))
        })
        .collect::<Result<_>>()?;
    let loss = per.iter().map(|p| p.0).sum::<f64>() / per.len() as f64;
    let correct: usize = per.iter().map(|p| p.1).sum();
    let total: usize = per.iter().map(|p| p.2).sum();
    Ok(EvalResult {
        loss,
        accuracy: correct as f64 / total as f64,
    })
}

/// Mean loss and mean gradient over a batch, summed in batch order.
fn batch_gradient(model: &MambaModel, batch: &[&TaskInstance]) -> Result<(f64, IndexMap<String, Vec<f64>>)> {
    let per = batch
        .par_iter()
        .map(|inst| model.loss_and_grads(&inst.tokens, &inst.loss_targets()))
        .collect::<Result<Vec<_>>>()?;
    let scale = 1.0 / per.len() as f64;
    let mut loss = 0.0;
    let mut grads: IndexMap<String, Vec<f64>> = IndexMap::new();
    for sg in per {
        loss += sg.loss * scale;
        for (name, g) in sg.grads {
            let acc = grads.entry(name).or_insert_with(|| vec![0.0; g.len()]);
            acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v * scale);
        }
    }
    Ok((loss, grads))
}

fn snapshot(model: &MambaModel) -> Vec<(String, Tensor)> {
    model
        .params
        .iter()
        .filter(|(_, p)| p.trainable.is_trainable())
        .map(|(n, p)| (n.clone(), p.tensor.clone()))
        .collect()
}

fn restore(model: &mut MambaModel, snap: &[(String, Tensor)]) -> Result<()> {
    for (name, t) in snap {
        model.params.get_mut(name)?.tensor = t.clone();
    }
    Ok(())
}

struct Loop<'a> {
    cfg: &'a TrainConfig,
    lr: f64,
    state: AdamState,
    step: usize,
    total_steps: usize,
    rng: ChaCha8Rng,
}

impl Loop<'_> {
    /// One pass over `data` in a seeded shuffled order; returns the mean
    /// batch loss.
    fn epoch(&mut self, model: &mut MambaModel, data: &[TaskInstance]) -> Result<f64> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<&TaskInstance> = chunk.iter().map(|&i| &data[i]).collect();
            let (loss, grads) = batch_gradient(model, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite training loss at step {}", self.step)));
            }
            let lr_t = lr_at(self.step, self.total_steps, self.lr);
            adamw_step(&mut model.params, &grads, &mut self.state, lr_t, self.cfg)?;
            self.step += 1;
            sum += loss;
            batches += 1;
        }
        Ok(sum / batches.max(1) as f64)
    }
}

fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

fn sdt_warmup(model: &mut MambaModel, spec: &AdapterSpec, data: &TaskData, cfg: &TrainConfig) -> Result<()> {
    if spec.method != Method::Sdt {
        return Ok(());
    }
    let warmup: Vec<(Vec<usize>, Vec<(usize, usize)>)> = data
        .train
        .iter()
        .take(cfg.sdt_warmup.max(1))
        .map(|i| (i.tokens.clone(), i.loss_targets()))
        .collect();
    select_sdt_mask(model, &warmup, spec.sdt_keep_fraction.unwrap_or((1.0, 1.0)))?;
    Ok(())
}

pub fn train(model: &mut MambaModel, spec: &AdapterSpec, data: &TaskData, cfg: &TrainConfig) -> Result<RunMetrics> {
    train_observed(model, spec, data, cfg, |_| {})
}

/// Trains in place and leaves the best-epoch parameters in `model`.
/// `observe` sees every finished epoch. On a non-finite loss the model is
/// rolled back to the last completed epoch and the error is returned.
pub fn train_observed(
    model: &mut MambaModel,
    spec: &AdapterSpec,
    data: &TaskData,
    cfg: &TrainConfig,
    mut observe: impl FnMut(&EpochMetrics),
) -> Result<RunMetrics> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::contract("training needs non-empty train and validation sets"));
    }
    let started = Instant::now();
    sdt_warmup(model, spec, data, cfg)?;
    let mut lp = Loop {
        cfg,
        lr: cfg.lr,
        state: AdamState::default(),
        step: 0,
        total_steps: cfg.epochs * steps_per_epoch(data.train.len(), cfg.batch_size),
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    };
    let mut metrics = RunMetrics {
        method: spec.method.to_string(),
        lr: cfg.lr,
        seed: cfg.seed,
        trainable: model.params.trainable_count(),
        total: model.params.total_count(),
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_accuracy: f64::NEG_INFINITY,
        best_val_loss: f64::INFINITY,
        stopped_early: false,
        wall_time_secs: 0.0,
    };
    let mut best = snapshot(model);
    let mut last_good = best.clone();
    let mut lowest_loss = f64::INFINITY;
    let mut since_improved = 0;
    for epoch in 1..=cfg.epochs {
        let lr_start = lr_at(lp.step, lp.total_steps, lp.lr);
        let train_loss = match lp.epoch(model, &data.train) {
            Ok(l) => l,
            Err(e) => {
                restore(model, &last_good)?;
                return Err(e);
            }
        };
        let val = evaluate(model, &data.val)?;
        let m = EpochMetrics {
            epoch,
            lr: lr_start,
            train_loss,
            val_loss: val.loss,
            val_accuracy: val.accuracy,
        };
        observe(&m);
        log::info!(
            "epoch {epoch}: train {train_loss:.4} val {:.4} acc {:.4}",
            val.loss,
            val.accuracy
        );
        let better = val.accuracy > metrics.best_val_accuracy
            || (val.accuracy == metrics.best_val_accuracy && val.loss < metrics.best_val_loss);
        last_good = snapshot(model);
        if better {
            metrics.best_epoch = epoch;
            metrics.best_val_accuracy = val.accuracy;
            metrics.best_val_loss = val.loss;
            best = last_good.clone();
        }
        metrics.epochs.push(m);
        if val.loss < lowest_loss {
            lowest_loss = val.loss;
            since_improved = 0;
        } else {
            since_improved += 1;
        }
        if cfg.early_stopping && since_improved >= cfg.patience && epoch < cfg.epochs {
            metrics.stopped_early = true;
            break;
        }
    }
    restore(model, &best)?;
    metrics.wall_time_secs = started.elapsed().as_secs_f64();
    Ok(metrics)
}

/// One probe epoch per candidate on the first `probe_size` training
/// instances; returns the rate with the lowest resulting probe loss.
/// Diverged candidates count as infinitely bad; ties keep the earlier one.
pub fn grid_search(
    factory: impl Fn() -> Result<MambaModel>,
    spec: &AdapterSpec,
    data: &TaskData,
    grid: &[f64],
    probe_size: usize,
    cfg: &TrainConfig,
) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::contract("grid search needs at least one learning rate"));
    }
    let probe = &data.train[..probe_size.max(1).min(data.train.len())];
    if probe.is_empty() {
        return Err(Error::contract("grid search needs training data"));
    }
    let probe_data = TaskData {
        train: probe.to_vec(),
        val: Vec::new(),
    };
    let mut best: Option<(f64, f64)> = None;
    for &lr in grid {
        let loss = probe_loss(&factory, spec, &probe_data, lr, cfg).unwrap_or(f64::NAN);
        log::info!("grid lr {lr:e}: probe loss {loss}");
        if loss.is_finite() && best.is_none_or(|(_, b)| loss < b) {
            best = Some((lr, loss));
        }
    }
    best.map(|(lr, _)| lr).ok_or_else(|| {
        Error::Numeric(format!("every learning rate in the grid diverged: {grid:?}"))
    })
}

/// Probe loss after one epoch at `lr`, as used by [`grid_search`].
pub fn probe_loss(
    factory: &impl Fn() -> Result<MambaModel>,
    spec: &AdapterSpec,
    probe: &TaskData,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut model = factory()?;
    sdt_warmup(&mut model, spec, probe, cfg)?;
    let mut lp = Loop {
        cfg,
        lr,
        state: AdamState::default(),
        step: 0,
        total_steps: steps_per_epoch(probe.train.len(), cfg.batch_size),
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    };
    lp.epoch(&mut model, &probe.train)?;
    Ok(evaluate(&model, &probe.train)?.loss)
}

/// Grid search when the config carries a grid, then a full run.
pub fn fit(
    factory: impl Fn() -> Result<MambaModel>,
    spec: &AdapterSpec,
    data: &TaskData,
    cfg: &TrainConfig,
) -> Result<(MambaModel, RunMetrics)> {
    cfg.validate()?;
    let mut cfg = cfg.clone();
    if let Some(grid) = cfg.grid.clone() {
        cfg.lr = grid_search(&factory, spec, data, &grid, cfg.probe_size, &cfg)?;
    }
    let mut model = factory()?;
    let metrics = train(&mut model, spec, data, &cfg)?;
    Ok((model, metrics))
}
