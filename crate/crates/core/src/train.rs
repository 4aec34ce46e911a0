//! Backpropagation-through-time training with Adam and early stopping.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{GradError, ParamStore, Tensor, Var};
use crate::data::Windows;
use crate::graph::{Graph, Mode, ModelError};
use crate::layers::BN_MOMENTUM;
use crate::nets::ForecastModel;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0} split has no windows")]
    EmptySplit(&'static str),
    #[error("loss diverged to {loss} at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize, loss: f32 },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f32,
    pub patience: usize,
    pub max_epochs: usize,
    pub loss: Loss,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f32>,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub adam_eps: f32,
    /// Windows per inference chunk during validation.
    pub eval_batch: usize,
    /// Filled from the run seed; drives batch order.
    #[serde(skip)]
    pub seed: u64,
}

pub const DEFAULT_CLIP_NORM: f32 = 5.0;

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            lr: 1e-4,
            patience: 30,
            max_epochs: 50,
            loss: Loss::Mse,
            clip_norm: None,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            eval_batch: 256,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size < 2 {
            return err("batch_size must be at least 2 (batch norm needs two samples)");
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return err("lr must be a finite non-negative number");
        }
        if self.max_epochs == 0 || self.eval_batch == 0 {
            return err("max_epochs and eval_batch must be at least 1");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return err("adam betas must lie in [0, 1) and eps must be positive");
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return err("clip_norm must be positive");
        }
        Ok(())
    }
}

/// Mean squared error between `pred` and a fixed `target`.
pub fn mse_loss(g: &mut Graph, pred: Var, target: &Tensor) -> Result<Var, ModelError> {
    if g.shape(pred) != target.shape() {
        return Err(GradError::ShapeMismatch {
            op: "mse_loss",
            detail: format!("prediction {:?}, target {:?}", g.shape(pred), target.shape()),
        }
        .into());
    }
    let t = g.constant(target.clone())?;
    let d = g.sub(pred, t)?;
    let sq = g.square(d)?;
    Ok(g.mean(sq)?)
}

/// First and second moments for every parameter in a store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore, beta1: f32, beta2: f32, eps: f32) -> Self {
        let zeros: Vec<Vec<f32>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self {
            beta1,
            beta2,
            eps,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update from the gradients stored in `store`.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, lr: f32) -> Result<(), TrainError> {
    if state.m.len() != store.len() {
        return Err(TrainError::Config(format!(
            "optimizer tracks {} parameters, model has {}",
            state.m.len(),
            store.len()
        )));
    }
    state.step += 1;
    let (b1, b2) = (state.beta1 as f64, state.beta2 as f64);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (i, p) in store.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        if m.len() != p.grad.len() {
            return Err(TrainError::Config(format!("moment shape mismatch for {}", p.name)));
        }
        for ((w, &g), (mi, vi)) in p.value.data_mut().iter_mut().zip(&p.grad).zip(m.iter_mut().zip(v.iter_mut())) {
            let g = g as f64;
            let m_new = b1 * *mi as f64 + (1.0 - b1) * g;
            let v_new = b2 * *vi as f64 + (1.0 - b2) * g * g;
            *mi = m_new as f32;
            *vi = v_new as f32;
            let update = lr as f64 * (m_new / c1) / ((v_new / c2).sqrt() + state.eps as f64);
            *w = (*w as f64 - update) as f32;
        }
    }
    Ok(())
}

/// Rescales stored gradients so their global norm is at most `max_norm`.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f32) -> f32 {
    let norm = store.grad_norm();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for p in store.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid_loss: f64,
    pub stopped_early: bool,
}

impl History {
    /// CSV with header `epoch,train_loss,valid_loss`. Wall time is left out
    /// so reruns produce identical files.
    pub fn write_csv(&self, path: &Path) -> Result<(), std::io::Error> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "epoch,train_loss,valid_loss")?;
        for r in &self.records {
            writeln!(f, "{},{},{}", r.epoch, r.train_loss, r.valid_loss)?;
        }
        f.flush()
    }
}

/// Mean squared error of the model on every window, evaluated in chunks.
pub fn evaluate_loss(model: &ForecastModel, windows: &Windows, chunk: usize) -> Result<f64, TrainError> {
    let idx: Vec<usize> = (0..windows.len()).collect();
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for part in idx.chunks(chunk.max(1)) {
        let (x, y) = windows.batch(part);
        let p = model.predict(&x, part.len())?;
        sum += p.data().iter().zip(y.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>();
        n += y.len();
    }
    Ok(sum / n as f64)
}

fn diverged(epoch: usize, batch: usize, e: ModelError) -> TrainError {
    match e {
        ModelError::Grad(GradError::NonFinite { .. }) => TrainError::Diverged {
            epoch,
            batch,
            loss: f32::NAN,
        },
        other => TrainError::Model(other),
    }
}

/// One optimization step on a batch; returns the batch loss.
pub fn train_step(
    model: &mut ForecastModel,
    adam: &mut AdamState,
    cfg: &TrainConfig,
    x: &Tensor,
    y: &Tensor,
) -> Result<f32, ModelError> {
    let (grads, updates, loss) = {
        let mut g = model.graph(Mode::Train);
        let pred = model.forward(&mut g, x)?;
        let loss = mse_loss(&mut g, pred, y)?;
        let value = g.value(loss).data()[0];
        let (tape, updates) = g.into_parts();
        (tape.backward(loss)?, updates, value)
    };
    if !loss.is_finite() {
        return Ok(loss);
    }
    let store = model.params_mut();
    store.zero_grad();
    store.accumulate(&grads);
    if let Some(c) = cfg.clip_norm {
        clip_grad_norm(store, c);
    }
    adam_step(store, adam, cfg.lr).map_err(|e| ModelError::Config(e.to_string()))?;
    store.apply_bn_updates(&updates, BN_MOMENTUM);
    Ok(loss)
}

/// Trains until `max_epochs` or until validation loss has not improved for
/// `patience` epochs, then restores the parameters of the best epoch.
pub fn train(
    model: &mut ForecastModel,
    train_set: &Windows,
    valid_set: &Windows,
    cfg: &TrainConfig,
) -> Result<History, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if valid_set.is_empty() {
        return Err(TrainError::EmptySplit("valid"));
    }
    if train_set.len() < 2 {
        return Err(TrainError::Config("training needs at least two windows".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(model.params(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let batch = cfg.batch_size.min(train_set.len());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = History {
        best_valid_loss: f64::INFINITY,
        ..History::default()
    };
    let mut best = model.params().clone();
    let mut wait = 0usize;
    let start = Instant::now();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        let mut batches = 0usize;
        for (bi, idx) in order.chunks_exact(batch).enumerate() {
            let (x, y) = train_set.batch(idx);
            let loss = train_step(model, &mut adam, cfg, &x, &y).map_err(|e| diverged(epoch, bi, e))?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch, batch: bi, loss });
            }
            total += loss as f64;
            batches += 1;
        }
        let valid_loss = evaluate_loss(model, valid_set, cfg.eval_batch)?;
        if !valid_loss.is_finite() {
            return Err(TrainError::Diverged {
                epoch,
                batch: batches,
                loss: valid_loss as f32,
            });
        }
        let record = EpochRecord {
            epoch,
            train_loss: total / batches as f64,
            valid_loss,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train {:.6} valid {:.6} ({:.1}s)",
            record.train_loss,
            record.valid_loss,
            record.wall_seconds
        );
        history.records.push(record);
        if valid_loss < history.best_valid_loss {
            history.best_valid_loss = valid_loss;
            history.best_epoch = epoch;
            best = model.params().clone();
            wait = 0;
        } else {
            wait += 1;
            if wait >= cfg.patience.max(1) {
                history.stopped_early = true;
                break;
            }
        }
    }
    model
        .params_mut()
        .load_values_from(&best)
        .map_err(|e| TrainError::Model(e.into()))?;
    Ok(history)
}
