//! Optimization: Adam, source pre-training, fine-tuning strategies, early
//! stopping and checkpoints.

mod adam;
mod checkpoint;

pub use adam::{clip_grad_norm, Adam, AdamConfig};
pub use checkpoint::{
    decode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CheckpointHeader, TrainMeta,
    FORMAT_VERSION, MAGIC,
};

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mode, ParamStore, Tensor};
use crate::data::{Window, WindowDataset};
use crate::error::{Error, Result};
use crate::model::MikModel;
use crate::rng;
use crate::scalar::{c, Scalar};

/// Prefixes frozen by the layer-freezing fine-tune strategy.
pub const FREEZE_BACKBONE: [&str; 2] = ["mixer.", "informer."];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        }
    }

    fn stream_id(self) -> u64 {
        match self {
            Phase::Pretrain => 1,
            Phase::Finetune => 2,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainPlan {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Parameter-name prefixes held fixed.
    pub freeze: Vec<String>,
    /// Stop after this many epochs without validation improvement.
    pub patience: Option<usize>,
    pub min_delta: f64,
    /// Weight of the KAN coefficient penalty; 0 disables it.
    pub kan_sparsity: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Chronological hold-out fraction per station for validation.
    pub val_fraction: f64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr: 1e-4,
            weight_decay: 0.0,
            freeze: Vec::new(),
            patience: Some(3),
            min_delta: 0.0,
            kan_sparsity: 0.0,
            grad_clip: Some(1.0),
            val_fraction: 0.1,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if self.batch_size == 0 {
            p.push("batch_size must be at least 1".to_string());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            p.push(format!("lr {} must be a non-negative number", self.lr));
        }
        if self.weight_decay < 0.0 {
            p.push(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if self.kan_sparsity < 0.0 {
            p.push(format!("kan_sparsity {} must be non-negative", self.kan_sparsity));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            p.push(format!("val_fraction {} outside [0, 1)", self.val_fraction));
        }
        if matches!(self.grad_clip, Some(v) if !(v > 0.0)) {
            p.push("grad_clip must be positive".to_string());
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// How a pre-trained model adapts to a target station.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinetuneStrategy {
    /// Only the head trains; Mixer and Informer stay fixed.
    Freeze,
    /// Everything trains at a tenth of the pre-training rate.
    Full,
    /// Everything trains with batches of 8.
    SmallBatch,
}

impl FinetuneStrategy {
    /// Derives the fine-tune plan from the pre-training plan.
    pub fn plan(self, pretrain: &TrainPlan) -> TrainPlan {
        let mut plan = pretrain.clone();
        match self {
            FinetuneStrategy::Freeze => plan.freeze = FREEZE_BACKBONE.iter().map(|s| s.to_string()).collect(),
            FinetuneStrategy::Full => plan.lr = pretrain.lr / 10.0,
            FinetuneStrategy::SmallBatch => plan.batch_size = 8,
        }
        plan
    }
}

impl FromStr for FinetuneStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "freeze" => Ok(Self::Freeze),
            "full" => Ok(Self::Full),
            "small-batch" => Ok(Self::SmallBatch),
            _ => Err(Error::invalid(format!(
                "unknown fine-tune strategy {s:?} (expected freeze, full or small-batch)"
            ))),
        }
    }
}

/// Marks parameters matching any prefix as frozen and all others trainable.
/// Returns the prefixes that matched nothing.
pub fn apply_freeze<T: Scalar>(store: &mut ParamStore<T>, prefixes: &[String]) -> Vec<String> {
    let mut hits = vec![0usize; prefixes.len()];
    for p in store.iter_mut() {
        let mut frozen = false;
        for (i, pre) in prefixes.iter().enumerate() {
            if p.name.starts_with(pre.as_str()) {
                hits[i] += 1;
                frozen = true;
            }
        }
        p.trainable = !frozen;
    }
    let unmatched: Vec<String> = prefixes
        .iter()
        .zip(hits)
        .filter(|(_, n)| *n == 0)
        .map(|(p, _)| p.clone())
        .collect();
    for p in &unmatched {
        warn!("freeze prefix {p:?} matches no parameters");
    }
    unmatched
}

/// True when the best loss of the last `patience` entries does not beat
/// the best earlier loss by more than `min_delta`.
pub fn early_stop_check(history: &[f64], patience: usize, min_delta: f64) -> bool {
    if history.len() <= patience {
        return false;
    }
    let split = history.len() - patience;
    let best_before = history[..split].iter().copied().fold(f64::INFINITY, f64::min);
    let best_recent = history[split..].iter().copied().fold(f64::INFINITY, f64::min);
    best_recent >= best_before - min_delta
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// Inputs clamped to the KAN grid range during training.
    pub clamped: usize,
}

pub fn write_loss_history(records: &[EpochRecord], mut out: impl Write) -> Result<()> {
    writeln!(out, "phase,epoch,train_loss,val_loss")?;
    for r in records {
        let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{}", r.phase, r.epoch, r.train_loss, val)?;
    }
    Ok(())
}

fn window_tensors<T: Scalar>(w: &Window, ds: &WindowDataset) -> Result<(Tensor<T>, Tensor<T>)> {
    let x = Tensor::new(vec![ds.input_len, ds.channels], w.input.iter().map(|&v| c(v)).collect())?;
    let y = Tensor::from_vec(w.target.iter().map(|&v| c(v)).collect());
    Ok((x, y))
}

/// Mean eval-mode MSE over a dataset.
pub fn dataset_loss<T: Scalar>(model: &MikModel<T>, ds: &WindowDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset("no windows to evaluate".into()));
    }
    let mut total = 0.0;
    for w in &ds.windows {
        let pred = model.predict(&w.input.iter().map(|&v| c(v)).collect::<Vec<T>>())?;
        let se: f64 = pred
            .iter()
            .zip(&w.target)
            .map(|(p, t)| (p.to_f64_lossy() - t).powi(2))
            .sum();
        total += se / w.target.len() as f64;
    }
    Ok(total / ds.len() as f64)
}

fn check_dataset<T: Scalar>(model: &MikModel<T>, ds: &WindowDataset) -> Result<()> {
    let cfg = model.config();
    if ds.input_len != cfg.input_len || ds.horizon != cfg.horizon || ds.channels != cfg.channels {
        return Err(Error::invalid(format!(
            "dataset windows are [{}x{}] -> {} but the model expects [{}x{}] -> {}",
            ds.input_len, ds.channels, ds.horizon, cfg.input_len, cfg.channels, cfg.horizon
        )));
    }
    Ok(())
}

/// Mini-batch Adam on `train`, keeping the parameters of the best
/// validation epoch (or the last epoch without validation data).
pub fn train_model<T: Scalar>(
    model: &mut MikModel<T>,
    train: &WindowDataset,
    val: Option<&WindowDataset>,
    plan: &TrainPlan,
    phase: Phase,
    seed: u64,
) -> Result<TrainReport> {
    plan.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset(format!("{phase} training set has no windows")));
    }
    check_dataset(model, train)?;
    let val = val.filter(|v| !v.is_empty());
    apply_freeze(model.params_mut(), &plan.freeze);
    let mut opt = Adam::new(plan.adam(), model.params());
    let mut report = TrainReport {
        history: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
        clamped: 0,
    };
    let mut best: Option<(f64, Vec<Tensor<T>>)> = None;
    let mut val_history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=plan.epochs {
        let mut shuffle_rng = rng::stream(seed, &[phase.stream_id(), epoch as u64]);
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(plan.batch_size).enumerate() {
            let step_rng = rng::stream(seed, &[phase.stream_id(), epoch as u64, b as u64 + 1]);
            let mut g = Graph::new(Mode::Train).with_rng(step_rng);
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let (x, y) = window_tensors::<T>(&train.windows[i], train)?;
                let xv = g.constant(x);
                let pred = model.forward(&mut g, xv)?;
                let target = g.constant(y);
                losses.push(g.mse_loss(pred, target)?);
            }
            let all = g.concat(&losses)?;
            let data_loss = g.mean(all)?;
            loss_sum += g.value(data_loss).data()[0].to_f64_lossy() * batch.len() as f64;
            let loss = match model.sparsity_penalty(&mut g, plan.kan_sparsity)? {
                Some(pen) if plan.kan_sparsity > 0.0 => g.add(data_loss, pen)?,
                _ => data_loss,
            };
            model.params_mut().zero_grad();
            g.backward(loss, model.params_mut())?;
            if let Some(max) = plan.grad_clip {
                clip_grad_norm(model.params_mut(), max);
            }
            opt.step(model.params_mut())?;
            report.clamped += g.stats.clamped;
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_loss = val.map(|v| dataset_loss(model, v)).transpose()?;
        info!(
            "{phase} epoch {epoch}/{}: train {train_loss:.6}{}",
            plan.epochs,
            val_loss.map(|v| format!(", val {v:.6}")).unwrap_or_default()
        );
        report.history.push(EpochRecord {
            phase,
            epoch,
            train_loss,
            val_loss,
        });
        let score = val_loss.unwrap_or(train_loss);
        if best.as_ref().map_or(true, |(b, _)| score < *b) {
            best = Some((score, model.params().snapshot()));
            report.best_epoch = epoch;
        }
        if let (Some(v), Some(p)) = (val_loss, plan.patience) {
            val_history.push(v);
            if early_stop_check(&val_history, p, plan.min_delta) {
                debug!("{phase}: early stop after epoch {epoch}");
                report.stopped_early = true;
                break;
            }
        }
    }
    if let Some((_, snap)) = best {
        model.params_mut().restore(&snap);
    }
    Ok(report)
}

/// Trains on source windows, holding out the last `val_fraction` of each
/// station chronologically for validation.
pub fn pretrain<T: Scalar>(model: &mut MikModel<T>, source: &WindowDataset, plan: &TrainPlan, seed: u64) -> Result<TrainReport> {
    if source.is_empty() {
        return Err(Error::EmptyDataset("source dataset has no windows".into()));
    }
    let (train, val) = source.split_validation(plan.val_fraction);
    train_model(model, &train, Some(&val), plan, Phase::Pretrain, seed)
}

/// Adapts a model to the target fine-tune slice under `plan` (see
/// [`FinetuneStrategy::plan`]).
pub fn finetune<T: Scalar>(model: &mut MikModel<T>, target: &WindowDataset, plan: &TrainPlan, seed: u64) -> Result<TrainReport> {
    if target.is_empty() {
        return Err(Error::EmptyDataset(
            "target fine-tune slice has no windows; move target_cutoff later or shorten input_len/horizon".into(),
        ));
    }
    let (train, val) = target.split_validation(plan.val_fraction);
    let report = train_model(model, &train, Some(&val), plan, Phase::Finetune, seed);
    // leave the model fully trainable for whatever comes next
    apply_freeze(model.params_mut(), &[]);
    report
}
