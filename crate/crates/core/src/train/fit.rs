use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{combined_loss, LossConfig};
use super::metrics::{evaluate, ConfusionCounts, MetricReport, OdsMode};
use super::optim::{adamw_step, OptimConfig, OptimState};
use crate::data::SegSample;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{Module, NormMode};
use crate::tensor::{backward, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Visit the training samples in a fresh seeded order every epoch.
    pub shuffle: bool,
    /// Threshold for validation F1 and mIoU.
    pub threshold: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// First epoch trained at a tenth of `lr`.
    pub decay_epoch: usize,
    /// Return the best-validation parameters instead of the last epoch's.
    pub keep_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let o = OptimConfig::default();
        Self {
            epochs: 60,
            batch_size: 1,
            shuffle: true,
            threshold: 0.5,
            lr: o.lr,
            weight_decay: o.weight_decay,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            decay_epoch: o.decay_epoch,
            keep_best: true,
        }
    }
}

impl TrainConfig {
    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            decay_epoch: self.decay_epoch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        self.optim().validate()
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's steps.
    pub loss: f64,
    pub val_f1: f64,
    pub val_miou: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub records: Vec<EpochRecord>,
    pub steps: usize,
    /// Epoch whose parameters the model holds on return.
    pub best_epoch: usize,
    pub best_val_f1: f64,
}

fn stack(samples: &[&SegSample]) -> Result<(Tensor, Tensor)> {
    let images: Vec<Tensor> = samples
        .iter()
        .map(|s| {
            let sh = s.image.shape();
            s.image.reshape(&[1, sh[0], sh[1], sh[2]])
        })
        .collect::<Result<_>>()?;
    let masks: Vec<Tensor> = samples
        .iter()
        .map(|s| {
            let sh = s.mask.shape();
            s.mask.reshape(&[1, sh[0], sh[1], sh[2]])
        })
        .collect::<Result<_>>()?;
    Ok((Tensor::concat(&images, 0)?, Tensor::concat(&masks, 0)?))
}

/// Crack probabilities of one sample in eval mode, row-major `H·W`.
pub fn predict_probs(model: &Model, image: &Tensor) -> Result<Vec<f64>> {
    let sh = image.shape();
    if sh.len() != 3 {
        return Err(Error::Contract(format!("image must be [3,H,W], got {sh:?}")));
    }
    let logits = model.infer(&image.reshape(&[1, sh[0], sh[1], sh[2]])?)?;
    Ok(logits.sigmoid().to_vec())
}

/// Full metric report of `model` on `samples`.
pub fn evaluate_model(model: &Model, samples: &[SegSample], threshold: f64, thresholds: &[f64], mode: OdsMode) -> Result<MetricReport> {
    let probs: Vec<Vec<f64>> = samples.iter().map(|s| predict_probs(model, &s.image)).collect::<Result<_>>()?;
    let labels: Vec<Vec<bool>> = samples.iter().map(SegSample::label).collect();
    let p: Vec<&[f64]> = probs.iter().map(Vec::as_slice).collect();
    let y: Vec<&[bool]> = labels.iter().map(Vec::as_slice).collect();
    evaluate(&p, &y, threshold, thresholds, mode)
}

/// Pooled confusion counts at `threshold`.
pub fn confusion_at(model: &Model, samples: &[SegSample], threshold: f64) -> Result<ConfusionCounts> {
    let mut c = ConfusionCounts::default();
    for s in samples {
        let p = predict_probs(model, &s.image)?;
        let mask: Vec<bool> = p.iter().map(|&v| v >= threshold).collect();
        c += ConfusionCounts::from_masks(&mask, &s.label())?;
    }
    Ok(c)
}

fn snapshot(model: &Model) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    model.visit("", &mut |_, t, _| out.push(t.to_vec()));
    out
}

fn restore(model: &mut Model, values: Vec<Vec<f64>>) -> Result<()> {
    let mut it = values.into_iter();
    let mut res = Ok(());
    model.visit_mut("", &mut |_, t, _| {
        if res.is_ok() {
            res = t.set_data(it.next().expect("same visiting order"));
        }
    });
    res
}

/// Train with AdamW on `train`, validating after every epoch. On return the
/// model holds the parameters of the epoch with the best validation F1 (the
/// last epoch when `val` is empty, or when `keep_best` is off).
pub fn fit(
    model: &mut Model,
    train: &[SegSample],
    val: &[SegSample],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<FitReport> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = OptimState::new(cfg.optim());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Option<Vec<Vec<f64>>>)> = None;
    let mut steps = 0;

    for epoch in 0..cfg.epochs {
        state.lr = state.cfg.lr_schedule(epoch);
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&SegSample> = chunk.iter().map(|&i| &train[i]).collect();
            let (x, y) = stack(&batch)?;
            let probs = model.forward(&x, NormMode::Train)?.sigmoid();
            let loss = combined_loss(&probs, &y, loss_cfg)?;
            let lv = loss.item()?;
            if !lv.is_finite() {
                let ids: Vec<&str> = batch.iter().map(|s| s.id.as_str()).collect();
                return Err(Error::Numeric(format!(
                    "loss became {lv} at epoch {epoch}, step {steps}, samples {ids:?}"
                )));
            }
            let grads = backward(&loss)?;
            adamw_step(model, &grads, &mut state)?;
            total += lv;
            batches += 1;
            steps += 1;
        }
        let (val_f1, val_miou) = if val.is_empty() {
            (0.0, 0.0)
        } else {
            let c = confusion_at(model, val, cfg.threshold)?;
            (c.f1(), c.miou())
        };
        let rec = EpochRecord {
            epoch,
            loss: total / batches as f64,
            val_f1,
            val_miou,
            lr: state.lr,
        };
        log::debug!("epoch {epoch}: loss {:.6} val_f1 {val_f1:.4}", rec.loss);
        on_epoch(&rec);
        records.push(rec);
        let improved = best.as_ref().map_or(true, |(_, f, _)| val_f1 > *f || val.is_empty());
        if improved {
            best = Some((epoch, val_f1, cfg.keep_best.then(|| snapshot(model))));
        }
    }
    let (best_epoch, best_val_f1, params) = best.expect("at least one epoch");
    if let Some(params) = params {
        restore(model, params)?;
    }
    Ok(FitReport {
        records,
        steps,
        best_epoch,
        best_val_f1,
    })
}
