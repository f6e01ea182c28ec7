//! Mini-batch training with Adam and a cosine schedule, plus evaluation.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{argmax_rows, MetricsReport};
use crate::model::GeoRepNet;
use crate::optim::{cosine_lr, Adam};
use crate::repvgg::{ForwardCtx, TensorRole};
use crate::synth::SampleRecord;
use crate::tape::Tape;
use crate::tensor::{DType, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_min: f64,
    pub seed: u64,
    /// Weight the loss by inverse class frequency.
    pub weighted_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            base_lr: 1e-4,
            lr_min: 0.0,
            seed: 0,
            weighted_loss: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(self.lr_min >= 0.0) || self.lr_min > self.base_lr {
            return Err(Error::Config(format!(
                "lr_min must lie in [0, base_lr], got {}",
                self.lr_min
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    /// Learning rate at the first step of the epoch.
    pub lr: f64,
}

/// Stacks samples into `[B, 3, H, W]` rgb and `[B, 1, H, W]` depth tensors.
pub fn collate(samples: &[&SampleRecord]) -> Result<(Tensor, Tensor, Vec<usize>)> {
    let first = samples.first().ok_or_else(|| Error::Usage("empty batch".into()))?;
    let (c, h, w) = (first.rgb.shape()[0], first.rgb.shape()[1], first.rgb.shape()[2]);
    let mut rgb = Vec::with_capacity(samples.len() * c * h * w);
    let mut depth = Vec::with_capacity(samples.len() * h * w);
    let mut labels = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        if s.rgb.shape() != first.rgb.shape() || s.depth.shape() != [h, w] {
            return Err(Error::Data(format!("sample {i} of the batch has a different image size")));
        }
        rgb.extend_from_slice(s.rgb.data());
        depth.extend_from_slice(s.depth.data());
        labels.push(s.label);
    }
    let b = samples.len();
    Ok((
        Tensor::new(&[b, c, h, w], rgb, DType::F64)?,
        Tensor::new(&[b, 1, h, w], depth, DType::F64)?,
        labels,
    ))
}

/// Inverse-frequency class weights normalised to mean one over present classes.
pub fn inverse_frequency_weights(data: &[SampleRecord], classes: usize) -> Vec<f64> {
    let mut counts = alloc::vec![0usize; classes];
    for s in data {
        counts[s.label] += 1;
    }
    let present = counts.iter().filter(|&&c| c > 0).count().max(1) as f64;
    let raw: Vec<f64> = counts.iter().map(|&c| if c == 0 { 0.0 } else { 1.0 / c as f64 }).collect();
    let mean = raw.iter().sum::<f64>() / present;
    raw.iter().map(|w| w / mean).collect()
}

/// Trains in place and returns the per-epoch history. `on_epoch` sees each record as it completes.
pub fn train(
    model: &mut GeoRepNet,
    data: &[SampleRecord],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    let classes = model.config.num_classes;
    if let Some((i, s)) = data.iter().enumerate().find(|(_, s)| s.label >= classes) {
        return Err(Error::Data(format!("sample {i}: label {} outside 0..{classes}", s.label)));
    }
    if model.is_fused() {
        return Err(Error::Usage("a fused model cannot be trained".into()));
    }
    let weights = cfg.weighted_loss.then(|| inverse_frequency_weights(data, classes));
    let batches_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(0x5348_5546);
    let mut adam = Adam::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let epoch_lr = cosine_lr(step, total_steps, cfg.base_lr, cfg.lr_min)?;
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for (batch_index, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let samples: Vec<&SampleRecord> = chunk.iter().map(|&i| &data[i]).collect();
            let (rgb, depth, labels) = collate(&samples)?;
            let mut tape = Tape::new();
            let mut ctx = ForwardCtx::training();
            let logits = model.forward(&mut tape, &rgb, &depth, &mut ctx).map_err(|e| at_batch(e, epoch, batch_index))?;
            let loss = tape
                .cross_entropy(logits, &labels, weights.as_deref())
                .map_err(|e| at_batch(e, epoch, batch_index))?;
            let loss_value = tape.value(loss).item();
            if !loss_value.is_finite() {
                return Err(Error::NonFinite { op: "training loss" });
            }
            loss_sum += loss_value * labels.len() as f64;
            let predictions = argmax_rows(tape.value(logits).data(), classes);
            hits += predictions.iter().zip(&labels).filter(|(p, y)| p == y).count();
            model.apply_bn_updates(&tape, &ctx)?;
            let grads = tape.backward(loss).map_err(|e| at_batch(e, epoch, batch_index))?;

            let lr = cosine_lr(step, total_steps, cfg.base_lr, cfg.lr_min)?;
            let scale = adam.begin_step(lr)?;
            let mut failure = None;
            model.visit_mut(&mut |name, t, role| {
                if role != TensorRole::Parameter || failure.is_some() {
                    return;
                }
                if let Some(g) = grads.get(&name) {
                    if let Err(e) = adam.update(&scale, &name, t, g) {
                        failure = Some(e);
                    }
                }
            });
            if let Some(e) = failure {
                return Err(e);
            }
            if let Some(d) = &mut model.dgpg {
                d.project();
            }
            step += 1;
        }
        let record = EpochRecord {
            epoch,
            loss: loss_sum / data.len() as f64,
            train_accuracy: hits as f64 / data.len() as f64,
            lr: epoch_lr,
        };
        on_epoch(&record);
        history.push(record);
    }
    Ok(history)
}

fn at_batch(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite { op } => Error::Data(format!("non-finite value in {op} at epoch {epoch}, batch {batch}")),
        other => other,
    }
}

/// Row-wise softmax of inference logits for every sample, in order.
pub fn predict_probabilities(model: &GeoRepNet, data: &[SampleRecord], batch_size: usize) -> Result<Vec<f64>> {
    let k = model.config.num_classes;
    let mut out = Vec::with_capacity(data.len() * k);
    for chunk in data.chunks(batch_size.max(1)) {
        let refs: Vec<&SampleRecord> = chunk.iter().collect();
        let (rgb, depth, _) = collate(&refs)?;
        let logits = model.predict(&rgb, &depth)?;
        for row in logits.data().chunks(k) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| libm::exp(v - m)).collect();
            let z: f64 = exps.iter().sum();
            out.extend(exps.iter().map(|e| e / z));
        }
    }
    Ok(out)
}

pub fn evaluate(model: &GeoRepNet, data: &[SampleRecord], batch_size: usize) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::Usage("evaluation set is empty".into()));
    }
    let k = model.config.num_classes;
    if let Some((i, s)) = data.iter().enumerate().find(|(_, s)| s.label >= k) {
        return Err(Error::Data(format!("sample {i}: label {} outside 0..{k}", s.label)));
    }
    let probs = predict_probabilities(model, data, batch_size)?;
    let labels: Vec<usize> = data.iter().map(|s| s.label).collect();
    MetricsReport::from_probabilities(&probs, &labels, k)
}
