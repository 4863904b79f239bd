//! Mini-batch Adam training with early stopping on validation macro-F1.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{eval_logits, model_hash, prepare_sample};
use super::network::Network;
use super::{Checkpoint, ModelConfig, TrainConfig, ZScore};
use crate::error::{Error, Result};
use crate::metrics::{argmax, macro_f1, ConfusionMatrix};
use crate::nn::{AdamConfig, Array, Graph, Mode, ParamStore};

/// Raw feature matrices `[n_features, frames]` with class indices.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub n_features: usize,
    pub frames: usize,
    pub x: Vec<Vec<f32>>,
    pub y: Vec<usize>,
}

impl Dataset {
    pub fn new(n_features: usize, frames: usize) -> Self {
        Self { n_features, frames, x: Vec::new(), y: Vec::new() }
    }

    pub fn push(&mut self, sample: Vec<f32>, label: usize) -> Result<()> {
        if sample.len() != self.n_features * self.frames {
            return Err(Error::Shape(format!(
                "sample has {} values, dataset is {}x{}",
                sample.len(),
                self.n_features,
                self.frames
            )));
        }
        self.x.push(sample);
        self.y.push(label);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_macro_f1: f64,
    /// Mean cross-entropy on the validation split; breaks macro-F1 ties.
    pub val_loss: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_macro_f1: f64,
    pub stopped_early: bool,
}

impl TrainReport {
    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Batches of the shuffled order; a trailing single sample joins the previous
/// batch because batch norm needs two samples in training mode.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = (start + size).min(order.len());
        if order.len() - end == 1 {
            end += 1;
        }
        out.push(&order[start..end]);
        start = end;
    }
    out
}

fn prepared(ds: &Dataset, model: &ModelConfig, z: &ZScore) -> Result<Vec<Vec<f32>>> {
    ds.x
        .iter()
        .map(|s| {
            let mut v = s.clone();
            prepare_sample(model, z, ds.n_features, &mut v)?;
            Ok(v)
        })
        .collect()
}

fn stack(samples: &[Vec<f32>], idx: &[usize]) -> Vec<f32> {
    let mut out = Vec::with_capacity(idx.len() * samples.first().map_or(0, Vec::len));
    for &i in idx {
        out.extend_from_slice(&samples[i]);
    }
    out
}

/// Validation macro-F1 and mean unweighted cross-entropy.
fn evaluate(
    net: &Network<f32>,
    store: &ParamStore<f32>,
    x: &[Vec<f32>],
    y: &[usize],
    labels: &[String],
    batch: usize,
) -> Result<(f64, f64)> {
    let mut pred = Vec::with_capacity(x.len());
    let mut loss = 0.0;
    let idx: Vec<usize> = (0..x.len()).collect();
    for chunk in idx.chunks(batch) {
        let logits = eval_logits(net, store, stack(x, chunk), chunk.len())?;
        for (z, &i) in logits.iter().zip(chunk) {
            pred.push(argmax(z));
            loss -= crate::fusion::log_posterior(z, 1.0)[y[i]];
        }
    }
    let f1 = macro_f1(&ConfusionMatrix::from_indices(labels.to_vec(), y, &pred)?);
    Ok((f1, loss / x.len() as f64))
}

/// Inverse-frequency weights `N / (C * n_c)`.
pub fn class_weights(y: &[usize], n_classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; n_classes];
    for &c in y {
        *counts
            .get_mut(c)
            .ok_or_else(|| Error::Label(format!("label {c} outside {n_classes} classes")))? += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Data(format!("class {c} has no training samples")));
    }
    let n = y.len() as f64;
    Ok(counts.iter().map(|&k| n / (n_classes as f64 * k as f64)).collect())
}

/// Trains from scratch. The returned checkpoint holds the parameters of the
/// epoch with the best validation macro-F1; among epochs with equal macro-F1
/// the lower validation loss wins. Patience counts epochs without a strict
/// macro-F1 improvement.
pub fn train(
    train_set: &Dataset,
    val_set: &Dataset,
    labels: &[String],
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainReport)> {
    cfg.validate()?;
    if labels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("labels must be sorted and unique".into()));
    }
    if train_set.len() < 2 || val_set.is_empty() {
        return Err(Error::Data(format!(
            "need at least two training and one validation sample, got {} / {}",
            train_set.len(),
            val_set.len()
        )));
    }
    if (train_set.n_features, train_set.frames) != (val_set.n_features, val_set.frames) {
        return Err(Error::Shape("training and validation shapes differ".into()));
    }
    let n_classes = labels.len();
    let weights = class_weights(&train_set.y, n_classes)?;
    if let Some(&bad) = val_set.y.iter().find(|&&c| c >= n_classes) {
        return Err(Error::Label(format!("validation label {bad} outside {n_classes} classes")));
    }
    let weights: Option<Vec<f32>> = model.class_weights.then(|| weights.iter().map(|&w| w as f32).collect());

    // statistics come from the training split only, after masking
    let masked: Vec<Vec<f32>> = {
        let identity = ZScore { mean: vec![0.0; train_set.n_features], std: vec![1.0; train_set.n_features] };
        prepared(train_set, model, &identity)?
    };
    let zscore = ZScore::fit(masked.iter().map(|v| v.as_slice()), train_set.n_features, train_set.frames)?;
    let xs = prepared(train_set, model, &zscore)?;
    let xv = prepared(val_set, model, &zscore)?;

    let net = Network::<f32>::new(model.clone(), train_set.n_features, train_set.frames, n_classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new(cfg.seed);
    net.init_params(&mut store, &mut rng)?;
    let adam = AdamConfig {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.adam_eps,
        weight_decay: model.l2,
    };

    let mut report = TrainReport { epochs: Vec::new(), best_epoch: 0, best_val_macro_f1: f64::NEG_INFINITY, stopped_early: false };
    let mut best_store = store.clone();
    let mut best_loss = f64::INFINITY;
    let mut stale = 0;
    let mut order: Vec<usize> = (0..xs.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        let t0 = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for idx in batches(&order, cfg.batch_size) {
            let mut g = Graph::<f32>::new();
            let bound = store.bind(&mut g);
            let x = g.constant(Array::from_vec(&[idx.len(), net.n_features, net.frames], stack(&xs, idx))?);
            let mut stats = net.running_stats(&store)?;
            let logits = net.forward(&mut g, &bound, x, Mode::Train, &mut rng, &mut stats)?;
            let y: Vec<usize> = idx.iter().map(|&i| train_set.y[i]).collect();
            let loss = g.softmax_cross_entropy(logits, &y, weights.as_deref())?;
            loss_sum += g.value(loss).data()[0] as f64 * idx.len() as f64;
            let mut grads = g.backward(loss)?;
            let collected = store.collect(&bound, &mut grads);
            store.adam_step(&collected, &adam)?;
            net.store_running_stats(&mut store, &stats)?;
        }
        let (val_f1, val_loss) = evaluate(&net, &store, &xv, &val_set.y, labels, cfg.eval_batch_size)?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / xs.len() as f64,
            val_macro_f1: val_f1,
            val_loss,
            seconds: t0.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} val macro-F1 {val_f1:.4} val loss {val_loss:.4} ({:.1}s)",
            rec.train_loss,
            rec.seconds
        );
        report.epochs.push(rec);
        let improved = val_f1 > report.best_val_macro_f1;
        if improved || (val_f1 == report.best_val_macro_f1 && val_loss < best_loss) {
            report.best_val_macro_f1 = val_f1;
            best_loss = val_loss;
            report.best_epoch = epoch;
            best_store = store.clone();
        }
        if improved {
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                report.stopped_early = true;
                break;
            }
        }
    }
    if report.epochs.is_empty() {
        return Err(Error::Config("max_epochs must be at least 1".into()));
    }
    let ckpt = Checkpoint {
        config_hash: model_hash(model)?,
        model: model.clone(),
        labels: labels.to_vec(),
        n_features: train_set.n_features,
        frames: train_set.frames,
        zscore,
        best_val_macro_f1: report.best_val_macro_f1,
        seed: cfg.seed,
        store: best_store,
    };
    Ok((ckpt, report))
}

/// Eval-mode logits for every sample of `ds`, in order.
pub fn predict_logits(ckpt: &Checkpoint, ds: &Dataset, batch: usize) -> Result<Vec<Vec<f64>>> {
    if (ds.n_features, ds.frames) != (ckpt.n_features, ckpt.frames) {
        return Err(Error::Config(format!(
            "dataset is {}x{}, checkpoint expects {}x{}",
            ds.n_features, ds.frames, ckpt.n_features, ckpt.frames
        )));
    }
    let refs: Vec<&[f32]> = ds.x.iter().map(|v| v.as_slice()).collect();
    ckpt.logits(&refs, batch)
}
