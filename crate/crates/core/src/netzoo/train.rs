//! Softmax cross-entropy training with SGD or Adam.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Result of a training run. On divergence the checkpoint is the last one
/// whose loss was finite and `diverged_at` names the failing step.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Mean loss of every optimizer step, in order.
    pub losses: Vec<f64>,
    pub diverged_at: Option<usize>,
}

/// Row-wise log-softmax of an `N x C` tensor.
pub fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    let [n, c] = matrix_dims(logits, "log_softmax")?;
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(c).take(n) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    Tensor::new(vec![n, c], out)
}

pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    Ok(log_softmax(logits)?.map(f64::exp))
}

fn matrix_dims(t: &Tensor, op: &'static str) -> Result<[usize; 2]> {
    match *t.shape() {
        [n, c] => Ok([n, c]),
        _ => Err(Error::shape(op, "logits", format!("expected N x C, got {:?}", t.shape()))),
    }
}

/// Mean cross-entropy of `N x C` logits against integer labels, and its
/// gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let [n, c] = matrix_dims(logits, "softmax_cross_entropy")?;
    if labels.len() != n {
        return Err(Error::invalid(format!("{n} logit rows but {} labels", labels.len())));
    }
    let logp = log_softmax(logits)?;
    let mut grad = logp.map(f64::exp).into_data();
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::invalid(format!("label {y} out of range for {c} classes")));
        }
        loss -= logp.data()[i * c + y];
        grad[i * c + y] -= 1.0;
    }
    let inv = 1.0 / n as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok((loss * inv, Tensor::new(vec![n, c], grad)?))
}

/// Parameter gradients of a scalar objective whose gradient with respect to
/// the batch logits is produced by `objective`.
pub fn parameter_gradients(
    ck: &Checkpoint,
    batch: &Tensor,
    objective: impl FnOnce(&Tensor) -> Result<(f64, Tensor)>,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let trace = ck.trace_batch(batch)?;
    let (loss, seed) = objective(trace.logits())?;
    let grads = trace.graph.backward(trace.logits, &seed)?;
    let by_name = trace
        .param_nodes
        .iter()
        .map(|(name, &id)| {
            let g = grads.get(id).cloned().expect("parameters are tracked");
            (name.clone(), g)
        })
        .collect();
    Ok((loss, by_name))
}

/// First-order optimizer over named parameters.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter in `grads` that `trainable` accepts.
    pub fn step(
        &mut self,
        ck: &mut Checkpoint,
        grads: &BTreeMap<String, Tensor>,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<()> {
        self.t += 1;
        for (name, g) in grads {
            if !trainable(name) {
                continue;
            }
            let mut p = ck
                .param(name)
                .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter {name}")))?
                .clone();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, &gi) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= self.lr * gi;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                    let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                    let c1 = 1.0 - self.beta1.powi(self.t);
                    let c2 = 1.0 - self.beta2.powi(self.t);
                    for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                        *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                        *w -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                    }
                }
            }
            ck.set_param(name, p)?;
        }
        Ok(())
    }
}

/// Shuffled mini-batch index lists for one epoch.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Trains every parameter except those in `frozen` (batchnorm statistics are
/// always frozen).
pub fn train_classifier_frozen(
    ck: &Checkpoint,
    data: &Dataset,
    cfg: &TrainConfig,
    frozen: &BTreeSet<String>,
) -> Result<TrainOutcome> {
    if data.split != Split::Train {
        return Err(Error::invalid("training requires the train split"));
    }
    if data.classes() != ck.spec().classes {
        return Err(Error::invalid(format!(
            "dataset has {} classes, network {}",
            data.classes(),
            ck.spec().classes
        )));
    }
    if cfg.batch_size == 0 || !cfg.lr.is_finite() || cfg.lr < 0.0 {
        return Err(Error::invalid(format!("bad training config {cfg:?}")));
    }
    let trainable = |name: &str| !frozen.contains(name) && !name.ends_with(".mean") && !name.ends_with(".var");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut current = ck.clone();
    let mut losses = Vec::new();
    for _ in 0..cfg.epochs {
        for idx in epoch_batches(data.len(), cfg.batch_size, &mut rng) {
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels()[i]).collect();
            let (loss, grads) = parameter_gradients(&current, &data.batch_nchw(&idx), |z| {
                softmax_cross_entropy(z, &labels)
            })?;
            if !loss.is_finite() {
                return Ok(TrainOutcome {
                    checkpoint: current,
                    diverged_at: Some(losses.len()),
                    losses,
                });
            }
            let mut next = current.clone();
            opt.step(&mut next, &grads, trainable)?;
            if next.params().values().any(|t| t.data().iter().any(|v| !v.is_finite())) {
                return Ok(TrainOutcome {
                    checkpoint: current,
                    diverged_at: Some(losses.len()),
                    losses,
                });
            }
            losses.push(loss);
            current = next;
        }
    }
    Ok(TrainOutcome {
        checkpoint: current,
        losses,
        diverged_at: None,
    })
}

pub fn train_classifier(ck: &Checkpoint, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_classifier_frozen(ck, data, cfg, &BTreeSet::new())
}
