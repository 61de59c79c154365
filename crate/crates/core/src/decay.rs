//! Gradual bias removal with distillation fine-tuning against the original network.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netzoo::analysis::{dataset_logits, topk_accuracy};
use crate::netzoo::checkpoint::ParamRole;
use crate::netzoo::train::{epoch_batches, log_softmax, parameter_gradients, softmax, Optimizer};
use crate::netzoo::{Checkpoint, Dataset, OptimizerKind, Split};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Exponential,
    #[default]
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecaySchedule {
    #[serde(default)]
    pub kind: ScheduleKind,
    /// Rescale events `K`; the bias scale reaches 0 at the last one.
    #[serde(default = "default_steps")]
    pub decay_steps: usize,
    /// Fine-tuning steps after each rescale.
    #[serde(default = "default_steps")]
    pub train_steps: usize,
    /// Extra fine-tuning steps once the biases are zero.
    #[serde(default)]
    pub post_zero_steps: usize,
    /// Per-rescale factor of the exponential kind.
    #[serde(default = "default_ratio")]
    pub ratio: f64,
}

fn default_steps() -> usize {
    200
}

fn default_ratio() -> f64 {
    0.95
}

impl Default for DecaySchedule {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            decay_steps: default_steps(),
            train_steps: default_steps(),
            post_zero_steps: 0,
            ratio: default_ratio(),
        }
    }
}

impl DecaySchedule {
    pub fn validate(&self) -> Result<()> {
        if self.decay_steps == 0 {
            return Err(Error::invalid("decay needs at least one rescale step"));
        }
        if self.kind == ScheduleKind::Exponential && !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::invalid(format!("exponential ratio {} outside (0, 1)", self.ratio)));
        }
        Ok(())
    }

    /// Bias scale after rescale `k` (`k = 0` is the untouched network).
    pub fn scale(&self, k: usize) -> f64 {
        let total = self.decay_steps;
        if k >= total {
            return 0.0;
        }
        match self.kind {
            ScheduleKind::Linear => 1.0 - k as f64 / total as f64,
            ScheduleKind::Exponential => self.ratio.powi(k as i32),
        }
    }

    pub fn scales(&self) -> Vec<f64> {
        (0..=self.decay_steps).map(|k| self.scale(k)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_temperature() -> f64 {
    100.0
}

fn default_lr() -> f64 {
    5e-6
}

fn default_batch() -> usize {
    64
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            temperature: default_temperature(),
            optimizer: OptimizerKind::Adam,
            lr: default_lr(),
            batch_size: default_batch(),
            seed: 0,
        }
    }
}

fn as_rows(t: &Tensor) -> Result<Tensor> {
    match *t.shape() {
        [c] => t.reshape(&[1, c]),
        [_, _] => Ok(t.clone()),
        _ => Err(Error::shape("distillation_loss", "logits", format!("{:?}", t.shape()))),
    }
}

/// Mean cross-entropy between `softmax(teacher / T)` and `softmax(student / T)`
/// and its gradient with respect to the student logits.
pub fn distillation_loss(student: &Tensor, teacher: &Tensor, temperature: f64) -> Result<(f64, Tensor)> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!("temperature {temperature} must be positive")));
    }
    let (s, t) = (as_rows(student)?, as_rows(teacher)?);
    if s.shape() != t.shape() {
        return Err(Error::shape(
            "distillation_loss",
            "logits",
            format!("student {:?} vs teacher {:?}", s.shape(), t.shape()),
        ));
    }
    let n = s.shape()[0] as f64;
    let log_ps = log_softmax(&s.scale(1.0 / temperature))?;
    let pt = softmax(&t.scale(1.0 / temperature))?;
    let loss = -pt.data().iter().zip(log_ps.data()).map(|(p, lq)| p * lq).sum::<f64>() / n;
    let grad = log_ps
        .map(f64::exp)
        .zip_with(&pt, |ps, p| (ps - p) / (temperature * n))?
        .into_shape(student.shape())?;
    Ok((loss, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub step: usize,
    pub bias_scale: f64,
    /// Distillation loss against the teacher on the evaluation set.
    pub loss: f64,
    pub top1: f64,
}

#[derive(Clone, Debug)]
pub struct DecayOutcome {
    pub checkpoint: Checkpoint,
    pub trajectory: Vec<TrajectoryRow>,
    pub teacher_top1: f64,
    /// Rescale step at which a non-finite loss stopped the run.
    pub diverged_at: Option<usize>,
}

fn set_biases(ck: &mut Checkpoint, originals: &[(String, Tensor)], scale: f64) -> Result<()> {
    for (name, orig) in originals {
        let value = if scale == 0.0 {
            Tensor::zeros(orig.shape())
        } else {
            orig.scale(scale)
        };
        ck.set_param(name, value)?;
    }
    Ok(())
}

/// Scales every bias-role parameter of `student` down to zero following
/// `schedule`; between rescales the weights are fine-tuned to match the
/// teacher's softened outputs on `train`. Biases, batchnorm gamma and
/// variance stay fixed during fine-tuning.
pub fn run_decay(
    student: &Checkpoint,
    teacher: &Checkpoint,
    train: &Dataset,
    eval: &Dataset,
    schedule: &DecaySchedule,
    cfg: &DistillConfig,
) -> Result<DecayOutcome> {
    schedule.validate()?;
    if train.split != Split::Train {
        return Err(Error::invalid("fine-tuning requires the train split"));
    }
    if student.spec() != teacher.spec() {
        return Err(Error::invalid("student and teacher must share a network spec"));
    }
    if cfg.batch_size == 0 || !(cfg.lr >= 0.0) {
        return Err(Error::invalid(format!("bad distillation config {cfg:?}")));
    }
    let slots = student.slots();
    let originals: Vec<(String, Tensor)> = slots
        .iter()
        .filter(|s| s.role.is_bias())
        .map(|s| (s.name.clone(), student.param(&s.name).expect("slot").clone()))
        .collect();
    let weights: Vec<String> = slots
        .iter()
        .filter(|s| s.role == ParamRole::Weight)
        .map(|s| s.name.clone())
        .collect();

    let teacher_train = dataset_logits(teacher, train)?;
    let teacher_eval = dataset_logits(teacher, eval)?;
    let teacher_top1 = topk_accuracy(&teacher_eval, eval.labels(), 1)?;
    let classes = teacher.spec().classes;

    let evaluate = |ck: &Checkpoint| -> Result<(f64, f64)> {
        let z = dataset_logits(ck, eval)?;
        let (loss, _) = distillation_loss(&z, &teacher_eval, cfg.temperature)?;
        Ok((loss, topk_accuracy(&z, eval.labels(), 1)?))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut queue: Vec<Vec<usize>> = Vec::new();
    let mut next_batch = |rng: &mut ChaCha8Rng| {
        if queue.is_empty() {
            queue = epoch_batches(train.len(), cfg.batch_size, rng);
            queue.reverse();
        }
        queue.pop().expect("non-empty dataset")
    };
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut current = student.clone();
    let mut trajectory = Vec::new();
    let (loss, top1) = evaluate(&current)?;
    trajectory.push(TrajectoryRow {
        step: 0,
        bias_scale: 1.0,
        loss,
        top1,
    });

    let phases = (1..=schedule.decay_steps)
        .map(|k| (k, schedule.scale(k), schedule.train_steps))
        .chain((schedule.post_zero_steps > 0).then_some((schedule.decay_steps + 1, 0.0, schedule.post_zero_steps)));
    for (step, scale, steps) in phases {
        set_biases(&mut current, &originals, scale)?;
        for _ in 0..steps {
            let idx = next_batch(&mut rng);
            let target: Vec<f64> = idx
                .iter()
                .flat_map(|&i| teacher_train.data()[i * classes..(i + 1) * classes].iter().copied())
                .collect();
            let target = Tensor::new(vec![idx.len(), classes], target)?;
            let (loss, grads) = parameter_gradients(&current, &train.batch_nchw(&idx), |z| {
                distillation_loss(z, &target, cfg.temperature)
            })?;
            let mut next = current.clone();
            opt.step(&mut next, &grads, |name| weights.iter().any(|w| w == name))?;
            if !loss.is_finite() || next.params().values().any(|t| t.data().iter().any(|v| !v.is_finite())) {
                return Ok(DecayOutcome {
                    checkpoint: current,
                    trajectory,
                    teacher_top1,
                    diverged_at: Some(step),
                });
            }
            current = next;
        }
        let (loss, top1) = evaluate(&current)?;
        trajectory.push(TrajectoryRow {
            step,
            bias_scale: scale,
            loss,
            top1,
        });
    }
    Ok(DecayOutcome {
        checkpoint: current,
        trajectory,
        teacher_top1,
        diverged_at: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    /// Final top-1 over teacher top-1.
    pub fraction: f64,
    /// Lowest top-1 along the trajectory and where it occurred.
    pub worst_top1: f64,
    pub worst_step: usize,
}

pub fn recovery_report(trajectory: &[TrajectoryRow], teacher_top1: f64) -> Result<Recovery> {
    if !(teacher_top1 > 0.0) {
        return Err(Error::invalid("teacher accuracy is zero; recovery is undefined"));
    }
    let last = trajectory.last().ok_or_else(|| Error::InsufficientData("empty trajectory".into()))?;
    let worst = trajectory
        .iter()
        .min_by(|a, b| a.top1.total_cmp(&b.top1))
        .expect("non-empty");
    Ok(Recovery {
        fraction: last.top1 / teacher_top1,
        worst_top1: worst.top1,
        worst_step: worst.step,
    })
}

/// Writes `step, bias_scale, loss, top1`.
pub fn write_trajectory_csv(out: impl Write, rows: &[TrajectoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::invalid(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::invalid(format!("csv: {e}")))
}
