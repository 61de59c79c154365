//! Accuracy, bias removal and the bias-sensitivity analyses.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, ParamRole};
use super::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const EVAL_CHUNK: usize = 64;

/// Logits for every sample of `data`, `N x C`.
pub fn dataset_logits(ck: &Checkpoint, data: &Dataset) -> Result<Tensor> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let chunks: Vec<Tensor> = idx
        .par_chunks(EVAL_CHUNK)
        .map(|c| ck.forward_batch(&data.batch_nchw(c)))
        .collect::<Result<_>>()?;
    let classes = ck.spec().classes;
    let data: Vec<f64> = chunks.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::new(vec![idx.len(), classes], data)
}

/// Whether `label` is among the `k` largest scores, ties ranked by lower index.
pub fn in_top_k(scores: &[f64], label: usize, k: usize) -> bool {
    let s = scores[label];
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < label))
        .count();
    ahead < k
}

pub fn topk_accuracy(logits: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    let [n, c] = match *logits.shape() {
        [n, c] => [n, c],
        _ => return Err(Error::shape("topk_accuracy", "logits", format!("{:?}", logits.shape()))),
    };
    if k == 0 || k > c {
        return Err(Error::invalid(format!("k = {k} outside 1..={c}")));
    }
    if labels.len() != n || n == 0 {
        return Err(Error::invalid(format!("{n} logit rows but {} labels", labels.len())));
    }
    let hits = logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &y)| in_top_k(row, y, k))
        .count();
    Ok(hits as f64 / n as f64)
}

pub fn evaluate_topk(ck: &Checkpoint, data: &Dataset, k: usize) -> Result<f64> {
    topk_accuracy(&dataset_logits(ck, data)?, data.labels(), k)
}

/// Copy of `ck` with every bias-role parameter (conv/dense bias, batchnorm
/// beta and running mean) set to zero.
pub fn zero_bias(ck: &Checkpoint) -> Checkpoint {
    let mut out = ck.clone();
    for slot in ck.slots() {
        if slot.role.is_bias() {
            out.set_param(&slot.name, Tensor::zeros(&slot.shape))
                .expect("slot shape");
        }
    }
    out
}

/// Whether the checkpoint carries any nonzero bias-role value.
pub fn has_bias(ck: &Checkpoint) -> bool {
    ck.slots().iter().any(|s| {
        s.role.is_bias() && ck.param(&s.name).is_some_and(|t| t.data().iter().any(|&v| v != 0.0))
    })
}

/// Names of every bias-role parameter.
pub fn bias_param_names(ck: &Checkpoint) -> Vec<String> {
    ck.slots()
        .into_iter()
        .filter(|s| s.role.is_bias())
        .map(|s| s.name)
        .collect()
}

pub fn param_role(ck: &Checkpoint, name: &str) -> Option<ParamRole> {
    ck.slots().into_iter().find(|s| s.name == name).map(|s| s.role)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub scales: Vec<f64>,
    pub shifts: Vec<f64>,
    /// `accuracy[i][j]` is top-1 accuracy at `scales[i]`, `shifts[j]`.
    pub accuracy: Vec<Vec<f64>>,
}

/// Top-1 accuracy on inputs transformed as `scale * x + shift`.
pub fn scale_shift_sweep(ck: &Checkpoint, data: &Dataset, scales: &[f64], shifts: &[f64]) -> Result<AccuracyTable> {
    if let Some(s) = scales.iter().find(|&&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::invalid(format!("scale {s} is not positive")));
    }
    let base = dataset_logits(ck, data)?;
    let [n, c] = [data.len(), ck.spec().classes];
    let mut accuracy = Vec::with_capacity(scales.len());
    for &scale in scales {
        let mut row = Vec::with_capacity(shifts.len());
        for &shift in shifts {
            let logits = if scale == 1.0 && shift == 0.0 {
                base.clone()
            } else {
                let idx: Vec<usize> = (0..n).collect();
                let chunks: Vec<Tensor> = idx
                    .par_chunks(EVAL_CHUNK)
                    .map(|ch| ck.forward_batch(&data.batch_nchw(ch).map(|v| scale * v + shift)))
                    .collect::<Result<_>>()?;
                Tensor::new(vec![n, c], chunks.into_iter().flat_map(Tensor::into_data).collect())?
            };
            row.push(topk_accuracy(&logits, data.labels(), 1)?);
        }
        accuracy.push(row);
    }
    Ok(AccuracyTable {
        scales: scales.to_vec(),
        shifts: shifts.to_vec(),
        accuracy,
    })
}

/// Least-squares fit `y = alpha * x + beta`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit {
    pub alpha: f64,
    pub beta: f64,
    pub residual_norm: f64,
}

pub fn fit_output_regression(vanilla: &[f64], zero_bias: &[f64]) -> Result<RegressionFit> {
    if vanilla.len() != zero_bias.len() || vanilla.is_empty() {
        return Err(Error::invalid(format!(
            "regression needs equal non-empty inputs, got {} and {}",
            vanilla.len(),
            zero_bias.len()
        )));
    }
    let n = vanilla.len() as f64;
    let mx = vanilla.iter().sum::<f64>() / n;
    let my = zero_bias.iter().sum::<f64>() / n;
    let sxx: f64 = vanilla.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("vanilla logits have zero variance"));
    }
    let sxy: f64 = vanilla.iter().zip(zero_bias).map(|(x, y)| (x - mx) * (y - my)).sum();
    let alpha = sxy / sxx;
    let beta = my - alpha * mx;
    let residual_norm = vanilla
        .iter()
        .zip(zero_bias)
        .map(|(x, y)| (y - alpha * x - beta).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(RegressionFit {
        alpha,
        beta,
        residual_norm,
    })
}

/// Pearson correlation; `None` if either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.is_empty() {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

/// Per-image comparison of vanilla and zero-bias logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroBiasReport {
    pub mean_correlation: f64,
    pub fits: Vec<RegressionFit>,
    pub vanilla_top1: f64,
    pub zero_bias_top1: f64,
}

pub fn zero_bias_report(ck: &Checkpoint, data: &Dataset) -> Result<ZeroBiasReport> {
    let zb = zero_bias(ck);
    let a = dataset_logits(ck, data)?;
    let b = dataset_logits(&zb, data)?;
    let c = ck.spec().classes;
    let mut corr = Vec::new();
    let mut fits = Vec::new();
    for (x, y) in a.data().chunks(c).zip(b.data().chunks(c)) {
        if let Some(r) = pearson(x, y) {
            corr.push(r);
        }
        if let Ok(f) = fit_output_regression(x, y) {
            fits.push(f);
        }
    }
    if corr.is_empty() {
        return Err(Error::InsufficientData("no image has non-constant logits".into()));
    }
    Ok(ZeroBiasReport {
        mean_correlation: corr.iter().sum::<f64>() / corr.len() as f64,
        fits,
        vanilla_top1: topk_accuracy(&a, data.labels(), 1)?,
        zero_bias_top1: topk_accuracy(&b, data.labels(), 1)?,
    })
}
