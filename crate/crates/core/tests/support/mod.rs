//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use attrib_core::graph::{Graph, OpKind};
use attrib_core::netzoo::train::parameter_gradients;
use attrib_core::netzoo::{image_to_nchw, Checkpoint};
use attrib_core::{Explainer, Tensor};
use rand::seq::index::sample;
use rand::Rng;

pub const FD_STEP: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
pub const FD_FLOOR: f64 = 1e-3;

#[derive(Debug, Default, Clone, Copy)]
pub struct FdStats {
    pub checked: usize,
    /// Coordinates whose central difference straddles a ReLU or max-pool switch.
    pub skipped: usize,
    pub max_rel: f64,
}

impl FdStats {
    pub fn merge(&mut self, o: FdStats) {
        self.checked += o.checked;
        self.skipped += o.skipped;
        self.max_rel = self.max_rel.max(o.max_rel);
    }
}

/// Signs of every ReLU input and every max-pool selection.
fn activation_pattern(g: &Graph) -> Vec<usize> {
    let mut out = Vec::new();
    for id in g.ids() {
        match g.op(id) {
            OpKind::Relu => {
                let x = g.value(g.inputs(id)[0]);
                out.extend(x.data().iter().map(|&v| usize::from(v > 0.0)));
            }
            OpKind::MaxPool2d { argmax, .. } => out.extend_from_slice(argmax),
            _ => {}
        }
    }
    out
}

fn logit_and_pattern(ck: &Checkpoint, x: &Tensor, class: usize) -> (f64, Vec<usize>) {
    let t = ck.trace(x).unwrap();
    (t.logits().data()[class], activation_pattern(&t.graph))
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Compares backprop gradients of logit `class` against central differences,
/// for `per_tensor` random coordinates of the input and of every parameter.
pub fn finite_difference_check(
    ck: &Checkpoint,
    x: &Tensor,
    class: usize,
    per_tensor: usize,
    rng: &mut impl Rng,
) -> FdStats {
    let mut stats = FdStats::default();
    let (_, base) = logit_and_pattern(ck, x, class);
    let mut probe = |plus: (f64, Vec<usize>), minus: (f64, Vec<usize>), analytic: f64| {
        if plus.1 != base || minus.1 != base {
            stats.skipped += 1;
            return;
        }
        let numeric = (plus.0 - minus.0) / (2.0 * FD_STEP);
        stats.checked += 1;
        stats.max_rel = stats.max_rel.max(rel_err(analytic, numeric));
    };

    // input, analytic gradient laid out C x H x W
    let gx = Explainer::new(ck, x, class).unwrap().input_gradient();
    let [h, w, c] = [x.shape()[0], x.shape()[1], x.shape()[2]];
    for flat in sample(rng, x.len(), per_tensor.min(x.len())) {
        let (i, j, ch) = (flat / (w * c), (flat / c) % w, flat % c);
        let mut xp = x.clone();
        xp.data_mut()[flat] += FD_STEP;
        let mut xm = x.clone();
        xm.data_mut()[flat] -= FD_STEP;
        let analytic = gx.data()[ch * h * w + i * w + j];
        probe(logit_and_pattern(ck, &xp, class), logit_and_pattern(ck, &xm, class), analytic);
    }

    let batch = image_to_nchw(x).unwrap();
    let (_, grads) = parameter_gradients(ck, &batch, |z| {
        let mut seed = Tensor::zeros(z.shape());
        seed.data_mut()[class] = 1.0;
        Ok((z.data()[class], seed))
    })
    .unwrap();
    for (name, g) in &grads {
        let value = ck.param(name).unwrap();
        for k in sample(rng, value.len(), per_tensor.min(value.len())) {
            let shifted = |d: f64| {
                let mut p = value.clone();
                p.data_mut()[k] += d;
                let mut ck2 = ck.clone();
                ck2.set_param(name, p).unwrap();
                logit_and_pattern(&ck2, x, class)
            };
            probe(shifted(FD_STEP), shifted(-FD_STEP), g.data()[k]);
        }
    }
    stats
}

/// Dense layer `y = W x + b` with `W` stored output-major.
pub fn affine(w: &Tensor, b: Option<&Tensor>, x: &[f64]) -> Vec<f64> {
    let k = x.len();
    (0..w.shape()[0])
        .map(|o| {
            let row = &w.data()[o * k..(o + 1) * k];
            row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b.map_or(0.0, |b| b.data()[o])
        })
        .collect()
}

/// `d f_c / d h^l` for a three-dense-layer ReLU MLP (`weights[l]` maps layer
/// `l` to `l + 1`), as sums over every path from unit `j` of layer `l` to the
/// output `c` of the product of weights along the path, with paths through
/// inactive units dropped.
pub fn path_enumeration_gradient(weights: &[Tensor; 3], active: &[Vec<bool>; 2], class: usize, l: usize) -> Vec<f64> {
    let width = |t: &Tensor| t.shape()[1];
    let w = |m: usize, o: usize, i: usize| weights[m].data()[o * width(&weights[m]) + i];
    match l {
        0 => (0..width(&weights[0]))
            .map(|i| {
                let mut s = 0.0;
                for j in 0..weights[0].shape()[0] {
                    for k in 0..weights[1].shape()[0] {
                        if active[0][j] && active[1][k] {
                            s += w(0, j, i) * w(1, k, j) * w(2, class, k);
                        }
                    }
                }
                s
            })
            .collect(),
        1 => (0..width(&weights[1]))
            .map(|j| {
                let mut s = 0.0;
                for k in 0..weights[1].shape()[0] {
                    if active[1][k] {
                        s += w(1, k, j) * w(2, class, k);
                    }
                }
                s
            })
            .collect(),
        2 => (0..width(&weights[2])).map(|k| w(2, class, k)).collect(),
        3 => (0..weights[2].shape()[0]).map(|o| f64::from(u8::from(o == class))).collect(),
        _ => panic!("layer {l} outside the MLP"),
    }
}

/// Two-sided signed-rank p-value by enumerating all `2^n` sign assignments
/// of the (average) ranks of `|d|`.
pub fn brute_force_signed_rank_p(d: &[f64]) -> f64 {
    let nz: Vec<f64> = d.iter().copied().filter(|v| *v != 0.0).collect();
    let n = nz.len();
    assert!(n <= 20);
    let abs: Vec<f64> = nz.iter().map(|v| v.abs()).collect();
    let ranks: Vec<f64> = abs
        .iter()
        .map(|&a| {
            let less = abs.iter().filter(|&&b| b < a).count() as f64;
            let equal = abs.iter().filter(|&&b| b == a).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect();
    let w_plus: f64 = nz.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let total: f64 = ranks.iter().sum();
    let w = w_plus.min(total - w_plus);
    let mut hits = 0u64;
    for mask in 0u64..(1 << n) {
        let s: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if s <= w + 1e-9 {
            hits += 1;
        }
    }
    (2.0 * hits as f64 / (1u64 << n) as f64).min(1.0)
}
