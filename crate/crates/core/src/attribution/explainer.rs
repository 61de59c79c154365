use super::{AttributionKind, AttributionMap, DecompositionReport, Provenance, SaliencyMap};
use crate::error::{Error, Result};
use crate::graph::{Gradients, NodeId};
use crate::netzoo::network::ForwardTrace;
use crate::netzoo::Checkpoint;
use crate::tensor::Tensor;

/// One forward and one backward pass for `(x, c)`, from which every
/// attribution of that pair is read off.
#[derive(Debug)]
pub struct Explainer {
    trace: ForwardTrace,
    grads: Gradients,
    class: usize,
    input_grid: (usize, usize),
}

/// `1 x C x H x W` or `1 x F` as `C x H x W` (flat layers get a 1x1 grid).
fn as_features(t: &Tensor) -> Result<Tensor> {
    match *t.shape() {
        [1, c, h, w] => t.reshape(&[c, h, w]),
        [1, f] => t.reshape(&[f, 1, 1]),
        _ => Err(Error::shape(
            "attribution",
            "activity",
            format!("expected a single-sample tensor, got {:?}", t.shape()),
        )),
    }
}

impl Explainer {
    /// Traces `image` (`H x W x C`) and backpropagates logit `class`.
    pub fn new(ck: &Checkpoint, image: &Tensor, class: usize) -> Result<Self> {
        let trace = ck.trace(image)?;
        let grads = trace.graph.backward_class(trace.logits, class)?;
        let s = image.shape();
        Ok(Self {
            trace,
            grads,
            class,
            input_grid: (s[0], s[1]),
        })
    }

    /// Explains the predicted class.
    pub fn predicted(ck: &Checkpoint, image: &Tensor) -> Result<Self> {
        let c = ck.predict(image)?;
        Self::new(ck, image, c)
    }

    pub fn class(&self) -> usize {
        self.class
    }

    pub fn depth(&self) -> usize {
        self.trace.layers.len()
    }

    pub fn logits(&self) -> &Tensor {
        self.trace.logits()
    }

    /// `f_c`.
    pub fn logit(&self) -> f64 {
        self.trace.logits().data()[self.class]
    }

    pub fn trace(&self) -> &ForwardTrace {
        &self.trace
    }

    fn grad(&self, id: NodeId) -> &Tensor {
        self.grads.get(id).expect("node is tracked")
    }

    /// `df_c/dx` as `C x H x W`.
    pub fn input_gradient(&self) -> Tensor {
        as_features(self.grad(self.trace.input)).expect("input is a single image")
    }

    /// `sum_phi |df_c/dx_ij,phi|`.
    pub fn gradient_saliency(&self) -> SaliencyMap {
        let g = self.input_gradient().map(f64::abs);
        let map = AttributionMap::from_features(self.class, 0, AttributionKind::Activity, g)
            .expect("feature tensor")
            .values;
        SaliencyMap::new(map, Provenance::new("gradient")).expect("absolute values")
    }

    fn activity_of(&self, node: NodeId, layer: usize) -> Result<AttributionMap> {
        let h = as_features(self.trace.graph.value(node))?;
        let g = as_features(self.grad(node))?;
        let prod = h.zip_with(&g, |a, b| a * b)?;
        AttributionMap::from_features(self.class, layer, AttributionKind::Activity, prod)
    }

    /// `a_ij = sum_phi x_ij,phi df_c/dx_ij,phi`, the layer-0 activity map.
    pub fn gradient_times_input(&self) -> AttributionMap {
        self.activity_of(self.trace.input, 0).expect("input is a single image")
    }

    /// `a^{h,l}_ij = sum_phi h^l_ij,phi df_c/dh^l_ij,phi` for `0 <= l <= L`.
    pub fn activity(&self, l: usize) -> Result<AttributionMap> {
        if l == 0 {
            return Ok(self.gradient_times_input());
        }
        let layer = self.layer(l)?;
        self.activity_of(layer.output, l)
    }

    fn layer(&self, l: usize) -> Result<&crate::netzoo::LayerTrace> {
        self.trace
            .layer(l)
            .ok_or_else(|| Error::invalid(format!("layer {l} outside 0..={}", self.depth())))
    }

    fn layer_grid(&self, l: usize) -> Result<(usize, usize, usize)> {
        let h = as_features(self.trace.graph.value(self.layer(l)?.output))?;
        let s = h.shape();
        Ok((s[0], s[1], s[2]))
    }

    /// `a^{b,l}_ij = sum_phi b_phi df_c/d(bias added at ij, phi)`, summed over
    /// every bias site of layer `l`. A layer without biases gives a zero map
    /// with a warning.
    pub fn bias(&self, l: usize) -> Result<AttributionMap> {
        if l == 0 {
            return Err(Error::invalid("the input layer has no biases"));
        }
        let layer = self.layer(l)?;
        let sites = &layer.bias_sites;
        let (_, h, w) = self.layer_grid(l)?;
        if sites.is_empty() {
            let mut m =
                AttributionMap::from_features(self.class, l, AttributionKind::Bias, Tensor::zeros(&[1, h, w]))?;
            m.warning = Some(format!("layer {l} has no bias parameters"));
            return Ok(m);
        }
        // every (site, channel) pair is its own feature
        let mut stacked = Vec::new();
        let mut count = 0;
        for site in sites {
            let g = as_features(self.grad(site.node))?;
            let (f, sh, sw) = (g.shape()[0], g.shape()[1], g.shape()[2]);
            if (sh, sw) != (h, w) || site.bias.len() != f {
                return Err(Error::shape(
                    "bias_attribution",
                    format!("layer {l} bias site"),
                    format!("site grid {f}x{sh}x{sw} does not match layer grid {h}x{w}"),
                ));
            }
            for (phi, chunk) in g.data().chunks(h * w).enumerate() {
                let b = site.bias.data()[phi];
                stacked.extend(chunk.iter().map(|v| v * b));
            }
            count += f;
        }
        let features = Tensor::new(vec![count, h, w], stacked)?;
        let mut m = AttributionMap::from_features(self.class, l, AttributionKind::Bias, features)?;
        if sites.iter().all(|s| s.bias.data().iter().all(|&b| b == 0.0)) {
            m.warning = Some(format!("layer {l} biases are all zero"));
        }
        Ok(m)
    }

    /// Parameter view of `A^{b,l}`: each bias-role parameter once, times its
    /// total gradient.
    pub fn bias_parameter_sum(&self, l: usize) -> Result<f64> {
        if l == 0 {
            return Ok(0.0);
        }
        let layer = self.layer(l)?;
        let mut total = 0.0;
        for name in &layer.bias_params {
            let id = self.trace.param_nodes[name];
            let v = self.trace.graph.value(id);
            total += v.data().iter().zip(self.grad(id).data()).map(|(a, b)| a * b).sum::<f64>();
        }
        Ok(total)
    }

    /// `sum_phi h^l_ij,phi * sum_ij df_c/dh^l_ij,phi`, optionally rectified.
    pub fn gradcam(&self, l: usize, rectified: bool) -> Result<AttributionMap> {
        if l == 0 {
            return Err(Error::invalid("gradcam needs a hidden layer"));
        }
        let node = self.layer(l)?.output;
        if self.trace.graph.value(node).rank() != 4 {
            return Err(Error::invalid(format!("layer {l} is not spatial")));
        }
        let h = as_features(self.trace.graph.value(node))?;
        let g = as_features(self.grad(node))?;
        let (f, n) = (h.shape()[0], h.shape()[1] * h.shape()[2]);
        let mut prod = h.into_data();
        for phi in 0..f {
            let weight: f64 = g.data()[phi * n..(phi + 1) * n].iter().sum();
            prod[phi * n..(phi + 1) * n].iter_mut().for_each(|v| *v *= weight);
        }
        let features = Tensor::new(g.shape().to_vec(), prod)?;
        let mut m = AttributionMap::from_features(self.class, l, AttributionKind::GradCam, features)?;
        if rectified {
            m.values = m.values.map(|v| v.max(0.0));
        }
        Ok(m)
    }

    pub fn decomposition(&self) -> Result<DecompositionReport> {
        let depth = self.depth();
        let logit = self.logit();
        let mut activity_sums = Vec::with_capacity(depth + 1);
        let mut bias_sums = vec![0.0];
        let mut bias_param_sums = vec![0.0];
        for l in 0..=depth {
            activity_sums.push(self.activity(l)?.total());
            if l > 0 {
                bias_sums.push(self.bias(l)?.total());
                bias_param_sums.push(self.bias_parameter_sum(l)?);
            }
        }
        let residuals = (0..=depth)
            .map(|l| {
                let above: f64 = bias_sums[l + 1..].iter().sum();
                (logit - (activity_sums[l] + above)).abs()
            })
            .collect();
        Ok(DecompositionReport {
            class: self.class,
            logit,
            activity_sums,
            bias_sums,
            bias_param_sums,
            residuals,
        })
    }

    pub fn input_grid(&self) -> (usize, usize) {
        self.input_grid
    }
}

pub fn gradient_saliency(ck: &Checkpoint, x: &Tensor, c: usize) -> Result<SaliencyMap> {
    Ok(Explainer::new(ck, x, c)?.gradient_saliency())
}

pub fn gradient_times_input(ck: &Checkpoint, x: &Tensor, c: usize) -> Result<AttributionMap> {
    Ok(Explainer::new(ck, x, c)?.gradient_times_input())
}

pub fn activity_attribution(ck: &Checkpoint, x: &Tensor, c: usize, l: usize) -> Result<AttributionMap> {
    Explainer::new(ck, x, c)?.activity(l)
}

pub fn bias_attribution(ck: &Checkpoint, x: &Tensor, c: usize, l: usize) -> Result<AttributionMap> {
    Explainer::new(ck, x, c)?.bias(l)
}

pub fn gradcam_attribution(ck: &Checkpoint, x: &Tensor, c: usize, l: usize, rectified: bool) -> Result<AttributionMap> {
    Explainer::new(ck, x, c)?.gradcam(l, rectified)
}

pub fn decomposition_report(ck: &Checkpoint, x: &Tensor, c: usize) -> Result<DecompositionReport> {
    Explainer::new(ck, x, c)?.decomposition()
}
