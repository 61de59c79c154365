//! Forward evaluation of a checkpoint on the recording graph.

use std::collections::BTreeMap;

use super::checkpoint::{param_name, Checkpoint, ParamRole};
use super::spec::{LayerSpec, Layout};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::ops::BatchNormParams;
use crate::tensor::Tensor;

/// A point in the graph where a per-channel bias is added to the activity.
#[derive(Clone, Debug)]
pub struct BiasSite {
    /// Node whose output includes the bias (conv/dense output or batchnorm output).
    pub node: NodeId,
    /// Per-channel bias added at `node`; the effective bias for batchnorm.
    pub bias: Tensor,
}

#[derive(Clone, Debug)]
pub struct LayerTrace {
    pub index: usize,
    /// Activity `h^l`.
    pub output: NodeId,
    pub bias_sites: Vec<BiasSite>,
    /// Names of the bias-role parameters belonging to this layer.
    pub bias_params: Vec<String>,
}

/// Recorded forward pass with handles to every quantity attribution needs.
#[derive(Debug)]
pub struct ForwardTrace {
    pub graph: Graph,
    pub input: NodeId,
    pub logits: NodeId,
    pub layers: Vec<LayerTrace>,
    pub param_nodes: BTreeMap<String, NodeId>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &Tensor {
        self.graph.value(self.logits)
    }

    pub fn layer(&self, l: usize) -> Option<&LayerTrace> {
        l.checked_sub(1).and_then(|i| self.layers.get(i))
    }
}

/// Converts an `H x W x C` image into a `1 x C x H x W` batch.
pub fn image_to_nchw(image: &Tensor) -> Result<Tensor> {
    let [h, w, c] = match *image.shape() {
        [h, w, c] => [h, w, c],
        _ => {
            return Err(Error::shape(
                "image_to_nchw",
                "image rank",
                format!("expected H x W x C, got {:?}", image.shape()),
            ))
        }
    };
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[(ch * h + y) * w + x] = src[(y * w + x) * c + ch];
            }
        }
    }
    Tensor::new(vec![1, c, h, w], out)
}

/// Inverse of [`image_to_nchw`] for a single-sample batch.
pub fn nchw_to_image(t: &Tensor) -> Result<Tensor> {
    let [c, h, w] = match *t.shape() {
        [1, c, h, w] => [c, h, w],
        _ => {
            return Err(Error::shape(
                "nchw_to_image",
                "batch",
                format!("expected 1 x C x H x W, got {:?}", t.shape()),
            ))
        }
    };
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(y * w + x) * c + ch] = src[(ch * h + y) * w + x];
            }
        }
    }
    Tensor::new(vec![h, w, c], out)
}

struct Builder<'a> {
    ck: &'a Checkpoint,
    graph: Graph,
    param_nodes: BTreeMap<String, NodeId>,
    sites: Vec<BiasSite>,
    bias_params: Vec<String>,
}

impl Builder<'_> {
    fn param(&mut self, path: &[usize], role: ParamRole) -> Result<NodeId> {
        let name = param_name(path, role);
        if let Some(&id) = self.param_nodes.get(&name) {
            return Ok(id);
        }
        let value = self
            .ck
            .param(&name)
            .ok_or_else(|| Error::invalid(format!("checkpoint lacks {name}")))?
            .clone();
        let id = self.graph.tracked_leaf(value);
        if role.is_bias() {
            self.bias_params.push(name.clone());
        }
        self.param_nodes.insert(name, id);
        Ok(id)
    }

    fn op(&mut self, layer: &LayerSpec, path: &[usize], x: NodeId) -> Result<NodeId> {
        Ok(match layer {
            LayerSpec::Conv {
                stride, padding, bias, ..
            } => {
                let k = self.param(path, ParamRole::Weight)?;
                let b = if *bias {
                    Some(self.param(path, ParamRole::Bias)?)
                } else {
                    None
                };
                let out = self.graph.conv2d(x, k, b, *stride, *padding)?;
                if let Some(b) = b {
                    self.site(out, self.graph.value(b).clone());
                }
                out
            }
            LayerSpec::Dense { bias, .. } => {
                let w = self.param(path, ParamRole::Weight)?;
                let b = if *bias {
                    Some(self.param(path, ParamRole::Bias)?)
                } else {
                    None
                };
                let out = self.graph.dense(x, w, b)?;
                if let Some(b) = b {
                    self.site(out, self.graph.value(b).clone());
                }
                out
            }
            LayerSpec::Relu => self.graph.relu(x)?,
            LayerSpec::MaxPool { window, stride } => self.graph.maxpool2d(x, *window, *stride)?,
            LayerSpec::BatchNorm { epsilon } => {
                let stats = [
                    self.param(path, ParamRole::Gamma)?,
                    self.param(path, ParamRole::Beta)?,
                    self.param(path, ParamRole::Mean)?,
                    self.param(path, ParamRole::Var)?,
                ];
                let out = self.graph.batchnorm_frozen(x, stats, *epsilon)?;
                let eff = BatchNormParams {
                    gamma: self.graph.value(stats[0]),
                    beta: self.graph.value(stats[1]),
                    mean: self.graph.value(stats[2]),
                    var: self.graph.value(stats[3]),
                    epsilon: *epsilon,
                }
                .effective_bias()?;
                self.site(out, eff);
                out
            }
            LayerSpec::Flatten => {
                let shape = self.graph.value(x).shape();
                let n = shape[0];
                let k = shape[1..].iter().product();
                self.graph.reshape(x, &[n, k])?
            }
            LayerSpec::Residual { body } => {
                let mut h = x;
                for (j, op) in body.iter().enumerate() {
                    let mut p = path.to_vec();
                    p.push(j);
                    h = self.op(op, &p, h)?;
                }
                self.graph.add(x, h)?
            }
        })
    }

    fn site(&mut self, node: NodeId, bias: Tensor) {
        self.graph.track(node);
        self.sites.push(BiasSite { node, bias });
    }
}

impl Checkpoint {
    pub fn layout(&self) -> Layout {
        self.spec().layout().expect("validated at construction")
    }

    /// Records the forward pass for an `N x C x H x W` batch.
    pub fn trace_batch(&self, batch: &Tensor) -> Result<ForwardTrace> {
        let input = self.spec().input;
        match *batch.shape() {
            [_, c, h, w] if c == input.channels && h == input.height && w == input.width => {}
            _ => {
                return Err(Error::shape(
                    "forward",
                    "input",
                    format!(
                        "expected N x {} x {} x {}, got {:?}",
                        input.channels,
                        input.height,
                        input.width,
                        batch.shape()
                    ),
                ))
            }
        }
        let layout = self.layout();
        let mut b = Builder {
            ck: self,
            graph: Graph::new(),
            param_nodes: BTreeMap::new(),
            sites: Vec::new(),
            bias_params: Vec::new(),
        };
        let input_node = b.graph.tracked_leaf(batch.clone());
        let mut x = input_node;
        let mut layers = Vec::with_capacity(layout.depth());
        let mut next_layer = layout.layers.iter().peekable();
        for (i, op) in self.spec().layers.iter().enumerate() {
            x = b.op(op, &[i], x)?;
            if let Some(l) = next_layer.peek() {
                if i + 1 == l.ops.end {
                    b.graph.track(x);
                    layers.push(LayerTrace {
                        index: l.index,
                        output: x,
                        bias_sites: std::mem::take(&mut b.sites),
                        bias_params: std::mem::take(&mut b.bias_params),
                    });
                    next_layer.next();
                }
            }
        }
        Ok(ForwardTrace {
            graph: b.graph,
            input: input_node,
            logits: x,
            layers,
            param_nodes: b.param_nodes,
        })
    }

    /// Records the forward pass for one `H x W x C` image.
    pub fn trace(&self, image: &Tensor) -> Result<ForwardTrace> {
        self.trace_batch(&image_to_nchw(image)?)
    }

    /// Class scores `f_c` for one `H x W x C` image.
    pub fn forward_logits(&self, image: &Tensor) -> Result<Tensor> {
        let t = self.trace(image)?;
        let c = self.spec().classes;
        t.logits().reshape(&[c])
    }

    /// Logits for a batch, shape `N x C`.
    pub fn forward_batch(&self, batch: &Tensor) -> Result<Tensor> {
        let t = self.trace_batch(batch)?;
        Ok(t.logits().clone())
    }

    pub fn predict(&self, image: &Tensor) -> Result<usize> {
        Ok(self.forward_logits(image)?.argmax())
    }
}
