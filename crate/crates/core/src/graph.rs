//! Recording graph for reverse-mode differentiation.
//!
//! Every builder method evaluates its operation immediately and appends a
//! node holding the result, so node inputs always refer to earlier nodes.
//! [`Graph::backward`] walks the nodes in reverse and returns gradients for
//! the tracked nodes.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::ops::{self, BatchNormParams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum OpKind {
    Leaf,
    Conv2d { stride: usize, padding: usize },
    Relu,
    MaxPool2d { window: usize, stride: usize, argmax: Vec<usize> },
    Dense,
    BatchNormFrozen { epsilon: f64 },
    Add,
    Reshape,
    Scale(f64),
}

#[derive(Clone, Debug)]
struct Node {
    op: OpKind,
    inputs: Vec<NodeId>,
    value: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    tracked: BTreeSet<NodeId>,
}

/// Gradients of a scalar seed with respect to tracked nodes.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn into_map(self) -> BTreeMap<NodeId, Tensor> {
        self.grads
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: OpKind, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, inputs, value });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::invalid(format!("node {} does not exist", id.0)))
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn op(&self, id: NodeId) -> &OpKind {
        &self.nodes[id.0].op
    }

    pub fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    /// Marks a node whose gradient should be returned by [`Graph::backward`].
    pub fn track(&mut self, id: NodeId) {
        self.tracked.insert(id);
    }

    pub fn tracked(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.tracked.iter().copied()
    }

    /// All nodes in recording order.
    pub fn ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    /// Input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(OpKind::Leaf, vec![], value)
    }

    /// Leaf that is tracked from the start.
    pub fn tracked_leaf(&mut self, value: Tensor) -> NodeId {
        let id = self.leaf(value);
        self.track(id);
        id
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        self.check(input)?;
        self.check(kernel)?;
        let value = ops::conv2d(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        Ok(self.push(OpKind::Conv2d { stride, padding }, inputs, value))
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        self.check(input)?;
        let value = ops::relu(self.value(input));
        Ok(self.push(OpKind::Relu, vec![input], value))
    }

    pub fn maxpool2d(&mut self, input: NodeId, window: usize, stride: usize) -> Result<NodeId> {
        self.check(input)?;
        let (value, argmax) = ops::maxpool2d(self.value(input), window, stride)?;
        Ok(self.push(OpKind::MaxPool2d { window, stride, argmax }, vec![input], value))
    }

    pub fn dense(&mut self, input: NodeId, weights: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        self.check(input)?;
        self.check(weights)?;
        let value = ops::dense(self.value(input), self.value(weights), bias.map(|b| self.value(b)))?;
        let mut inputs = vec![input, weights];
        inputs.extend(bias);
        Ok(self.push(OpKind::Dense, inputs, value))
    }

    /// Frozen batch normalization; `stats` are `[gamma, beta, mean, var]` nodes.
    pub fn batchnorm_frozen(&mut self, input: NodeId, stats: [NodeId; 4], epsilon: f64) -> Result<NodeId> {
        self.check(input)?;
        let [g, b, m, v] = stats;
        let value = ops::batchnorm_frozen(
            self.value(input),
            BatchNormParams {
                gamma: self.value(g),
                beta: self.value(b),
                mean: self.value(m),
                var: self.value(v),
                epsilon,
            },
        )?;
        Ok(self.push(OpKind::BatchNormFrozen { epsilon }, vec![input, g, b, m, v], value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let value = self.value(a).add(self.value(b)).map_err(|_| {
            Error::shape(
                "add",
                "skip arms",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            )
        })?;
        Ok(self.push(OpKind::Add, vec![a, b], value))
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.check(input)?;
        let value = self.value(input).reshape(shape)?;
        Ok(self.push(OpKind::Reshape, vec![input], value))
    }

    pub fn scale(&mut self, input: NodeId, k: f64) -> Result<NodeId> {
        self.check(input)?;
        let value = self.value(input).scale(k);
        Ok(self.push(OpKind::Scale(k), vec![input], value))
    }

    /// Reverse-mode pass seeded with `seed` (the upstream gradient at `output`).
    pub fn backward(&self, output: NodeId, seed: &Tensor) -> Result<Gradients> {
        self.check(output)?;
        if seed.shape() != self.value(output).shape() {
            return Err(Error::shape(
                "backward",
                "seed",
                format!("expected {:?}, got {:?}", self.value(output).shape(), seed.shape()),
            ));
        }
        let mut acc: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        acc[output.0] = Some(seed.clone());

        for idx in (0..=output.0).rev() {
            let Some(upstream) = acc[idx].take() else { continue };
            let node = &self.nodes[idx];
            let contributions = self.local_backward(node, &upstream)?;
            for (input, grad) in node.inputs.iter().zip(contributions) {
                let Some(grad) = grad else { continue };
                let slot = &mut acc[input.0];
                *slot = Some(match slot.take() {
                    Some(prev) => prev.add(&grad)?,
                    None => grad,
                });
            }
            if self.tracked.contains(&NodeId(idx)) {
                acc[idx] = Some(upstream);
            }
        }

        let grads = self
            .tracked
            .iter()
            .map(|&id| {
                let g = acc
                    .get_mut(id.0)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(self.value(id).shape()));
                (id, g)
            })
            .collect();
        Ok(Gradients { grads })
    }

    /// Backward pass from a single logit `f_c` of a `[C]` or `[1, C]` output.
    pub fn backward_class(&self, output: NodeId, class: usize) -> Result<Gradients> {
        self.check(output)?;
        let shape = self.value(output).shape();
        let classes = *shape.last().expect("rank >= 1");
        if shape.iter().rev().skip(1).any(|&e| e != 1) {
            return Err(Error::invalid(format!(
                "class seed needs a single-sample output, got shape {shape:?}"
            )));
        }
        if class >= classes {
            return Err(Error::invalid(format!("class {class} out of range for {classes} logits")));
        }
        let mut seed = Tensor::zeros(shape);
        seed.data_mut()[class] = 1.0;
        self.backward(output, &seed)
    }

    fn local_backward(&self, node: &Node, up: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let val = |i: usize| self.value(node.inputs[i]);
        Ok(match &node.op {
            OpKind::Leaf => vec![],
            OpKind::Conv2d { stride, padding } => {
                let (gx, gk, gb) = ops::conv2d_backward(val(0), val(1), *stride, *padding, up)?;
                let mut out = vec![Some(gx), Some(gk)];
                if node.inputs.len() > 2 {
                    out.push(Some(gb));
                }
                out
            }
            OpKind::Relu => vec![Some(ops::relu_backward(val(0), up)?)],
            OpKind::MaxPool2d { argmax, .. } => {
                vec![Some(ops::maxpool2d_backward(val(0).shape(), argmax, up)?)]
            }
            OpKind::Dense => {
                let (gx, gw, gb) = ops::dense_backward(val(0), val(1), up)?;
                let mut out = vec![Some(gx), Some(gw)];
                if node.inputs.len() > 2 {
                    out.push(Some(gb));
                }
                out
            }
            OpKind::BatchNormFrozen { epsilon } => {
                let g = ops::batchnorm_frozen_backward(
                    val(0),
                    BatchNormParams {
                        gamma: val(1),
                        beta: val(2),
                        mean: val(3),
                        var: val(4),
                        epsilon: *epsilon,
                    },
                    up,
                )?;
                vec![Some(g.input), Some(g.gamma), Some(g.beta), Some(g.mean), Some(g.var)]
            }
            OpKind::Add => vec![Some(up.clone()), Some(up.clone())],
            OpKind::Reshape => vec![Some(up.reshape(val(0).shape())?)],
            OpKind::Scale(k) => vec![Some(up.scale(*k))],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_of_scaled_input() {
        for (x, expected) in [(3.0, 2.0), (-3.0, 0.0)] {
            let mut g = Graph::new();
            let xi = g.tracked_leaf(Tensor::scalar(x));
            let y = g.scale(xi, 2.0).unwrap();
            let f = g.relu(y).unwrap();
            let grads = g.backward_class(f, 0).unwrap();
            assert_eq!(grads.get(xi).unwrap().data(), &[expected]);
        }
    }

    #[test]
    fn seed_out_of_range_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(g.backward_class(x, 2).is_err());
    }

    #[test]
    fn shared_inputs_accumulate() {
        let mut g = Graph::new();
        let x = g.tracked_leaf(Tensor::from_vec(vec![1.5]));
        let y = g.add(x, x).unwrap();
        let grads = g.backward_class(y, 0).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn untouched_tracked_node_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.tracked_leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let unused = g.tracked_leaf(Tensor::zeros(&[3]));
        let grads = g.backward_class(x, 1).unwrap();
        assert_eq!(grads.get(unused).unwrap().shape(), &[3]);
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0]);
    }
}
