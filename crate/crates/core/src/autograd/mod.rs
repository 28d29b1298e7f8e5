//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied during one forward pass as a
//! node holding its output value. [`Tape::backward`] walks the nodes in reverse
//! and accumulates gradients into every leaf created with `requires_grad`.
//! Nodes are addressed through the copyable [`Var`] handle.

pub mod kernels;
mod ops;

use crate::error::{contract_err, Error, Result};
use crate::tensor::{Float, Tensor};

pub use kernels::ConvGeom;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// Normalization statistics source for [`Tape::batch_norm`].
#[derive(Clone, Debug)]
pub enum BnMode<'a, T> {
    /// Normalize by batch statistics.
    Train,
    /// Normalize by the given running mean and variance.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Batch statistics produced by a train-mode batch norm, used to update the
/// running estimates. `var` is the unbiased estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Relu(Var),
    Gelu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
        train: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        batch: usize,
        c_out: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    IndexSelect {
        x: Var,
        axis: usize,
        index: Vec<usize>,
    },
    Mean {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    BroadcastTo(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

pub(crate) struct Node<T> {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: Option<Vec<T>>,
    pub(crate) name: &'static str,
}

/// Recorded computation graph for one forward pass.
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a tensor as a graph input. Gradients are tracked when the
    /// tensor has `requires_grad` set.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad: t.requires_grad(),
            grad: None,
            name: "leaf",
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a tensor that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad: false,
            grad: None,
            name: "constant",
        });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.data.clone()).expect("tape node shape is consistent")
    }

    /// Name of the operation that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].name
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub(crate) fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        op: Op<T>,
        inputs: &[Var],
    ) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "{name} produced a non-finite value at flat index {bad} (output shape {shape:?})"
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
            grad: None,
            name,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Propagates gradients from a scalar `loss` to every leaf that requires
    /// them. Leaf gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n = &self.nodes[loss.0];
        if n.data.len() != 1 || !n.shape.iter().all(|&d| d == 1) {
            return Err(contract_err!(
                "backward requires a scalar loss, got shape {:?}",
                n.shape
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.backward_node(i, &g, &mut grads)?;
        }
        Ok(())
    }

    pub(crate) fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(contrib),
        }
    }
}
