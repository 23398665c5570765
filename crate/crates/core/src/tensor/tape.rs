use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::dense::Tensor;
use super::ops::Op;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Node<S> {
    pub(crate) value: Tensor<S>,
    pub(crate) op: Op<S>,
    pub(crate) requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Every op appends one node whose inputs were recorded earlier, so the node
/// vector is already in topological order and backward is a single reverse
/// sweep.
pub struct Tape<S> {
    pub(crate) nodes: Vec<Node<S>>,
    strict: bool,
    scope: String,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    /// A tape in strict mode: any non-finite op output is an error.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            strict: true,
            scope: String::new(),
        }
    }

    pub fn set_strict(&mut self, strict: bool) {
        self.strict = strict;
    }

    /// Label attached to numeric errors raised by subsequent ops.
    pub fn set_scope(&mut self, scope: impl Into<String>) {
        self.scope = scope.into();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    pub(crate) fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Result<Var> {
        if self.strict && !value.is_finite() {
            let scope = if self.scope.is_empty() {
                String::new()
            } else {
                format!(" in {}", self.scope)
            };
            return Err(Error::Numeric(format!(
                "non-finite value produced by {}{}",
                op.name(),
                scope
            )));
        }
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse-mode sweep from a single-element `loss`.
    ///
    /// The tape is not consumed, so backward can be replayed; each replay
    /// visits nodes in the same order and produces bitwise-identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![S::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.vjp(Var(idx), &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                if !node.requires_grad {
                    return None;
                }
                let shape = node.value.shape().to_vec();
                Some(match g {
                    Some(data) => Tensor::new(shape, data).expect("gradient shape"),
                    None => Tensor::zeros(&shape),
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    /// Adds `delta` into the gradient slot of `target` if it takes gradients.
    pub(crate) fn accumulate(&self, target: Var, delta: Vec<S>, grads: &mut [Option<Vec<S>>]) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => {
                for (e, d) in existing.iter_mut().zip(delta) {
                    *e = *e + d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
///
/// Every node that requires a gradient has an entry; nodes the loss does not
/// depend on get zeros.
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
