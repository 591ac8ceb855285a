//! Define-by-run gradient tape.
//!
//! Every operation appends a node holding its forward value; nodes are stored
//! in creation order, which is a topological order of the graph. `backward`
//! walks the nodes once in reverse and accumulates gradients into the leaves
//! that require them.

use std::collections::BTreeMap;

use crate::error::{NeuralError, Result};
use crate::ops::Op;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Node<T: Scalar> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) needs_grad: bool,
}

type GradFilter = Box<dyn Fn(&str) -> bool + Send + Sync>;

pub struct Tape<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
    pub(crate) params: BTreeMap<String, Var>,
    pub(crate) grad_filter: Option<GradFilter>,
    backward_runs: usize,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            params: BTreeMap::new(),
            grad_filter: None,
            backward_runs: 0,
        }
    }

    /// Restrict which trainable parameters receive gradients on this tape.
    pub fn with_grad_filter(mut self, filter: impl Fn(&str) -> bool + Send + Sync + 'static) -> Self {
        self.grad_filter = Some(Box::new(filter));
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.push_with(value, op, needs_grad)
    }

    pub(crate) fn push_with(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Leaf tensor; gradients accumulate on it only if `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_with(value, Op::Leaf, requires_grad)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub(crate) fn next_id(&self) -> usize {
        self.nodes.len()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.leaf_grads.get(v.0)?.as_ref()?;
        Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).ok()
    }

    /// Gradients of all bound parameters that received one.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .filter_map(|(name, &v)| self.grad(v).map(|g| (name.clone(), g)))
            .collect()
    }

    pub fn backward_runs(&self) -> usize {
        self.backward_runs
    }

    /// Reverse pass from `output`, seeded with `seed` (same shape as the output).
    ///
    /// Leaf gradients are additive across calls.
    pub fn backward(&mut self, output: Var, seed: &Tensor<T>) -> Result<()> {
        if output.0 >= self.nodes.len() {
            return Err(NeuralError::State(format!(
                "backward from node {} but the tape only holds {} nodes (forward not run?)",
                output.0,
                self.nodes.len()
            )));
        }
        if seed.shape() != self.nodes[output.0].value.shape() {
            return Err(NeuralError::Invalid(format!(
                "seed shape {:?} does not match output shape {:?}",
                seed.shape(),
                self.nodes[output.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(output.0 + 1);
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(seed.data().to_vec());
        for i in (0..=output.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    slot @ None => *slot = Some(g),
                }
            } else {
                crate::ops::backprop(&self.nodes, i, &g, &mut grads);
            }
        }
        self.backward_runs += 1;
        Ok(())
    }

    /// Backward from a scalar output with seed 1.
    pub fn backward_scalar(&mut self, output: Var) -> Result<()> {
        if self.nodes.get(output.0).map(|n| n.value.numel()) != Some(1) {
            return Err(NeuralError::Invalid(
                "backward_scalar requires a one-element output".into(),
            ));
        }
        let shape = self.nodes[output.0].value.shape().to_vec();
        self.backward(output, &Tensor::ones(shape))
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }
}
