//! Named parameter storage shared by model code, optimisers and checkpoints.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{NeuralError, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// A named weight: `f64` master copy plus its trainability flag.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor<f64>,
    pub requires_grad: bool,
    pub grad: Option<Tensor<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<f64>, requires_grad: bool) {
        self.params.insert(
            name.into(),
            Param {
                value,
                requires_grad,
                grad: None,
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| NeuralError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| NeuralError::UnknownParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<f64>> {
        Ok(&self.get(name)?.value)
    }

    pub fn set_value(&mut self, name: &str, value: Tensor<f64>) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.value.shape() != value.shape() {
            return Err(NeuralError::Invalid(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn set_requires_grad(&mut self, name: &str, flag: bool) -> Result<()> {
        self.get_mut(name)?.requires_grad = flag;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Total number of scalar weights.
    pub fn count(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn count_where(&self, pred: impl Fn(&str, &Param) -> bool) -> usize {
        self.params
            .iter()
            .filter(|(n, p)| pred(n, p))
            .map(|(_, p)| p.value.numel())
            .sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.count_where(|_, p| p.requires_grad)
    }

    /// SHA-256 over names and little-endian values of the selected parameters.
    pub fn hash_where(&self, pred: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.params.iter().filter(|(n, _)| pred(n)) {
            h.update(name.as_bytes());
            h.update([0u8]);
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }

    pub fn hash(&self) -> String {
        self.hash_where(|_| true)
    }

    pub fn zero_grads(&mut self) {
        self.params.values_mut().for_each(|p| p.grad = None);
    }

    /// Add gradients (e.g. collected from a tape) into the stored `grad` slots.
    pub fn accumulate_grads<T: Scalar>(&mut self, grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        for (name, g) in grads {
            let p = self.get_mut(name)?;
            if !p.requires_grad {
                continue;
            }
            let g64: Tensor<f64> = g.cast();
            match &mut p.grad {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(g64.data())
                    .for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g64),
            }
        }
        Ok(())
    }
}

/// Fan-in scaled uniform initialiser: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    uniform(shape, bound, rng)
}

pub fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-bound..=bound))
}

impl<T: Scalar> Tape<T> {
    /// Bind a stored parameter as a leaf. Repeated binds return the same node.
    ///
    /// The leaf requires gradients iff the parameter is trainable and passes
    /// the tape's gradient filter.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let p = store.get(name)?;
        let wants = p.requires_grad && self.grad_filter.as_ref().is_none_or(|f| f(name));
        let v = self.leaf(p.value.cast(), wants);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Names of parameters bound so far with the node they map to.
    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(n, &v)| (n.as_str(), v))
    }
}
