//! Low-rank adaptation of a frozen projection `W: [d_out, d_in]`.
//!
//! The adapted map is `W' = W + scale·A·B` with `A: [d_out, r]` drawn from
//! seeded fan-in noise and `B: [r, d_in]` starting at zero, so a freshly
//! wrapped layer computes exactly the base function.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use spine_neural::params::fan_in_uniform;
use spine_neural::{ParamStore, Scalar, Tape, Tensor, Var};

use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoraTarget {
    Q,
    K,
    V,
    Output,
}

impl LoraTarget {
    pub fn key(self) -> &'static str {
        match self {
            LoraTarget::Q => "q",
            LoraTarget::K => "k",
            LoraTarget::V => "v",
            LoraTarget::Output => "proj",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub base_weight: String,
    pub base_bias: Option<String>,
    pub a: String,
    pub b: String,
    pub rank: usize,
    pub scale: f64,
    pub d_out: usize,
    pub d_in: usize,
}

impl LoraAdapter {
    /// Freeze the base projection `base` (with optional bias) and register
    /// `lora.<layer>.A` / `lora.<layer>.B` beside it.
    pub fn wrap(
        store: &mut ParamStore,
        base: &str,
        base_bias: Option<&str>,
        layer: &str,
        rank: usize,
        scale: f64,
        seed: u64,
    ) -> Result<Self> {
        let shape = store.value(base)?.shape().to_vec();
        let [d_out, d_in] = shape[..] else {
            return Err(CoreError::Shape(format!("LoRA base `{base}` must be 2-D, got {shape:?}")));
        };
        if rank == 0 || rank >= d_out.min(d_in) {
            return Err(CoreError::Config(format!(
                "LoRA rank {rank} must satisfy 1 <= r < {}",
                d_out.min(d_in)
            )));
        }
        store.set_requires_grad(base, false)?;
        if let Some(b) = base_bias {
            store.set_requires_grad(b, false)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = format!("lora.{layer}.A");
        let b = format!("lora.{layer}.B");
        store.insert(&a, fan_in_uniform(&[d_out, rank], rank, &mut rng), true);
        store.insert(&b, Tensor::zeros(vec![rank, d_in]), true);
        Ok(Self {
            base_weight: base.to_string(),
            base_bias: base_bias.map(str::to_string),
            a,
            b,
            rank,
            scale,
            d_out,
            d_in,
        })
    }

    pub fn trainable_count(&self) -> usize {
        self.d_out * self.rank + self.rank * self.d_in
    }

    /// `y = x·Wᵀ + bias + scale·(x·Bᵀ)·Aᵀ` for `x: [n, d_in]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.base_forward(tape, store, x)?;
        let a = tape.param(store, &self.a)?;
        let b = tape.param(store, &self.b)?;
        let low = tape.matmul_t(x, b)?;
        let delta = tape.matmul_t(low, a)?;
        let delta = tape.scale(delta, T::of(self.scale));
        Ok(tape.add(y, delta)?)
    }

    /// The frozen projection alone.
    pub fn base_forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, &self.base_weight)?;
        let y = tape.matmul_t(x, w)?;
        match &self.base_bias {
            Some(b) => {
                let b = tape.param(store, b)?;
                Ok(tape.add(y, b)?)
            }
            None => Ok(y),
        }
    }

    /// `W + scale·A·B`; leaves the store untouched.
    pub fn merge(&self, store: &ParamStore) -> Result<Tensor<f64>> {
        let w = store.value(&self.base_weight)?;
        let a = store.value(&self.a)?.data();
        let b = store.value(&self.b)?.data();
        let (r, d_in) = (self.rank, self.d_in);
        let mut out = w.clone();
        for (i, row) in out.data_mut().chunks_mut(d_in).enumerate() {
            for k in 0..r {
                let aik = self.scale * a[i * r + k];
                for (j, o) in row.iter_mut().enumerate() {
                    *o += aik * b[k * d_in + j];
                }
            }
        }
        Ok(out)
    }
}
