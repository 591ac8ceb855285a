//! Parameterised layers built from tape primitives.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{fan_in_uniform, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `y = x·Wᵀ + b` with `W: [out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        trainable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = format!("{name}.weight");
        store.insert(&weight, fan_in_uniform(&[out_dim, in_dim], in_dim, rng), trainable);
        let bias = bias.then(|| {
            let b = format!("{name}.bias");
            store.insert(&b, Tensor::zeros(vec![out_dim]), trainable);
            b
        });
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, &self.weight)?;
        let y = tape.matmul_t(x, w)?;
        match &self.bias {
            Some(b) => {
                let b = tape.param(store, b)?;
                tape.add(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        std::iter::once(self.weight.clone()).chain(self.bias.clone()).collect()
    }
}

/// Same-padded stride-1 convolution over `[c, h, w]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: String,
    pub bias: Option<String>,
    pub kernel: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        bias: bool,
        trainable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = format!("{name}.weight");
        let fan_in = c_in * kernel * kernel;
        store.insert(&weight, fan_in_uniform(&[c_out, c_in, kernel, kernel], fan_in, rng), trainable);
        let bias = bias.then(|| {
            let b = format!("{name}.bias");
            store.insert(&b, Tensor::zeros(vec![c_out]), trainable);
            b
        });
        Self { weight, bias, kernel }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, &self.weight)?;
        let b = self.bias.as_ref().map(|b| tape.param(store, b)).transpose()?;
        tape.conv2d(x, w, b)
    }
}

/// Non-overlapping transposed convolution (kernel = stride).
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: String,
    pub bias: Option<String>,
    pub stride: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        bias: bool,
        trainable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = format!("{name}.weight");
        store.insert(&weight, fan_in_uniform(&[c_in, c_out, stride, stride], c_in, rng), trainable);
        let bias = bias.then(|| {
            let b = format!("{name}.bias");
            store.insert(&b, Tensor::zeros(vec![c_out]), trainable);
            b
        });
        Self { weight, bias, stride }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, &self.weight)?;
        let b = self.bias.as_ref().map(|b| tape.param(store, b)).transpose()?;
        tape.conv_transpose2d(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, trainable: bool) -> Self {
        let gamma = format!("{name}.gamma");
        let beta = format!("{name}.beta");
        store.insert(&gamma, Tensor::ones(vec![dim]), trainable);
        store.insert(&beta, Tensor::zeros(vec![dim]), trainable);
        Self {
            gamma,
            beta,
            eps: 1e-5,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, &self.gamma)?;
        let b = tape.param(store, &self.beta)?;
        tape.layer_norm(x, Some(g), Some(b), self.eps)
    }
}

/// Scaled dot-product attention over already projected `q: [n, d]`,
/// `k: [m, d]`, `v: [m, d]`, split into `heads` heads of width `d / heads`.
pub fn multi_head_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<Var> {
    let (n, d) = (tape.shape(q)[0], tape.shape(q)[1]);
    let m = tape.shape(k)[0];
    let dh = d / heads;
    let split = |tape: &mut Tape<T>, x: Var, rows: usize| -> Result<Var> {
        let r = tape.reshape(x, &[rows, heads, dh])?;
        tape.permute(r, &[1, 0, 2])
    };
    let (qh, kh, vh) = (split(tape, q, n)?, split(tape, k, m)?, split(tape, v, m)?);
    let scores = tape.matmul_t(qh, kh)?;
    let scores = tape.scale(scores, T::of(1.0 / (dh as f64).sqrt()));
    let attn = tape.softmax(scores);
    let out = tape.matmul(attn, vh)?;
    let out = tape.permute(out, &[1, 0, 2])?;
    tape.reshape(out, &[n, d])
}
