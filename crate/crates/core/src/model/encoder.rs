//! ViT-style image encoder with a convolutional neck and CBAM refinement.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use spine_neural::nn::{multi_head_attention, Conv2d, LayerNorm, Linear};
use spine_neural::{ParamStore, Scalar, Tape, Tensor, Var};

use super::config::ModelConfig;
use crate::adapters::{Cbam, LoraAdapter, LoraTarget};
use crate::error::{CoreError, Result};

/// Copy a single-channel `[H, W]` slice into `[H, W, 3]`; three-channel
/// input is returned unchanged.
pub fn replicate_channels<T: Scalar>(slice: &Tensor<T>) -> Result<Tensor<T>> {
    match *slice.shape() {
        [_, _, 3] => Ok(slice.clone()),
        [h, w] => {
            let mut data = Vec::with_capacity(h * w * 3);
            for &v in slice.data() {
                data.extend([v, v, v]);
            }
            Ok(Tensor::new(vec![h, w, 3], data)?)
        }
        ref s => Err(CoreError::Shape(format!("expected [H, W] or [H, W, 3], got {s:?}"))),
    }
}

/// Split `[H, W, 3]` into row-major patches `[N, 3·p·p]`, channel-major inside.
pub fn patchify<T: Scalar>(image: &Tensor<T>, patch: usize) -> Tensor<T> {
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let (gh, gw) = (h / patch, w / patch);
    let src = image.data();
    let mut out = Vec::with_capacity(h * w * c);
    for pi in 0..gh {
        for pj in 0..gw {
            for ch in 0..c {
                for y in 0..patch {
                    for x in 0..patch {
                        let (r, col) = (pi * patch + y, pj * patch + x);
                        out.push(src[(r * w + col) * c + ch]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, c * patch * patch], out).expect("patch layout")
}

#[derive(Clone, Debug)]
pub enum Projection {
    Plain(Linear),
    Lora(LoraAdapter),
}

impl Projection {
    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore, x: Var, use_lora: bool) -> Result<Var> {
        match self {
            Projection::Plain(l) => Ok(l.forward(tape, store, x)?),
            Projection::Lora(a) if use_lora => a.forward(tape, store, x),
            Projection::Lora(a) => a.base_forward(tape, store, x),
        }
    }

    pub fn adapter(&self) -> Option<&LoraAdapter> {
        match self {
            Projection::Lora(a) => Some(a),
            Projection::Plain(_) => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub q: Projection,
    pub k: Projection,
    pub v: Projection,
    pub proj: Projection,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: ModelConfig,
    pub patch_embed: Linear,
    pub pos_embed: String,
    pub blocks: Vec<Block>,
    pub neck_conv1: Conv2d,
    pub neck_ln1: LayerNorm,
    pub neck_conv2: Conv2d,
    pub neck_ln2: LayerNorm,
    pub cbam: Cbam,
}

/// Encoder output before (`features`) and after (`refined`) CBAM, both `[D, g, g]`.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOut {
    pub features: Var,
    pub refined: Var,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = cfg.embed_dim;
        let p = cfg.patch_size;
        let patch_embed = Linear::new(store, "encoder.patch_embed", 3 * p * p, d, true, false, rng);
        let pos_embed = "encoder.pos_embed".to_string();
        store.insert(&pos_embed, spine_neural::params::uniform(&[cfg.num_patches(), d], 0.02, rng), false);

        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let pre = format!("encoder.blocks.{i}");
            let ln1 = LayerNorm::new(store, &format!("{pre}.ln1"), d, false);
            let mut proj = |key: &str, target: LoraTarget, rng: &mut ChaCha8Rng| -> Result<Projection> {
                let lin = Linear::new(store, &format!("{pre}.attn.{key}"), d, d, true, false, rng);
                if cfg.lora_targets.contains(&target) {
                    let seed = rng.gen();
                    let layer = format!("blocks.{i}.{}", target.key());
                    let adapter =
                        LoraAdapter::wrap(store, &lin.weight, lin.bias.as_deref(), &layer, cfg.lora_rank, cfg.lora_scale, seed)?;
                    Ok(Projection::Lora(adapter))
                } else {
                    Ok(Projection::Plain(lin))
                }
            };
            let q = proj("q", LoraTarget::Q, rng)?;
            let k = proj("k", LoraTarget::K, rng)?;
            let v = proj("v", LoraTarget::V, rng)?;
            let out = proj("proj", LoraTarget::Output, rng)?;
            let ln2 = LayerNorm::new(store, &format!("{pre}.ln2"), d, false);
            let hidden = d * cfg.mlp_ratio;
            let fc1 = Linear::new(store, &format!("{pre}.mlp.fc1"), d, hidden, true, false, rng);
            let fc2 = Linear::new(store, &format!("{pre}.mlp.fc2"), hidden, d, true, false, rng);
            blocks.push(Block { ln1, q, k, v, proj: out, ln2, fc1, fc2 });
        }
        let neck_conv1 = Conv2d::new(store, "encoder.neck.conv1", d, d, 1, false, false, rng);
        let neck_ln1 = LayerNorm::new(store, "encoder.neck.ln1", d, false);
        let neck_conv2 = Conv2d::new(store, "encoder.neck.conv2", d, d, 3, false, false, rng);
        let neck_ln2 = LayerNorm::new(store, "encoder.neck.ln2", d, false);
        let cbam = Cbam::new(store, "cbam", cfg.cbam.clone(), true, rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed,
            pos_embed,
            blocks,
            neck_conv1,
            neck_ln1,
            neck_conv2,
            neck_ln2,
            cbam,
        })
    }

    pub fn adapters(&self) -> impl Iterator<Item = &LoraAdapter> {
        self.blocks
            .iter()
            .flat_map(|b| [&b.q, &b.k, &b.v, &b.proj])
            .filter_map(Projection::adapter)
    }

    /// Encode an `[H, W]` or `[H, W, 3]` image. `use_lora = false` evaluates
    /// the frozen base projections only.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore,
        image: &Tensor<T>,
        use_lora: bool,
    ) -> Result<EncoderOut> {
        let s = self.cfg.input_size;
        if image.shape()[0] != s || image.shape().get(1) != Some(&s) {
            return Err(CoreError::Shape(format!(
                "encoder expects a {s}x{s} image, got {:?}",
                image.shape()
            )));
        }
        let rgb = replicate_channels(image)?;
        let patches = tape.constant(patchify(&rgb, self.cfg.patch_size));
        let x = self.patch_embed.forward(tape, store, patches)?;
        let pos = tape.param(store, &self.pos_embed)?;
        let mut x = tape.add(x, pos)?;
        for b in &self.blocks {
            let h = b.ln1.forward(tape, store, x)?;
            let q = b.q.forward(tape, store, h, use_lora)?;
            let k = b.k.forward(tape, store, h, use_lora)?;
            let v = b.v.forward(tape, store, h, use_lora)?;
            let a = multi_head_attention(tape, q, k, v, self.cfg.heads)?;
            let a = b.proj.forward(tape, store, a, use_lora)?;
            x = tape.add(x, a)?;
            let h = b.ln2.forward(tape, store, x)?;
            let h = b.fc1.forward(tape, store, h)?;
            let h = tape.gelu(h);
            let h = b.fc2.forward(tape, store, h)?;
            x = tape.add(x, h)?;
        }
        let features = self.neck(tape, store, x)?;
        let refined = self.cbam.apply(tape, store, features)?;
        Ok(EncoderOut { features, refined })
    }

    /// Tokens `[g², D]` to a normalised `[D, g, g]` map.
    fn neck<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore, tokens: Var) -> Result<Var> {
        let (d, g) = (self.cfg.embed_dim, self.cfg.grid());
        let to_map = |tape: &mut Tape<T>, t: Var| -> Result<Var> {
            let t = tape.transpose(t)?;
            Ok(tape.reshape(t, &[d, g, g])?)
        };
        let to_tokens = |tape: &mut Tape<T>, m: Var| -> Result<Var> {
            let m = tape.reshape(m, &[d, g * g])?;
            Ok(tape.transpose(m)?)
        };
        let m = to_map(tape, tokens)?;
        let m = self.neck_conv1.forward(tape, store, m)?;
        let t = to_tokens(tape, m)?;
        let t = self.neck_ln1.forward(tape, store, t)?;
        let m = to_map(tape, t)?;
        let m = self.neck_conv2.forward(tape, store, m)?;
        let t = to_tokens(tape, m)?;
        let t = self.neck_ln2.forward(tape, store, t)?;
        to_map(tape, t)
    }
}
