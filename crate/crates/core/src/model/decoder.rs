//! Two-way attention mask decoder with hypernetwork mask heads.

use rand_chacha::ChaCha8Rng;
use spine_neural::nn::{multi_head_attention, ConvTranspose2d, LayerNorm, Linear};
use spine_neural::params::uniform;
use spine_neural::{ParamStore, Scalar, Tape, Var};

use super::config::ModelConfig;
use crate::error::{CoreError, Result};

#[derive(Clone, Debug)]
struct CrossAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    norm: LayerNorm,
}

impl CrossAttention {
    fn new(store: &mut ParamStore, name: &str, d: usize, a: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, a, true, true, rng),
            k: Linear::new(store, &format!("{name}.k"), d, a, true, true, rng),
            v: Linear::new(store, &format!("{name}.v"), d, a, true, true, rng),
            out: Linear::new(store, &format!("{name}.out"), a, d, true, true, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), d, true),
        }
    }

    /// `norm(x + out(attn(q(x_q), k(keys), v(values))))`.
    fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore,
        x: Var,
        x_q: Var,
        keys: Var,
        values: Var,
    ) -> Result<Var> {
        let q = self.q.forward(tape, store, x_q)?;
        let k = self.k.forward(tape, store, keys)?;
        let v = self.v.forward(tape, store, values)?;
        let a = multi_head_attention(tape, q, k, v, 1)?;
        let a = self.out.forward(tape, store, a)?;
        let r = tape.add(x, a)?;
        Ok(self.norm.forward(tape, store, r)?)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    cfg: ModelConfig,
    output_tokens: String,
    token_to_image: CrossAttention,
    image_to_token: CrossAttention,
    up1: ConvTranspose2d,
    up2: ConvTranspose2d,
    heads: Vec<Linear>,
    confidence: Linear,
}

/// Mask logits and probabilities `[K, H, W]`, confidences `[K]`.
#[derive(Clone, Copy, Debug)]
pub struct DecoderOut {
    pub logits: Var,
    pub probs: Var,
    pub confidence: Var,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.embed_dim;
        let k = cfg.num_mask_candidates;
        let a = cfg.decoder_attn_dim;
        let c = cfg.upsample_channels;
        let output_tokens = "decoder.output_tokens".to_string();
        store.insert(&output_tokens, uniform(&[1 + k, d], 1.0, rng), true);
        let token_to_image = CrossAttention::new(store, "decoder.token_to_image", d, a, rng);
        let image_to_token = CrossAttention::new(store, "decoder.image_to_token", d, a, rng);
        let up1 = ConvTranspose2d::new(store, "decoder.up1", d, c, 2, true, true, rng);
        let up2 = ConvTranspose2d::new(store, "decoder.up2", c, c, cfg.patch_size / 2, true, true, rng);
        let head_in = c + usize::from(cfg.image_skip);
        let heads = (0..k)
            .map(|i| Linear::new(store, &format!("decoder.mask_head.{i}"), d, head_in, true, true, rng))
            .collect();
        let confidence = Linear::new(store, "decoder.confidence", d, k, true, true, rng);
        Self {
            cfg: cfg.clone(),
            output_tokens,
            token_to_image,
            image_to_token,
            up1,
            up2,
            heads,
            confidence,
        }
    }

    /// `feat: [D, g, g]`, `prompts: [n, D]`, `image_pe: [g², D]`,
    /// `skip: [1, H, W]` (ignored unless the skip channel is enabled).
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore,
        feat: Var,
        prompts: Var,
        image_pe: Var,
        skip: Var,
    ) -> Result<DecoderOut> {
        let (d, g, s) = (self.cfg.embed_dim, self.cfg.grid(), self.cfg.input_size);
        let k = self.cfg.num_mask_candidates;
        if tape.shape(feat) != [d, g, g] {
            return Err(CoreError::Shape(format!(
                "decoder expects features [{d}, {g}, {g}], got {:?}",
                tape.shape(feat)
            )));
        }
        let img = tape.reshape(feat, &[d, g * g])?;
        let img = tape.transpose(img)?;
        let img_keyed = tape.add(img, image_pe)?;

        let out_tokens = tape.param(store, &self.output_tokens)?;
        let tokens = tape.concat(&[out_tokens, prompts], 0)?;

        let keys = tape.concat(&[img_keyed, tokens], 0)?;
        let values = tape.concat(&[img, tokens], 0)?;
        let tokens = self.token_to_image.forward(tape, store, tokens, tokens, keys, values)?;
        let img = self.image_to_token.forward(tape, store, img, img_keyed, tokens, tokens)?;

        let map = tape.transpose(img)?;
        let map = tape.reshape(map, &[d, g, g])?;
        let up = self.up1.forward(tape, store, map)?;
        let up = tape.gelu(up);
        let up = self.up2.forward(tape, store, up)?;
        let up = tape.gelu(up);
        let up = if self.cfg.image_skip { tape.concat(&[up, skip], 0)? } else { up };
        let c = tape.shape(up)[0];
        let up = tape.reshape(up, &[c, s * s])?;

        let mut rows = Vec::with_capacity(k);
        for (i, head) in self.heads.iter().enumerate() {
            let t = tape.narrow(tokens, 0, 1 + i, 1)?;
            let h = head.forward(tape, store, t)?;
            rows.push(tape.matmul(h, up)?);
        }
        let logits = tape.concat(&rows, 0)?;
        let logits = tape.reshape(logits, &[k, s, s])?;
        let probs = tape.sigmoid(logits);

        let conf_token = tape.narrow(tokens, 0, 0, 1)?;
        let conf = self.confidence.forward(tape, store, conf_token)?;
        let conf = tape.sigmoid(conf);
        let confidence = tape.reshape(conf, &[k])?;
        Ok(DecoderOut { logits, probs, confidence })
    }
}
