use serde::{Deserialize, Serialize};

use crate::adapters::{CbamConfig, LoraTarget};
use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub cbam: CbamConfig,
    pub lora_rank: usize,
    pub lora_scale: f64,
    pub lora_targets: Vec<LoraTarget>,
    pub num_mask_candidates: usize,
    /// Width of the decoder's cross-attention projections.
    pub decoder_attn_dim: usize,
    /// Channels produced by the transposed-convolution upsampler.
    pub upsample_channels: usize,
    /// Append the input intensity as an extra channel before the mask heads.
    pub image_skip: bool,
    /// Highest angular frequency of the prompt positional encoding, in units of π.
    pub pe_max_freq: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self {
            input_size: 64,
            patch_size: 8,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            cbam: CbamConfig::new(64),
            lora_rank: 4,
            lora_scale: 1.0,
            lora_targets: vec![LoraTarget::Q, LoraTarget::V],
            num_mask_candidates: 3,
            decoder_attn_dim: 8,
            upsample_channels: 4,
            image_skip: true,
            pe_max_freq: 64.0,
        }
    }

    /// Full-resolution shape at the toy width.
    pub fn full() -> Self {
        Self {
            input_size: 512,
            ..Self::toy()
        }
    }

    /// A very small configuration for fast gradient checks in tests.
    pub fn tiny() -> Self {
        Self {
            input_size: 16,
            patch_size: 4,
            embed_dim: 16,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            cbam: CbamConfig::new(16),
            lora_rank: 2,
            decoder_attn_dim: 4,
            upsample_channels: 2,
            ..Self::toy()
        }
    }

    pub fn grid(&self) -> usize {
        self.input_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.patch_size < 2 || self.patch_size % 2 != 0 {
            return bad(format!("patch_size must be even and >= 2, got {}", self.patch_size));
        }
        if self.input_size == 0 || self.input_size % self.patch_size != 0 {
            return bad(format!(
                "input_size {} not divisible by patch_size {}",
                self.input_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads));
        }
        if self.embed_dim % 4 != 0 {
            return bad(format!("embed_dim {} must be a multiple of 4", self.embed_dim));
        }
        if self.cbam.channels != self.embed_dim {
            return bad(format!(
                "CBAM channels {} must equal embed_dim {}",
                self.cbam.channels, self.embed_dim
            ));
        }
        if self.num_mask_candidates == 0 || self.depth == 0 || self.mlp_ratio == 0 {
            return bad("depth, mlp_ratio and num_mask_candidates must be positive".into());
        }
        if self.decoder_attn_dim == 0 || self.upsample_channels == 0 {
            return bad("decoder widths must be positive".into());
        }
        if self.lora_rank == 0 || self.lora_rank >= self.embed_dim {
            return bad(format!("lora_rank {} must satisfy 1 <= r < {}", self.lora_rank, self.embed_dim));
        }
        self.cbam.validate()
    }
}
