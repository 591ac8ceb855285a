//! Convolutional block attention: a channel gate followed by a spatial gate,
//! both applied multiplicatively to a `[C, H, W]` feature map.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use spine_neural::nn::{Conv2d, Linear};
use spine_neural::{ParamStore, Scalar, Tape, Var};

use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CbamConfig {
    pub channels: usize,
    #[serde(default = "default_ratio")]
    pub mlp_reduction_ratio: usize,
    #[serde(default = "default_kernel")]
    pub spatial_kernel: usize,
}

fn default_ratio() -> usize {
    16
}

fn default_kernel() -> usize {
    7
}

impl CbamConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            mlp_reduction_ratio: default_ratio(),
            spatial_kernel: default_kernel(),
        }
    }

    /// Reduction ratio actually used; clamps to `C` for narrow maps.
    pub fn effective_ratio(&self) -> usize {
        self.mlp_reduction_ratio.min(self.channels)
    }

    pub fn hidden(&self) -> usize {
        self.channels / self.effective_ratio()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.mlp_reduction_ratio == 0 {
            return Err(CoreError::Config("CBAM channels and reduction ratio must be positive".into()));
        }
        if self.channels % self.effective_ratio() != 0 {
            return Err(CoreError::Config(format!(
                "CBAM channels {} not divisible by reduction ratio {}",
                self.channels,
                self.effective_ratio()
            )));
        }
        if self.spatial_kernel != 7 {
            return Err(CoreError::Config(format!(
                "CBAM spatial kernel must be 7, got {}",
                self.spatial_kernel
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Cbam {
    pub cfg: CbamConfig,
    pub fc1: Linear,
    pub fc2: Linear,
    pub spatial: Conv2d,
}

impl Cbam {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: CbamConfig,
        trainable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let h = cfg.hidden();
        let fc1 = Linear::new(store, &format!("{prefix}.mlp.fc1"), c, h, true, trainable, rng);
        let fc2 = Linear::new(store, &format!("{prefix}.mlp.fc2"), h, c, true, trainable, rng);
        let spatial = Conv2d::new(store, &format!("{prefix}.spatial"), 2, 1, cfg.spatial_kernel, true, trainable, rng);
        Ok(Self { cfg, fc1, fc2, spatial })
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = self.fc1.param_names();
        names.extend(self.fc2.param_names());
        names.push(self.spatial.weight.clone());
        names.extend(self.spatial.bias.clone());
        names
    }

    fn check<T: Scalar>(&self, tape: &Tape<T>, f: Var) -> Result<(usize, usize, usize)> {
        match *tape.shape(f) {
            [c, h, w] if c == self.cfg.channels => Ok((c, h, w)),
            ref s => Err(CoreError::Shape(format!(
                "CBAM expects [{}, H, W], got {s:?}",
                self.cfg.channels
            ))),
        }
    }

    /// `σ(MLP(GP(F)) + MLP(MP(F)))`, shape `[C, 1, 1]`.
    pub fn channel_attention<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore, f: Var) -> Result<Var> {
        let (c, h, w) = self.check(tape, f)?;
        let flat = tape.reshape(f, &[c, h * w])?;
        let gp = tape.mean_axis(flat, 1)?;
        let mp = tape.max_axis(flat, 1)?;
        let pooled = tape.concat(&[gp, mp], 1)?;
        let pooled = tape.transpose(pooled)?;
        let hidden = self.fc1.forward(tape, store, pooled)?;
        let hidden = tape.relu(hidden);
        let out = self.fc2.forward(tape, store, hidden)?;
        let summed = tape.sum_axis(out, 0)?;
        let gate = tape.sigmoid(summed);
        Ok(tape.reshape(gate, &[c, 1, 1])?)
    }

    /// `σ(Conv7x7([AP_C(F); MP_C(F)]))`, shape `[1, H, W]`.
    pub fn spatial_attention<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore, f: Var) -> Result<Var> {
        let (_, h, w) = self.check(tape, f)?;
        let ap = tape.mean_axis(f, 0)?;
        let mp = tape.max_axis(f, 0)?;
        let stacked = tape.concat(&[ap, mp], 0)?;
        let logits = self.spatial.forward(tape, store, stacked)?;
        debug_assert_eq!(tape.shape(logits), &[1, h, w]);
        Ok(tape.sigmoid(logits))
    }

    /// `F' = Ms(F₁) ⊙ F₁` with `F₁ = Mc(F) ⊙ F`.
    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore, f: Var) -> Result<Var> {
        let mc = self.channel_attention(tape, store, f)?;
        let f1 = tape.mul(f, mc)?;
        let ms = self.spatial_attention(tape, store, f1)?;
        Ok(tape.mul(f1, ms)?)
    }
}
