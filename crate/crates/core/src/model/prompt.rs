use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use spine_neural::{ParamStore, Scalar, Tape, Tensor, Var};

use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointLabel {
    Negative,
    Positive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Point {
    pub x: usize,
    pub y: usize,
    pub label: PointLabel,
}

impl Point {
    pub fn positive(x: usize, y: usize) -> Self {
        Self { x, y, label: PointLabel::Positive }
    }

    pub fn negative(x: usize, y: usize) -> Self {
        Self { x, y, label: PointLabel::Negative }
    }
}

/// Box on pixel edges: covers columns `x_min..x_max` and rows `y_min..y_max`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub points: Vec<Point>,
    #[serde(rename = "box")]
    pub bbox: Option<PromptBox>,
    #[serde(default)]
    pub pending_point_budget: usize,
}

impl PromptSet {
    pub fn is_empty(&self) -> bool {
        self.points.is_empty() && self.bbox.is_none()
    }

    pub fn token_count(&self) -> usize {
        if self.is_empty() {
            1
        } else {
            self.points.len() + if self.bbox.is_some() { 2 } else { 0 }
        }
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        for p in &self.points {
            if p.x >= width || p.y >= height {
                return Err(CoreError::OutOfBounds { x: p.x, y: p.y, width, height });
            }
        }
        if let Some(b) = self.bbox {
            for (x, y) in [(b.x_min, b.y_min), (b.x_max, b.y_max)] {
                if x > width || y > height {
                    return Err(CoreError::OutOfBounds { x, y, width, height });
                }
            }
            if b.x_min >= b.x_max || b.y_min >= b.y_max {
                return Err(CoreError::Prompt(format!(
                    "box ({}, {}, {}, {}) must satisfy x_min < x_max and y_min < y_max",
                    b.x_min, b.y_min, b.x_max, b.y_max
                )));
            }
        }
        Ok(())
    }
}

/// Fixed sinusoidal encoding of a normalised coordinate pair into `dim`
/// values: `[sin ωx, cos ωx, sin ωy, cos ωy]` over `dim / 4` log-spaced
/// frequencies from π to `max_freq`·π.
pub fn fourier_features(x: f64, y: f64, dim: usize, max_freq: f64) -> Vec<f64> {
    let nf = dim / 4;
    let freq = |k: usize| {
        if nf == 1 {
            PI
        } else {
            PI * max_freq.powf(k as f64 / (nf - 1) as f64)
        }
    };
    let mut out = Vec::with_capacity(dim);
    for coord in [x, y] {
        out.extend((0..nf).map(|k| (freq(k) * coord).sin()));
        out.extend((0..nf).map(|k| (freq(k) * coord).cos()));
    }
    out
}

/// Encoding of every cell centre of a `grid x grid` token map, `[grid², dim]`.
pub fn dense_pe(grid: usize, dim: usize, max_freq: f64) -> Tensor<f64> {
    let mut data = Vec::with_capacity(grid * grid * dim);
    for i in 0..grid {
        for j in 0..grid {
            let c = (j as f64 + 0.5) / grid as f64;
            let r = (i as f64 + 0.5) / grid as f64;
            data.extend(fourier_features(c, r, dim, max_freq));
        }
    }
    Tensor::new(vec![grid * grid, dim], data).expect("consistent PE shape")
}

#[derive(Clone, Debug)]
pub struct PromptEncoder {
    pub dim: usize,
    pub image_size: usize,
    pub max_freq: f64,
    pub label_embed: String,
    pub corner_embed: String,
    pub no_prompt: String,
}

impl PromptEncoder {
    pub fn new(store: &mut ParamStore, dim: usize, image_size: usize, max_freq: f64, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let init = |rng: &mut rand_chacha::ChaCha8Rng, rows| spine_neural::params::uniform(&[rows, dim], 1.0, rng);
        let label_embed = "prompt.label_embed".to_string();
        let corner_embed = "prompt.corner_embed".to_string();
        let no_prompt = "prompt.no_prompt".to_string();
        store.insert(&label_embed, init(rng, 2), true);
        store.insert(&corner_embed, init(rng, 2), true);
        store.insert(&no_prompt, init(rng, 1), true);
        Self {
            dim,
            image_size,
            max_freq,
            label_embed,
            corner_embed,
            no_prompt,
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        vec![self.label_embed.clone(), self.corner_embed.clone(), self.no_prompt.clone()]
    }

    /// Prompt tokens `[n, dim]`: one per point, two per box, or the single
    /// learned no-prompt token when the set is empty.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore, prompts: &PromptSet) -> Result<Var> {
        let s = self.image_size;
        prompts.validate(s, s)?;
        if prompts.is_empty() {
            return Ok(tape.param(store, &self.no_prompt)?);
        }
        let size = s as f64;
        let mut pe = Vec::new();
        let mut rows = Vec::new();
        let labels = tape.param(store, &self.label_embed)?;
        let corners = tape.param(store, &self.corner_embed)?;
        for p in &prompts.points {
            pe.extend(fourier_features((p.x as f64 + 0.5) / size, (p.y as f64 + 0.5) / size, self.dim, self.max_freq));
            let idx = match p.label {
                PointLabel::Negative => 0,
                PointLabel::Positive => 1,
            };
            rows.push(tape.narrow(labels, 0, idx, 1)?);
        }
        if let Some(b) = prompts.bbox {
            pe.extend(fourier_features(b.x_min as f64 / size, b.y_min as f64 / size, self.dim, self.max_freq));
            pe.extend(fourier_features(b.x_max as f64 / size, b.y_max as f64 / size, self.dim, self.max_freq));
            rows.push(tape.narrow(corners, 0, 0, 1)?);
            rows.push(tape.narrow(corners, 0, 1, 1)?);
        }
        let n = rows.len();
        let learned = tape.concat(&rows, 0)?;
        let pe = tape.constant(Tensor::<f64>::new(vec![n, self.dim], pe)?.cast());
        Ok(tape.add(pe, learned)?)
    }
}
