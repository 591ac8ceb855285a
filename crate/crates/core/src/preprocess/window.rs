use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub level: f64,
    pub width: f64,
    pub preset: String,
}

impl WindowConfig {
    pub fn new(level: f64, width: f64) -> Result<Self> {
        if !(width > 0.0) || !level.is_finite() {
            return Err(CoreError::Config(format!("window width must be > 0, got {width}")));
        }
        Ok(Self {
            level,
            width,
            preset: "custom".into(),
        })
    }

    /// Level 400 HU, width 1800 HU.
    pub fn bone() -> Self {
        Self {
            level: 400.0,
            width: 1800.0,
            preset: "bone".into(),
        }
    }

    pub fn soft_tissue() -> Self {
        Self {
            level: 40.0,
            width: 400.0,
            preset: "soft_tissue".into(),
        }
    }

    /// `bone`, `soft_tissue`, or `<level>,<width>`.
    pub fn parse(spec: &str) -> Result<Self> {
        match spec.trim() {
            "bone" => Ok(Self::bone()),
            "soft_tissue" | "soft" => Ok(Self::soft_tissue()),
            s => {
                let (l, w) = s
                    .split_once(',')
                    .ok_or_else(|| CoreError::Config(format!("unknown window `{s}`")))?;
                let num = |v: &str| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| CoreError::Config(format!("bad window value `{v}`")))
                };
                Self::new(num(l)?, num(w)?)
            }
        }
    }

    /// `clip((I − level + width/2) / width, 0, 1)`.
    pub fn apply(&self, hu: f64) -> f64 {
        ((hu - self.level + 0.5 * self.width) / self.width).clamp(0.0, 1.0)
    }
}

pub fn window_normalize(hu: &[f64], w: &WindowConfig) -> Vec<f64> {
    hu.iter().map(|&v| w.apply(v)).collect()
}
