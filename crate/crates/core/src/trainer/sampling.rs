//! Prompt simulation: initial prompts from ground truth and corrective
//! clicks drawn from the current error regions.

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::model::{Point, PromptBox, PromptSet};

/// Binary mask with its grid size; row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(CoreError::Shape(format!(
                "mask of {} values for {width}x{height}",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_f64(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        Self::new(width, height, values.iter().map(|&v| v >= 0.5).collect())
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Tight pixel-edge bounding box of the foreground.
    pub fn bounding_box(&self) -> Option<PromptBox> {
        let mut bb: Option<PromptBox> = None;
        for (i, _) in self.data.iter().enumerate().filter(|(_, &b)| b) {
            let (x, y) = (i % self.width, i / self.width);
            let b = bb.get_or_insert(PromptBox {
                x_min: x,
                y_min: y,
                x_max: x + 1,
                y_max: y + 1,
            });
            b.x_min = b.x_min.min(x);
            b.y_min = b.y_min.min(y);
            b.x_max = b.x_max.max(x + 1);
            b.y_max = b.y_max.max(y + 1);
        }
        bb
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ErrorRegions {
    pub false_negatives: Mask,
    pub false_positives: Mask,
}

impl ErrorRegions {
    pub fn between(pred: &Mask, gt: &Mask) -> Result<Self> {
        if (pred.width, pred.height) != (gt.width, gt.height) {
            return Err(CoreError::Shape("prediction and ground truth sizes differ".into()));
        }
        let fnr = pred.data.iter().zip(&gt.data).map(|(&p, &g)| g && !p).collect();
        let fpr = pred.data.iter().zip(&gt.data).map(|(&p, &g)| p && !g).collect();
        Ok(Self {
            false_negatives: Mask::new(gt.width, gt.height, fnr)?,
            false_positives: Mask::new(gt.width, gt.height, fpr)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PromptSampling {
    pub initial_points: usize,
    pub box_probability: f64,
    /// Edge jitter as a fraction of the box side.
    pub box_jitter: f64,
}

/// Positive points drawn uniformly inside `gt`, plus (with probability
/// `box_probability`) the jittered ground-truth box.
pub fn sample_initial_prompts(gt: &Mask, opts: &PromptSampling, rng: &mut ChaCha8Rng) -> Result<PromptSet> {
    let fg: Vec<usize> = (0..gt.data.len()).filter(|&i| gt.data[i]).collect();
    if fg.is_empty() {
        return Err(CoreError::Empty("ground truth mask has no foreground".into()));
    }
    let n = opts.initial_points.min(fg.len());
    let points = index::sample(rng, fg.len(), n)
        .into_iter()
        .map(|j| Point::positive(fg[j] % gt.width, fg[j] / gt.width))
        .collect();
    let bbox = if rng.gen_bool(opts.box_probability.clamp(0.0, 1.0)) {
        gt.bounding_box().map(|b| jitter_box(b, opts.box_jitter, gt.width, gt.height, rng))
    } else {
        None
    };
    Ok(PromptSet {
        points,
        bbox,
        pending_point_budget: 0,
    })
}

fn jitter_box(b: PromptBox, frac: f64, width: usize, height: usize, rng: &mut ChaCha8Rng) -> PromptBox {
    if frac <= 0.0 {
        return b;
    }
    let mut nudge = |v: usize, side: usize, limit: usize| -> usize {
        let amp = frac * side as f64;
        let d = rng.gen_range(-amp..=amp);
        (v as f64 + d).round().clamp(0.0, limit as f64) as usize
    };
    let (w, h) = (b.x_max - b.x_min, b.y_max - b.y_min);
    let mut out = PromptBox {
        x_min: nudge(b.x_min, w, width),
        y_min: nudge(b.y_min, h, height),
        x_max: nudge(b.x_max, w, width),
        y_max: nudge(b.y_max, h, height),
    };
    if out.x_min >= out.x_max {
        (out.x_min, out.x_max) = (b.x_min, b.x_max);
    }
    if out.y_min >= out.y_max {
        (out.y_min, out.y_max) = (b.y_min, b.y_max);
    }
    out
}

/// Up to `k` corrective clicks drawn uniformly without replacement from
/// `FN ∪ FP`: positive inside false negatives, negative inside false positives.
pub fn resample_from_errors(err: &ErrorRegions, k: usize, rng: &mut ChaCha8Rng) -> Vec<Point> {
    let w = err.false_negatives.width;
    let pool: Vec<(usize, bool)> = (0..err.false_negatives.data.len())
        .filter_map(|i| {
            if err.false_negatives.data[i] {
                Some((i, true))
            } else if err.false_positives.data[i] {
                Some((i, false))
            } else {
                None
            }
        })
        .collect();
    let n = k.min(pool.len());
    index::sample(rng, pool.len(), n)
        .into_iter()
        .map(|j| {
            let (i, positive) = pool[j];
            if positive {
                Point::positive(i % w, i / w)
            } else {
                Point::negative(i % w, i / w)
            }
        })
        .collect()
}
