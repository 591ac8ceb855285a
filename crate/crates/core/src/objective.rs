//! Focal + Dice objective with a confidence regression term.

use serde::{Deserialize, Serialize};
use spine_neural::{Tape, Tensor, Var};

use crate::error::{CoreError, Result};

pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FocalForm {
    /// `p_t = p` on foreground and `1 − p` on background.
    ClassSymmetric,
    /// `−α (1 − p)^γ φ log p`, which vanishes on background pixels.
    Literal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub dice_smooth: f64,
    pub focal_weight: f64,
    pub dice_weight: f64,
    pub confidence_weight: f64,
    /// Weight background pixels by `1 − α` instead of `α`.
    pub alpha_balanced: bool,
    pub focal_form: FocalForm,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
            dice_smooth: 1e-6,
            focal_weight: 1.0,
            dice_weight: 1.0,
            confidence_weight: 1.0,
            alpha_balanced: true,
            focal_form: FocalForm::ClassSymmetric,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(CoreError::Config(format!("alpha {} outside (0, 1]", self.alpha)));
        }
        if self.gamma < 0.0 || self.dice_smooth <= 0.0 {
            return Err(CoreError::Config("gamma must be >= 0 and dice_smooth > 0".into()));
        }
        Ok(())
    }
}

fn check_pair(tape: &Tape<f64>, pred: Var, gt: &Tensor<f64>) -> Result<()> {
    if tape.shape(pred) != gt.shape() {
        return Err(CoreError::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            tape.shape(pred),
            gt.shape()
        )));
    }
    if gt.data().iter().any(|&g| g != 0.0 && g != 1.0) {
        return Err(CoreError::Shape("ground truth must be binary".into()));
    }
    Ok(())
}

/// Pixel-mean focal loss of probabilities `pred` against binary `gt`.
pub fn focal_loss(tape: &mut Tape<f64>, pred: Var, gt: &Tensor<f64>, cfg: &LossConfig) -> Result<Var> {
    check_pair(tape, pred, gt)?;
    let p = tape.clamp(pred, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let weight = |g: f64| match (cfg.focal_form, cfg.alpha_balanced) {
        (FocalForm::Literal, _) => cfg.alpha * g,
        (FocalForm::ClassSymmetric, true) => cfg.alpha * g + (1.0 - cfg.alpha) * (1.0 - g),
        (FocalForm::ClassSymmetric, false) => cfg.alpha,
    };
    let pt = match cfg.focal_form {
        FocalForm::Literal => p,
        FocalForm::ClassSymmetric => {
            let sign = tape.constant(gt.map(|g| 2.0 * g - 1.0));
            let offset = tape.constant(gt.map(|g| 1.0 - g));
            let sp = tape.mul(p, sign)?;
            tape.add(sp, offset)?
        }
    };
    let log_pt = tape.log(pt);
    let one_minus = tape.neg(pt);
    let one_minus = tape.add_scalar(one_minus, 1.0);
    let focus = tape.pow(one_minus, cfg.gamma);
    let w = tape.constant(gt.map(weight));
    let term = tape.mul(focus, log_pt)?;
    let term = tape.mul(term, w)?;
    let m = tape.mean(term);
    Ok(tape.neg(m))
}

/// Soft Dice loss `1 − (2Σpg + ε)/(Σp + Σg + ε)`.
pub fn dice_loss(tape: &mut Tape<f64>, pred: Var, gt: &Tensor<f64>, cfg: &LossConfig) -> Result<Var> {
    check_pair(tape, pred, gt)?;
    let eps = cfg.dice_smooth;
    let g = tape.constant(gt.clone());
    let inter = tape.mul(pred, g)?;
    let inter = tape.sum(inter);
    let num = tape.scale(inter, 2.0);
    let num = tape.add_scalar(num, eps);
    let sp = tape.sum(pred);
    let den = tape.add_scalar(sp, gt.data().iter().sum::<f64>() + eps);
    let inv = tape.pow(den, -1.0);
    let ratio = tape.mul(num, inv)?;
    let neg = tape.neg(ratio);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Hard Dice of `pred ≥ 0.5` against binary `gt`; 1 when both are empty.
pub fn hard_dice(pred: &[f64], gt: &[f64]) -> f64 {
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p >= 0.5, g >= 0.5);
        inter += usize::from(p && g);
        a += usize::from(p);
        b += usize::from(g);
    }
    if a + b == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (a + b) as f64
    }
}

/// Candidate choice and confidence targets, computed from values.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub dice_targets: Vec<f64>,
}

impl Selection {
    /// Pick the candidate with the highest soft Dice (first on ties) and
    /// take each candidate's hard Dice as its confidence target.
    pub fn from_values(probs: &Tensor<f64>, gt: &Tensor<f64>, eps: f64) -> Self {
        let k = probs.shape()[0];
        let n = gt.numel();
        let g = gt.data();
        let sg: f64 = g.iter().sum();
        let mut soft = Vec::with_capacity(k);
        let mut dice_targets = Vec::with_capacity(k);
        for c in probs.data().chunks(n) {
            let inter: f64 = c.iter().zip(g).map(|(p, g)| p * g).sum();
            let sp: f64 = c.iter().sum();
            soft.push((2.0 * inter + eps) / (sp + sg + eps));
            dice_targets.push(hard_dice(c, g));
        }
        let index = crate::model::argmax_first(&soft).unwrap_or(0);
        Self { index, dice_targets }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub focal: Var,
    pub dice: Var,
    pub confidence: Var,
    pub total: Var,
}

/// `w_f·focal + w_d·dice` on the selected candidate plus the mean squared
/// error between each confidence and its candidate's hard Dice.
///
/// `probs: [K, H, W]`, `confidence: [K]`. Passing `selection` pins the
/// candidate choice and targets (useful for finite-difference checks).
pub fn total_loss(
    tape: &mut Tape<f64>,
    probs: Var,
    confidence: Var,
    gt: &Tensor<f64>,
    cfg: &LossConfig,
    selection: Option<&Selection>,
) -> Result<(LossTerms, Selection)> {
    let k = tape.shape(probs)[0];
    if tape.shape(probs)[1..] != *gt.shape() || tape.shape(confidence) != [k] {
        return Err(CoreError::Shape(format!(
            "probs {:?}, confidence {:?}, gt {:?}",
            tape.shape(probs),
            tape.shape(confidence),
            gt.shape()
        )));
    }
    let sel = match selection {
        Some(s) => s.clone(),
        None => {
            let flat = tape.value(probs).clone().reshape(vec![k, gt.numel()])?;
            let gflat = gt.clone().reshape(vec![gt.numel()])?;
            Selection::from_values(&flat, &gflat, cfg.dice_smooth)
        }
    };
    let chosen = tape.narrow(probs, 0, sel.index, 1)?;
    let chosen = tape.reshape(chosen, gt.shape())?;
    let focal = focal_loss(tape, chosen, gt, cfg)?;
    let dice = dice_loss(tape, chosen, gt, cfg)?;
    let target = tape.constant(Tensor::new(vec![k], sel.dice_targets.clone())?);
    let err = tape.sub(confidence, target)?;
    let sq = tape.mul(err, err)?;
    let conf = tape.mean(sq);
    let wf = tape.scale(focal, cfg.focal_weight);
    let wd = tape.scale(dice, cfg.dice_weight);
    let wc = tape.scale(conf, cfg.confidence_weight);
    let mask = tape.add(wf, wd)?;
    let total = tape.add(mask, wc)?;
    Ok((
        LossTerms {
            focal,
            dice,
            confidence: conf,
            total,
        },
        sel,
    ))
}

/// Eager focal loss value.
pub fn focal_value(pred: &Tensor<f64>, gt: &Tensor<f64>, cfg: &LossConfig) -> Result<f64> {
    let mut t = Tape::new();
    let p = t.constant(pred.clone());
    let l = focal_loss(&mut t, p, gt, cfg)?;
    Ok(t.value(l).item()?)
}

/// Eager soft Dice loss value.
pub fn dice_value(pred: &Tensor<f64>, gt: &Tensor<f64>, cfg: &LossConfig) -> Result<f64> {
    let mut t = Tape::new();
    let p = t.constant(pred.clone());
    let l = dice_loss(&mut t, p, gt, cfg)?;
    Ok(t.value(l).item()?)
}
