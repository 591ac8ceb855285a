//! Overlap and surface-distance metrics for binary masks.

pub mod edt;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::trainer::Mask;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    pub value: f64,
    /// Both masks empty; the value is 1 by convention.
    pub degenerate: bool,
}

fn check(gt: &Mask, pred: &Mask) -> Result<()> {
    if (gt.width, gt.height) != (pred.width, pred.height) {
        return Err(CoreError::Shape(format!(
            "ground truth {}x{} vs prediction {}x{}",
            gt.width, gt.height, pred.width, pred.height
        )));
    }
    Ok(())
}

fn counts(gt: &Mask, pred: &Mask) -> (usize, usize, usize) {
    let mut inter = 0;
    let mut a = 0;
    let mut b = 0;
    for (&g, &p) in gt.data.iter().zip(&pred.data) {
        inter += usize::from(g && p);
        a += usize::from(g);
        b += usize::from(p);
    }
    (inter, a, b)
}

/// `2|GT ∩ Pred| / (|GT| + |Pred|)`.
pub fn dice_coef(gt: &Mask, pred: &Mask) -> Result<Overlap> {
    check(gt, pred)?;
    let (i, a, b) = counts(gt, pred);
    Ok(if a + b == 0 {
        Overlap { value: 1.0, degenerate: true }
    } else {
        Overlap {
            value: 2.0 * i as f64 / (a + b) as f64,
            degenerate: false,
        }
    })
}

/// `|GT ∩ Pred| / |GT ∪ Pred|`.
pub fn iou(gt: &Mask, pred: &Mask) -> Result<Overlap> {
    check(gt, pred)?;
    let (i, a, b) = counts(gt, pred);
    let union = a + b - i;
    Ok(if union == 0 {
        Overlap { value: 1.0, degenerate: true }
    } else {
        Overlap {
            value: i as f64 / union as f64,
            degenerate: false,
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurfaceSource {
    Gt,
    Pred,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Surface {
    /// `(x, y)` pixel coordinates.
    pub points: Vec<(usize, usize)>,
    pub source: SurfaceSource,
}

/// Foreground pixels with a 4-neighbour outside the foreground; pixels on
/// the image border count as boundary.
pub fn extract_surface(mask: &Mask, source: SurfaceSource) -> Surface {
    let (w, h) = (mask.width, mask.height);
    let at = |x: usize, y: usize| mask.data[y * w + x];
    let mut points = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !at(x, y) {
                continue;
            }
            let border = x == 0 || y == 0 || x + 1 == w || y + 1 == h;
            if border || !at(x - 1, y) || !at(x + 1, y) || !at(x, y - 1) || !at(x, y + 1) {
                points.push((x, y));
            }
        }
    }
    Surface { points, source }
}

fn surface_mask(s: &Surface, w: usize, h: usize) -> Vec<bool> {
    let mut m = vec![false; w * h];
    for &(x, y) in &s.points {
        m[y * w + x] = true;
    }
    m
}

/// Directed nearest-surface distances from every point of `from` to `to`.
pub fn directed_distances(from: &Surface, to: &Surface, width: usize, height: usize, spacing: (f64, f64)) -> Vec<f64> {
    let d2 = edt::squared_edt(&surface_mask(to, width, height), width, height, spacing);
    from.points.iter().map(|&(x, y)| d2[y * width + x].sqrt()).collect()
}

/// Quantile of `values` with linear interpolation between order statistics.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = (q / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (rank - lo as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceUnit {
    Pixel,
    Mm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceDistances {
    pub msd: f64,
    pub hd: f64,
    pub hd100: f64,
}

/// Symmetric mean surface distance and pooled-percentile Hausdorff. `None`
/// when either surface is empty.
pub fn surface_distances(
    gt: &Surface,
    pred: &Surface,
    width: usize,
    height: usize,
    spacing: (f64, f64),
    hd_percentile: f64,
) -> Option<SurfaceDistances> {
    if gt.points.is_empty() || pred.points.is_empty() {
        return None;
    }
    let a = directed_distances(gt, pred, width, height, spacing);
    let b = directed_distances(pred, gt, width, height, spacing);
    let n = (a.len() + b.len()) as f64;
    let msd = (a.iter().sum::<f64>() + b.iter().sum::<f64>()) / n;
    let pooled: Vec<f64> = a.iter().chain(&b).copied().collect();
    let sup = |d: &[f64]| d.iter().copied().fold(0.0, f64::max);
    Some(SurfaceDistances {
        msd,
        hd: percentile(&pooled, hd_percentile),
        hd100: sup(&a).max(sup(&b)),
    })
}

pub fn msd(gt: &Surface, pred: &Surface, width: usize, height: usize, spacing: (f64, f64)) -> Option<f64> {
    surface_distances(gt, pred, width, height, spacing, 95.0).map(|d| d.msd)
}

/// HD at `percentile` (95 by default); 100 is the classical Hausdorff distance.
pub fn hd95(gt: &Surface, pred: &Surface, width: usize, height: usize, spacing: (f64, f64), percentile: f64) -> Option<f64> {
    surface_distances(gt, pred, width, height, spacing, percentile).map(|d| d.hd)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricFlags {
    pub both_empty: bool,
    pub empty_surface: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dc: f64,
    pub iou: f64,
    pub msd: Option<f64>,
    pub hd95: Option<f64>,
    pub unit: DistanceUnit,
    pub flags: MetricFlags,
}

/// All four metrics for one slice. `spacing = None` reports pixel units.
pub fn evaluate(gt: &Mask, pred: &Mask, spacing: Option<(f64, f64)>) -> Result<MetricReport> {
    let dc = dice_coef(gt, pred)?;
    let io = iou(gt, pred)?;
    let sg = extract_surface(gt, SurfaceSource::Gt);
    let sp = extract_surface(pred, SurfaceSource::Pred);
    let d = surface_distances(&sg, &sp, gt.width, gt.height, spacing.unwrap_or((1.0, 1.0)), 95.0);
    Ok(MetricReport {
        dc: dc.value,
        iou: io.value,
        msd: d.as_ref().map(|d| d.msd),
        hd95: d.as_ref().map(|d| d.hd),
        unit: if spacing.is_some() { DistanceUnit::Mm } else { DistanceUnit::Pixel },
        flags: MetricFlags {
            both_empty: dc.degenerate,
            empty_surface: d.is_none(),
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    /// Sample mean and (n − 1) standard deviation.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Some(Self { mean, std: var.sqrt(), n })
    }

    pub fn display(&self, digits: usize) -> String {
        format!("{:.*} ± {:.*}", digits, self.mean, digits, self.std)
    }
}
