//! Simulated interactive evaluation with overlap and surface metrics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use spine_core::metrics::{self, MeanStd};
use spine_core::trainer::{resample_from_errors, sample_initial_prompts, ErrorRegions, Mask, Sample, TrainConfig};
use spine_core::SegModel;

#[derive(Clone, Debug, Serialize)]
pub struct EvalSummary {
    pub slices: usize,
    pub rounds: usize,
    /// Mean Dice of the selected mask after each round.
    pub round_dice: Vec<f64>,
    pub dc: Option<MeanStd>,
    pub iou: Option<MeanStd>,
    /// Pixel units; slices with an empty surface are left out.
    pub msd: Option<MeanStd>,
    pub hd95: Option<MeanStd>,
    pub empty_surface: usize,
}

/// Prompts start from ground truth and gain corrective clicks each round;
/// metrics are taken on the final round's mask.
pub fn evaluate_samples(model: &SegModel, samples: &[Sample], rounds: usize, seed: u64) -> spine_core::Result<EvalSummary> {
    let sampling = TrainConfig::default().sampling();
    let per_round = TrainConfig::default().points_per_round;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rounds = rounds.max(1);
    let mut sums = vec![0.0; rounds];
    let (mut dc, mut iou, mut msd, mut hd) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut empty_surface = 0;
    for s in samples {
        let gt = s.gt_mask();
        let mut prompts = sample_initial_prompts(&gt, &sampling, &mut rng)?;
        let emb = model.embed::<f64>(&s.image)?;
        let mut last = None;
        for sum in sums.iter_mut() {
            let pred = model.predict_with_embedding(&emb, &s.image, &prompts)?;
            let best = pred.best();
            let mask = Mask::new(best.width, best.height, best.binary())?;
            let report = metrics::evaluate(&gt, &mask, None)?;
            *sum += report.dc;
            let err = ErrorRegions::between(&mask, &gt)?;
            prompts.points.extend(resample_from_errors(&err, per_round, &mut rng));
            last = Some(report);
        }
        let r = last.expect("rounds >= 1");
        dc.push(r.dc);
        iou.push(r.iou);
        match (r.msd, r.hd95) {
            (Some(m), Some(h)) => {
                msd.push(m);
                hd.push(h);
            }
            _ => empty_surface += 1,
        }
    }
    let n = samples.len().max(1) as f64;
    Ok(EvalSummary {
        slices: samples.len(),
        rounds,
        round_dice: sums.iter().map(|s| s / n).collect(),
        dc: MeanStd::of(&dc),
        iou: MeanStd::of(&iou),
        msd: MeanStd::of(&msd),
        hd95: MeanStd::of(&hd),
        empty_surface,
    })
}
