//! Interactive training: round one samples prompts from ground truth and
//! updates every trainable parameter; later rounds add corrective clicks from
//! the error regions and update the mask decoder only.

pub mod adam;
pub mod sampling;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use spine_neural::{Tape, Tensor};

pub use adam::{Adam, AdamSlot};
pub use sampling::{resample_from_errors, sample_initial_prompts, ErrorRegions, Mask, PromptSampling};

use crate::error::{CoreError, Result};
use crate::model::{is_decoder_param, ParamGroup, PromptSet, SegModel};
use crate::objective::{hard_dice, total_loss, LossConfig};

/// One training image with its binary ground truth, both `[H, W]`.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: Tensor<f64>,
    pub mask: Tensor<f64>,
}

impl Sample {
    pub fn gt_mask(&self) -> Mask {
        let s = self.mask.shape();
        Mask::from_f64(s[1], s[0], self.mask.data()).expect("sample mask shape")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub rounds_per_sample: usize,
    pub points_per_round: usize,
    pub initial_points: usize,
    pub box_probability: f64,
    pub box_jitter: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub cosine_decay: bool,
    pub loss: LossConfig,
    /// Stop once the interactive evaluation reaches this Dice.
    pub target_dice: Option<f64>,
    /// Evaluate every this many epochs (0 disables).
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub metrics_log: Option<PathBuf>,
    #[serde(default)]
    pub refinement: Refinement,
}

/// Where decoder-only refinement happens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Refinement {
    /// Round 1 of every sample updates all trainable parameters, later
    /// rounds of the same sample update the decoder only.
    #[default]
    WithinSample,
    /// Epochs before `full_epochs` behave like `WithinSample`; from then on
    /// every round, including the first, is decoder-only.
    EpochPhase { full_epochs: usize },
}

impl Refinement {
    pub fn decoder_only_at(&self, epoch: usize) -> bool {
        match *self {
            Refinement::WithinSample => false,
            Refinement::EpochPhase { full_epochs } => epoch >= full_epochs,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 200,
            rounds_per_sample: 3,
            points_per_round: 2,
            initial_points: 1,
            box_probability: 0.5,
            box_jitter: 0.05,
            seed: 0,
            batch_size: 1,
            cosine_decay: false,
            loss: LossConfig::default(),
            target_dice: None,
            eval_every: 0,
            checkpoint_every: 0,
            checkpoint_dir: None,
            metrics_log: None,
            refinement: Refinement::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds_per_sample == 0 || !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(CoreError::Config("rounds_per_sample >= 1, lr > 0 and batch_size >= 1 required".into()));
        }
        if !(0.0..=1.0).contains(&self.box_probability) {
            return Err(CoreError::Config("box_probability must lie in [0, 1]".into()));
        }
        self.loss.validate()
    }

    pub fn sampling(&self) -> PromptSampling {
        PromptSampling {
            initial_points: self.initial_points,
            box_probability: self.box_probability,
            box_jitter: self.box_jitter,
        }
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        if self.cosine_decay && self.epochs > 1 {
            let t = epoch as f64 / (self.epochs - 1) as f64;
            0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
        } else {
            self.lr
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub epoch: usize,
    pub round: usize,
    pub lr: f64,
    pub focal: f64,
    pub dice_loss: f64,
    pub confidence_loss: f64,
    pub total: f64,
    pub dice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub epoch: usize,
    /// Mean Dice of the selected mask after each round, over the dataset.
    pub round_dice: Vec<f64>,
    pub final_dice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub steps: u64,
    pub history: Vec<RoundRecord>,
    pub evals: Vec<EvalReport>,
    pub final_eval: EvalReport,
    /// Number of decoder-only steps whose freeze hash was verified.
    pub freeze_checks: usize,
    pub frozen_hash: String,
    pub final_hash: String,
}

fn group_hash(model: &SegModel, pred: impl Fn(&str) -> bool) -> String {
    model.store.hash_where(pred)
}

fn non_decoder_trainable(model: &SegModel) -> impl Fn(&str) -> bool + '_ {
    move |n: &str| !is_decoder_param(n) && model.store.get(n).map(|p| p.requires_grad).unwrap_or(false)
}

fn frozen(model: &SegModel) -> impl Fn(&str) -> bool + '_ {
    move |n: &str| model.store.get(n).map(|p| !p.requires_grad).unwrap_or(false)
}

/// Per-sample loop state inside a batch.
struct Episode<'a> {
    sample: &'a Sample,
    gt: Mask,
    prompts: PromptSet,
    pred: Option<Mask>,
}

#[derive(Default)]
struct Accum {
    grads: BTreeMap<String, Tensor<f64>>,
    focal: f64,
    dice_loss: f64,
    conf: f64,
    total: f64,
    dice: f64,
    n: usize,
}

impl Accum {
    fn add_grads(&mut self, g: BTreeMap<String, Tensor<f64>>) {
        for (name, t) in g {
            match self.grads.get_mut(&name) {
                Some(acc) => acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b),
                None => {
                    self.grads.insert(name, t);
                }
            }
        }
    }

    fn mean_grads(&mut self) -> BTreeMap<String, Tensor<f64>> {
        let n = self.n.max(1) as f64;
        std::mem::take(&mut self.grads)
            .into_iter()
            .map(|(k, t)| (k, t.map(|v| v / n)))
            .collect()
    }
}

/// Forward, loss and backward for one episode. `embedding` set means a
/// decoder-only pass on a fixed encoder output.
fn episode_step(
    model: &SegModel,
    ep: &mut Episode<'_>,
    embedding: Option<&Tensor<f64>>,
    loss: &LossConfig,
    acc: &mut Accum,
) -> Result<()> {
    let (mut tape, emb) = match embedding {
        Some(e) => {
            let mut t = Tape::<f64>::new().with_grad_filter(is_decoder_param);
            let v = t.constant(e.clone());
            (t, Some(v))
        }
        None => (Tape::<f64>::new(), None),
    };
    let out = match emb {
        Some(v) => model.decode(&mut tape, v, &ep.sample.image, &ep.prompts)?,
        None => model.forward(&mut tape, &ep.sample.image, &ep.prompts)?.out,
    };
    let (terms, _) = total_loss(&mut tape, out.probs, out.confidence, &ep.sample.mask, loss, None)?;
    let pred = model.collect(&tape, out);
    let best = pred.best();
    let dice = hard_dice(&best.prob_map, ep.sample.mask.data());
    ep.pred = Some(Mask::new(best.width, best.height, best.binary())?);
    tape.backward_scalar(terms.total)?;
    acc.add_grads(tape.param_grads());
    let val = |v| tape.value(v).item().map_err(CoreError::from);
    acc.focal += val(terms.focal)?;
    acc.dice_loss += val(terms.dice)?;
    acc.conf += val(terms.confidence)?;
    acc.total += val(terms.total)?;
    acc.dice += dice;
    acc.n += 1;
    Ok(())
}

fn embed_all(model: &SegModel, eps: &[Episode<'_>]) -> Result<Vec<Tensor<f64>>> {
    eps.iter().map(|ep| model.embed::<f64>(&ep.sample.image)).collect()
}

fn corrective_points(ep: &mut Episode<'_>, k: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    if let Some(pred) = &ep.pred {
        let err = ErrorRegions::between(pred, &ep.gt)?;
        ep.prompts.points.extend(resample_from_errors(&err, k, rng));
    }
    Ok(())
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub adam: Adam,
    rng: ChaCha8Rng,
    log: Option<std::io::BufWriter<std::fs::File>>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let log = match &cfg.metrics_log {
            Some(p) => Some(std::io::BufWriter::new(std::fs::File::create(p)?)),
            None => None,
        };
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            adam: Adam::new(),
            log,
        })
    }

    /// Run all epochs (or until the target Dice is reached).
    pub fn train(&mut self, model: &mut SegModel, data: &[Sample]) -> Result<TrainReport> {
        if data.is_empty() {
            return Err(CoreError::Empty("training dataset is empty".into()));
        }
        let frozen_hash = group_hash(model, frozen(model));
        let mut history = Vec::new();
        let mut evals = Vec::new();
        let mut freeze_checks = 0;
        let mut epochs_run = 0;
        for epoch in 0..self.cfg.epochs {
            let (records, checks) = self.epoch(model, data, epoch)?;
            freeze_checks += checks;
            history.extend(records);
            epochs_run = epoch + 1;
            if self.cfg.checkpoint_every > 0 && epochs_run % self.cfg.checkpoint_every == 0 {
                self.checkpoint(model, epochs_run)?;
            }
            if self.cfg.eval_every > 0 && epochs_run % self.cfg.eval_every == 0 {
                let ev = evaluate_interactive(model, data, &self.cfg, epochs_run)?;
                let done = self.cfg.target_dice.is_some_and(|t| ev.final_dice >= t);
                evals.push(ev);
                if done {
                    break;
                }
            }
        }
        if group_hash(model, frozen(model)) != frozen_hash {
            return Err(CoreError::Freeze("frozen parameters changed during training".into()));
        }
        let final_eval = match evals.last() {
            Some(e) if e.epoch == epochs_run => e.clone(),
            _ => evaluate_interactive(model, data, &self.cfg, epochs_run)?,
        };
        if let Some(log) = &mut self.log {
            log.flush()?;
        }
        Ok(TrainReport {
            epochs_run,
            steps: self.adam.steps,
            history,
            evals,
            final_eval,
            freeze_checks,
            frozen_hash,
            final_hash: model.store.hash(),
        })
    }

    /// Adam step restricted to decoder gradients, verified by hashing every
    /// other trainable parameter around the update.
    fn decoder_only_step(&mut self, model: &mut SegModel, acc: &mut Accum, lr: f64) -> Result<()> {
        if acc.grads.keys().any(|k| !is_decoder_param(k)) {
            return Err(CoreError::Freeze("non-decoder gradient in a decoder-only round".into()));
        }
        let before = group_hash(model, non_decoder_trainable(model));
        let grads = acc.mean_grads();
        self.adam.step(&mut model.store, &grads, lr)?;
        if group_hash(model, non_decoder_trainable(model)) != before {
            return Err(CoreError::Freeze("decoder-only step changed other parameters".into()));
        }
        Ok(())
    }

    fn checkpoint(&self, model: &SegModel, epoch: usize) -> Result<()> {
        if let Some(dir) = &self.cfg.checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            let meta = BTreeMap::from([("epoch".to_string(), epoch.to_string())]);
            model.save(dir.join(format!("epoch_{epoch:04}.ckpt")), &meta)?;
        }
        Ok(())
    }

    /// One pass over the data; returns per-round records and the number of
    /// verified decoder-only steps.
    pub fn epoch(&mut self, model: &mut SegModel, data: &[Sample], epoch: usize) -> Result<(Vec<RoundRecord>, usize)> {
        let lr = self.cfg.lr_at(epoch);
        let rounds = self.cfg.rounds_per_sample;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut per_round: Vec<Accum> = (0..rounds).map(|_| Accum::default()).collect();
        let mut checks = 0;
        for batch in order.chunks(self.cfg.batch_size) {
            let mut eps = Vec::with_capacity(batch.len());
            for &i in batch {
                let s = &data[i];
                let gt = s.gt_mask();
                let prompts = sample_initial_prompts(&gt, &self.cfg.sampling(), &mut self.rng)?;
                eps.push(Episode { sample: s, gt, prompts, pred: None });
            }
            let locked = self.cfg.refinement.decoder_only_at(epoch);
            let mut embeddings = Vec::new();
            let mut acc = Accum::default();
            if locked {
                embeddings = embed_all(model, &eps)?;
                for (ep, emb) in eps.iter_mut().zip(&embeddings) {
                    episode_step(model, ep, Some(emb), &self.cfg.loss, &mut acc)?;
                }
                self.decoder_only_step(model, &mut acc, lr)?;
                checks += 1;
            } else {
                for ep in eps.iter_mut() {
                    episode_step(model, ep, None, &self.cfg.loss, &mut acc)?;
                }
                let grads = acc.mean_grads();
                self.adam.step(&mut model.store, &grads, lr)?;
            }
            merge_stats(&mut per_round[0], &acc);

            if rounds > 1 && !locked {
                embeddings = embed_all(model, &eps)?;
            }
            for stats in per_round.iter_mut().skip(1) {
                let mut acc = Accum::default();
                for (ep, emb) in eps.iter_mut().zip(&embeddings) {
                    corrective_points(ep, self.cfg.points_per_round, &mut self.rng)?;
                    episode_step(model, ep, Some(emb), &self.cfg.loss, &mut acc)?;
                }
                self.decoder_only_step(model, &mut acc, lr)?;
                checks += 1;
                merge_stats(stats, &acc);
            }
        }
        let records: Vec<RoundRecord> = per_round
            .iter()
            .enumerate()
            .map(|(r, a)| {
                let n = a.n.max(1) as f64;
                RoundRecord {
                    epoch,
                    round: r + 1,
                    lr,
                    focal: a.focal / n,
                    dice_loss: a.dice_loss / n,
                    confidence_loss: a.conf / n,
                    total: a.total / n,
                    dice: a.dice / n,
                }
            })
            .collect();
        if let Some(log) = &mut self.log {
            for r in &records {
                serde_json::to_writer(&mut *log, r)?;
                log.write_all(b"\n")?;
            }
        }
        Ok((records, checks))
    }
}

fn merge_stats(into: &mut Accum, from: &Accum) {
    into.focal += from.focal;
    into.dice_loss += from.dice_loss;
    into.conf += from.conf;
    into.total += from.total;
    into.dice += from.dice;
    into.n += from.n;
}

/// Simulated interactive session on every sample without updating weights:
/// initial prompts, then corrective clicks for the remaining rounds.
/// Uses its own seed stream so evaluation never perturbs training.
pub fn evaluate_interactive(model: &SegModel, data: &[Sample], cfg: &TrainConfig, epoch: usize) -> Result<EvalReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_E7A1);
    let rounds = cfg.rounds_per_sample;
    let mut sums = vec![0.0; rounds];
    for s in data {
        let gt = s.gt_mask();
        let mut prompts = sample_initial_prompts(&gt, &cfg.sampling(), &mut rng)?;
        let emb = model.embed::<f64>(&s.image)?;
        for sum in sums.iter_mut() {
            let pred = model.predict_with_embedding(&emb, &s.image, &prompts)?;
            let best = pred.best();
            *sum += hard_dice(&best.prob_map, s.mask.data());
            let mask = Mask::new(best.width, best.height, best.binary())?;
            let err = ErrorRegions::between(&mask, &gt)?;
            prompts.points.extend(resample_from_errors(&err, cfg.points_per_round, &mut rng));
        }
    }
    let round_dice: Vec<f64> = sums.iter().map(|s| s / data.len() as f64).collect();
    Ok(EvalReport {
        epoch,
        final_dice: *round_dice.last().expect("rounds >= 1"),
        round_dice,
    })
}

/// Parameter groups touched by a gradient map, for diagnostics.
pub fn groups_of(grads: &BTreeMap<String, Tensor<f64>>) -> Vec<ParamGroup> {
    let mut g: Vec<ParamGroup> = grads.keys().map(|k| ParamGroup::of(k)).collect();
    g.sort();
    g.dedup();
    g
}
