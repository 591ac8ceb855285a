//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any failure.

mod common;

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use spine_command::corpus::{self, Case};
use spine_command::{measure_parse_latency, parse_command, parse_via_llm, FallbackReason, Grammar, LlmClientConfig, OpSource};
use spine_core::adapters::{Cbam, CbamConfig, LoraAdapter};
use spine_core::fixtures::{self, PhantomConfig};
use spine_core::metrics::{dice_coef, extract_surface, hd95, iou, surface_distances, SurfaceSource};
use spine_core::model::prompt::dense_pe;
use spine_core::model::{is_decoder_param, ParamGroup};
use spine_core::objective::{dice_value, focal_value, total_loss, FocalForm, LossConfig, Selection};
use spine_core::preprocess::slices::{DropReason, Plane, SliceRecord, Split};
use spine_core::preprocess::split::{split_dataset, SplitUnit};
use spine_core::preprocess::volume::{labels_stem, CtVolume};
use spine_core::preprocess::window::WindowConfig;
use spine_core::preprocess::{run, PreprocessConfig};
use spine_core::trainer::sampling::Mask;
use spine_core::trainer::{Refinement, TrainConfig, Trainer};
use spine_core::{ModelConfig, Point, PromptBox, PromptSet, SegModel};
use spine_neural::gradcheck::{check_params, GradCheckOptions};
use spine_neural::nn::{self, Conv2d, ConvTranspose2d, LayerNorm, Linear};
use spine_neural::params::uniform;
use spine_neural::{NeuralError, ParamStore, Tape, Tensor, Var};
use spine_service::ServiceConfig;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn ne(e: spine_core::CoreError) -> NeuralError {
    NeuralError::Invalid(e.to_string())
}

// Gradient integrity

const GRAD_TOL: f64 = 1e-4;
const SEEDS: u64 = 10;

type Body = dyn Fn(&mut Tape<f64>, &ParamStore, u64) -> spine_neural::Result<Var>;

fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> spine_neural::Result<Var> {
    let r = tape.constant(uniform(tape.shape(y), 1.0, &mut rng(seed ^ 0xABCD)));
    let prod = tape.mul(y, r)?;
    Ok(tape.sum(prod))
}

/// Max relative error of `body` over all seeds; `build` seeds the store.
fn grad_case(build: &dyn Fn(u64) -> ParamStore, body: &'static Body) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let opts = GradCheckOptions { max_entries: 8, ..Default::default() };
        let report = check_params(build(seed), seed, GRAD_TOL, &opts, move |t, s| body(t, s, seed)).map_err(|e| e.to_string())?;
        worst = worst.max(report.max_rel_error());
        if !report.passed() {
            return Err(format!("seed {seed}: max rel {:.3e}", report.max_rel_error()));
        }
    }
    Ok(worst)
}

fn inputs(shapes: &[&[usize]], seed: u64) -> ParamStore {
    let mut r = rng(seed);
    let mut s = ParamStore::new();
    for (i, sh) in shapes.iter().enumerate() {
        s.insert(format!("p{i}"), uniform(sh, 1.0, &mut r), true);
    }
    s
}

fn p(t: &mut Tape<f64>, s: &ParamStore, i: usize) -> spine_neural::Result<Var> {
    t.param(s, &format!("p{i}"))
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    let mut run = |name: &str, build: &dyn Fn(u64) -> ParamStore, body: &'static Body| -> Result<(), String> {
        let w = grad_case(build, body).map_err(|e| format!("{name}: {e}"))?;
        worst = worst.max(w);
        cases += 1;
        Ok(())
    };

    run("linear", &|seed| {
        let mut s = inputs(&[&[4, 6]], seed);
        Linear::new(&mut s, "lin", 6, 5, true, true, &mut rng(seed + 1));
        s
    }, &|t, s, seed| {
        let x = p(t, s, 0)?;
        let l = Linear { weight: "lin.weight".into(), bias: Some("lin.bias".into()), in_dim: 6, out_dim: 5 };
        let y = l.forward(t, s, x)?;
        project(t, y, seed)
    })?;
    run("layer_norm", &|seed| {
        let mut s = inputs(&[&[3, 8]], seed);
        LayerNorm::new(&mut s, "ln", 8, true);
        s.set_value("ln.gamma", uniform(&[8], 1.0, &mut rng(seed + 2))).unwrap();
        s.set_value("ln.beta", uniform(&[8], 1.0, &mut rng(seed + 3))).unwrap();
        s
    }, &|t, s, seed| {
        let x = p(t, s, 0)?;
        let ln = LayerNorm { gamma: "ln.gamma".into(), beta: "ln.beta".into(), eps: 1e-5 };
        let y = ln.forward(t, s, x)?;
        project(t, y, seed)
    })?;
    run("conv2d_3x3", &|seed| {
        let mut s = inputs(&[&[2, 5, 6]], seed);
        Conv2d::new(&mut s, "conv", 2, 3, 3, true, true, &mut rng(seed + 1));
        s
    }, &|t, s, seed| {
        let x = p(t, s, 0)?;
        let w = t.param(s, "conv.weight")?;
        let b = t.param(s, "conv.bias")?;
        let y = t.conv2d(x, w, Some(b))?;
        project(t, y, seed)
    })?;
    run("conv2d_7x7", &|seed| inputs(&[&[2, 6, 6], &[1, 2, 7, 7]], seed), &|t, s, seed| {
        let (x, w) = (p(t, s, 0)?, p(t, s, 1)?);
        let y = t.conv2d(x, w, None)?;
        project(t, y, seed)
    })?;
    run("conv_transpose2d", &|seed| {
        let mut s = inputs(&[&[3, 2, 3]], seed);
        ConvTranspose2d::new(&mut s, "up", 3, 2, 2, true, true, &mut rng(seed + 1));
        s
    }, &|t, s, seed| {
        let x = p(t, s, 0)?;
        let w = t.param(s, "up.weight")?;
        let b = t.param(s, "up.bias")?;
        let y = t.conv_transpose2d(x, w, Some(b))?;
        project(t, y, seed)
    })?;
    run("attention", &|seed| inputs(&[&[3, 8], &[5, 8], &[5, 8]], seed), &|t, s, seed| {
        let (q, k, v) = (p(t, s, 0)?, p(t, s, 1)?, p(t, s, 2)?);
        let y = nn::multi_head_attention(t, q, k, v, 2)?;
        project(t, y, seed)
    })?;
    run("activations", &|seed| inputs(&[&[4, 5]], seed), &|t, s, seed| {
        let x = p(t, s, 0)?;
        let g = t.gelu(x);
        let sg = t.sigmoid(g);
        let th = t.tanh(sg);
        let sm = t.softmax(th);
        let lg = t.log(sm);
        let sh = t.add_scalar(sg, -0.5);
        let r = t.relu(sh);
        let y = t.add(lg, r)?;
        project(t, y, seed)
    })?;
    run("pooling_and_layout", &|seed| inputs(&[&[4, 3, 3], &[4, 3, 3]], seed), &|t, s, seed| {
        let (a, b) = (p(t, s, 0)?, p(t, s, 1)?);
        let mx = t.max_axis(a, 0)?;
        let mn = t.mean_axis(b, 0)?;
        let c = t.concat(&[mx, mn], 0)?;
        let pm = t.permute(c, &[2, 0, 1])?;
        let r = t.reshape(pm, &[3, 6])?;
        let m = t.matmul_t(r, r)?;
        project(t, m, seed)
    })?;
    run("cbam", &|seed| {
        let mut s = ParamStore::new();
        let cfg = CbamConfig { channels: 16, mlp_reduction_ratio: 4, spatial_kernel: 7 };
        Cbam::new(&mut s, "cbam", cfg, true, &mut rng(seed)).unwrap();
        s.insert("x", uniform(&[16, 6, 6], 1.0, &mut rng(100 + seed)), true);
        s
    }, &|t, s, seed| {
        let m = cbam_handle(seed);
        let x = t.param(s, "x")?;
        let y = m.apply(t, s, x).map_err(ne)?;
        project(t, y, seed)
    })?;
    run("lora", &|seed| {
        let mut s = ParamStore::new();
        s.insert("w", uniform(&[8, 8], 0.5, &mut rng(seed)), true);
        LoraAdapter::wrap(&mut s, "w", None, "blk", 2, 1.0, seed).unwrap();
        s.set_value("lora.blk.B", uniform(&[2, 8], 0.5, &mut rng(seed + 7))).unwrap();
        s.insert("x", uniform(&[5, 8], 1.0, &mut rng(seed + 8)), true);
        s
    }, &|t, s, seed| {
        let mut scratch = ParamStore::new();
        scratch.insert("w", Tensor::zeros(vec![8, 8]), true);
        let lora = LoraAdapter::wrap(&mut scratch, "w", None, "blk", 2, 1.0, seed).map_err(ne)?;
        let x = t.param(s, "x")?;
        let y = lora.forward(t, s, x).map_err(ne)?;
        project(t, y, seed)
    })?;
    run("losses", &|seed| {
        let mut s = ParamStore::new();
        s.insert("logits", uniform(&[3, 6, 6], 2.0, &mut rng(seed)), true);
        s.insert("conf", Tensor::new(vec![3], vec![0.1, 0.5, 0.8]).unwrap(), true);
        s
    }, &|t, s, seed| {
        let gt = Tensor::new(vec![6, 6], (0..36).map(|i| f64::from(((i * 7 + seed as usize) % 5 < 2) as u8)).collect())?;
        let l = t.param(s, "logits")?;
        let probs = t.sigmoid(l);
        let conf = t.param(s, "conf")?;
        let flat = t.value(probs).clone().reshape(vec![3, 36])?;
        let sel = Selection::from_values(&flat, &gt.clone().reshape(vec![36])?, 1e-6);
        let (terms, _) = total_loss(t, probs, conf, &gt, &LossConfig::default(), Some(&sel)).map_err(ne)?;
        Ok(terms.total)
    })?;

    // full toy model: encoder (LoRA and CBAM), prompt encoder, decoder, loss
    let cfg = ModelConfig::toy();
    for seed in 0..SEEDS {
        let mut model = SegModel::new(cfg.clone(), seed).map_err(|e| e.to_string())?;
        let mut r = rng(seed + 50);
        let names: Vec<String> = model.store.names().filter(|n| n.ends_with(".B")).map(str::to_string).collect();
        for n in names {
            let shape = model.store.value(&n).unwrap().shape().to_vec();
            model.store.set_value(&n, uniform(&shape, 0.2, &mut r)).unwrap();
        }
        let s = cfg.input_size;
        let mut img = uniform(&[s, s], 0.5, &mut rng(seed));
        img.data_mut().iter_mut().for_each(|v| *v += 0.5);
        let gt = Tensor::new(vec![s, s], (0..s * s).map(|i| f64::from(((i % s) < s / 2) as u8)).collect()).unwrap();
        let prompts = PromptSet {
            points: vec![Point::positive(s / 4, s / 3), Point::negative(3 * s / 4, s / 2)],
            bbox: Some(PromptBox { x_min: 0, y_min: 1, x_max: s / 2, y_max: s - 1 }),
            pending_point_budget: 0,
        };
        let loss_cfg = LossConfig::default();
        let mut t = Tape::<f64>::new();
        let fwd = model.forward(&mut t, &img, &prompts).map_err(|e| e.to_string())?;
        let k = cfg.num_mask_candidates;
        let probs = t.value(fwd.out.probs).clone().reshape(vec![k, s * s]).unwrap();
        let sel = Selection::from_values(&probs, &gt.clone().reshape(vec![s * s]).unwrap(), loss_cfg.dice_smooth);
        let m = model.clone();
        let opts = GradCheckOptions { max_entries: 3, ..Default::default() };
        let report = check_params(model.store.clone(), seed, GRAD_TOL, &opts, move |t, st| {
            let enc = m.encoder.forward(t, st, &img, true).map_err(ne)?;
            let pr = m.prompt.forward(t, st, &prompts).map_err(ne)?;
            let pe = t.constant(dense_pe(m.cfg.grid(), m.cfg.embed_dim, m.cfg.pe_max_freq));
            let skip = t.constant(img.clone().reshape(vec![1, s, s])?);
            let out = m.decoder.forward(t, st, enc.refined, pr, pe, skip).map_err(ne)?;
            let (terms, _) = total_loss(t, out.probs, out.confidence, &gt, &loss_cfg, Some(&sel)).map_err(ne)?;
            Ok(terms.total)
        })
        .map_err(|e| e.to_string())?;
        ensure!(report.passed(), "toy model seed {seed}: max rel {:.3e}", report.max_rel_error());
        ensure!(
            report.leaves.iter().any(|l| l.name.starts_with("lora.")) && report.leaves.iter().any(|l| l.name.starts_with("cbam.")),
            "toy model check did not reach the adapters"
        );
        worst = worst.max(report.max_rel_error());
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "runtime {secs:.1} s");
    Ok(format!("{} layer cases + toy model, {SEEDS} seeds, max rel {worst:.2e}, {secs:.1} s", cases))
}

fn cbam_handle(seed: u64) -> Cbam {
    let mut s = ParamStore::new();
    let cfg = CbamConfig { channels: 16, mlp_reduction_ratio: 4, spatial_kernel: 7 };
    Cbam::new(&mut s, "cbam", cfg, true, &mut rng(seed)).unwrap()
}

// LoRA

fn lora_contract() -> Outcome {
    let model = SegModel::new(ModelConfig::toy(), 3).map_err(|e| e.to_string())?;
    let mut img = uniform(&[64, 64], 0.5, &mut rng(2));
    img.data_mut().iter_mut().for_each(|v| *v += 0.5);
    let mut t = Tape::<f64>::new();
    let with = model.encode(&mut t, &img, true).map_err(|e| e.to_string())?;
    let without = model.encode(&mut t, &img, false).map_err(|e| e.to_string())?;
    let diff = t.value(with.refined).max_abs_diff(t.value(without.refined));
    ensure!(diff <= 1e-12, "zero-init model differs from base by {diff:e}");

    let mut store = ParamStore::new();
    store.insert("w", uniform(&[64, 64], 0.5, &mut rng(1)), true);
    store.insert("b", uniform(&[64], 0.5, &mut rng(2)), true);
    let lora = LoraAdapter::wrap(&mut store, "w", Some("b"), "blk.q", 4, 1.0, 9).map_err(|e| e.to_string())?;
    let mut t = Tape::<f64>::new();
    let x = t.constant(uniform(&[10, 64], 1.0, &mut rng(3)));
    let y = lora.forward(&mut t, &store, x).map_err(|e| e.to_string())?;
    let y0 = lora.base_forward(&mut t, &store, x).map_err(|e| e.to_string())?;
    let diff_single = t.value(y).max_abs_diff(t.value(y0));
    ensure!(diff_single <= 1e-12, "wrapped layer differs by {diff_single:e}");

    let (d, r) = (model.cfg.embed_dim, model.cfg.lora_rank);
    let mut wrapped = 0;
    for b in &model.encoder.blocks {
        for proj in [&b.q, &b.k, &b.v, &b.proj] {
            if let Some(a) = proj.adapter() {
                ensure!(a.trainable_count() == 2 * d * r, "adapter count {} != {}", a.trainable_count(), 2 * d * r);
                wrapped += 1;
            }
        }
    }
    ensure!(wrapped == 2 * model.cfg.depth, "{wrapped} wrapped matrices");
    let lora_total = model.param_report().by_group[&ParamGroup::Lora];
    ensure!(lora_total == wrapped * 2 * d * r, "LoRA group has {lora_total} parameters");

    let mut model = model;
    let base = |m: &SegModel| m.store.hash_where(|n| ParamGroup::of(n) == ParamGroup::EncoderBase);
    let lora_hash = |m: &SegModel| m.store.hash_where(|n| ParamGroup::of(n) == ParamGroup::Lora);
    let (base_before, lora_before) = (base(&model), lora_hash(&model));
    let data = fixtures::training_set(&PhantomConfig { count: 4, ..PhantomConfig::default() });
    let cfg = TrainConfig { epochs: 9, lr: 1e-3, ..TrainConfig::default() };
    let report = Trainer::new(cfg).and_then(|mut tr| tr.train(&mut model, &data)).map_err(|e| e.to_string())?;
    ensure!(report.steps >= 100, "{} steps", report.steps);
    ensure!(base(&model) == base_before, "frozen base hash changed");
    ensure!(lora_hash(&model) != lora_before, "LoRA factors did not train");
    Ok(format!(
        "identity diff {diff:.1e}, {wrapped} matrices x {} params, base hash equal after {} steps",
        2 * d * r,
        report.steps
    ))
}

// CBAM

fn cbam_contract() -> Outcome {
    let cb = |seed| {
        let mut s = ParamStore::new();
        let m = Cbam::new(&mut s, "cbam", CbamConfig::new(16), true, &mut rng(seed)).unwrap();
        (s, m)
    };
    let mut r = rng(77);
    for seed in 0..200 {
        let (store, m) = cb(seed);
        let scale = r.gen_range(0.01..20.0);
        let mut t = Tape::<f64>::new();
        let f = t.constant(uniform(&[16, 5, 6], scale, &mut rng(seed + 1)));
        let mc = m.channel_attention(&mut t, &store, f).map_err(|e| e.to_string())?;
        let ms = m.spatial_attention(&mut t, &store, f).map_err(|e| e.to_string())?;
        let inside = |v: &Tensor<f64>| v.data().iter().all(|&x| x > 0.0 && x < 1.0);
        ensure!(inside(t.value(mc)) && inside(t.value(ms)), "gate outside (0,1) at seed {seed}");
    }

    let (mut store, m) = cb(6);
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for n in names {
        let shape = store.value(&n).unwrap().shape().to_vec();
        store.set_value(&n, Tensor::zeros(shape)).unwrap();
    }
    let x = uniform(&[16, 7, 5], 4.0, &mut rng(7));
    let mut t = Tape::<f64>::new();
    let f = t.constant(x.clone());
    let y = m.apply(&mut t, &store, f).map_err(|e| e.to_string())?;
    let quarter = t.value(y).data().iter().zip(x.data()).map(|(a, b)| (a - 0.25 * b).abs()).fold(0.0, f64::max);
    ensure!(quarter <= 1e-12, "zero-weight output off 0.25F by {quarter:e}");

    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let (mut store, m) = cb(seed);
        store.insert("x", uniform(&[16, 6, 6], 1.0, &mut rng(100 + seed)), true);
        let report = check_params(store, seed, GRAD_TOL, &GradCheckOptions::default(), |t, s| {
            let x = t.param(s, "x")?;
            let y = m.apply(t, s, x).map_err(ne)?;
            let y2 = t.mul(y, y)?;
            Ok(t.sum(y2))
        })
        .map_err(|e| e.to_string())?;
        ensure!(report.passed(), "gradient seed {seed}: {:.3e}", report.max_rel_error());
        worst = worst.max(report.max_rel_error());
    }
    Ok(format!("200 gate draws in (0,1), 0.25F diff {quarter:.1e}, gradcheck max rel {worst:.2e}"))
}

// Losses

fn t1(v: f64) -> Tensor<f64> {
    Tensor::new(vec![1, 1], vec![v]).unwrap()
}

fn bce(pred: &[f64], gt: &[f64]) -> f64 {
    pred.iter()
        .zip(gt)
        .map(|(&p, &g)| {
            let p = p.clamp(1e-7, 1.0 - 1e-7);
            -(g * p.ln() + (1.0 - g) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / pred.len() as f64
}

fn random_pair(seed: u64, n: usize) -> (Tensor<f64>, Tensor<f64>) {
    let mut r = rng(seed);
    let p: Vec<f64> = (0..n * n).map(|_| r.gen_range(0.001..0.999)).collect();
    let g: Vec<f64> = (0..n * n).map(|_| f64::from(r.gen_bool(0.4) as u8)).collect();
    (Tensor::new(vec![n, n], p).unwrap(), Tensor::new(vec![n, n], g).unwrap())
}

fn loss_suite() -> Outcome {
    let e = |x: spine_core::CoreError| x.to_string();
    let mut bce_gap: f64 = 0.0;
    for seed in 0..50 {
        let (p, g) = random_pair(seed, 12);
        let c = LossConfig { alpha: 1.0, gamma: 0.0, alpha_balanced: false, ..Default::default() };
        bce_gap = bce_gap.max((focal_value(&p, &g, &c).map_err(e)? - bce(p.data(), g.data())).abs());
    }
    ensure!(bce_gap <= 1e-10, "focal at gamma 0 differs from BCE by {bce_gap:e}");

    let (_, gt) = random_pair(5, 8);
    let mut perfect: f64 = 0.0;
    for form in [FocalForm::ClassSymmetric, FocalForm::Literal] {
        let c = LossConfig { focal_form: form, ..Default::default() };
        perfect = perfect.max(focal_value(&gt, &gt, &c).map_err(e)?).max(dice_value(&gt, &gt, &c).map_err(e)?);
    }
    let mut data = gt.data().to_vec();
    data.extend(gt.data().iter().map(|g| 1.0 - g));
    let probs = Tensor::new(vec![2, 8, 8], data).unwrap();
    let mut t = Tape::<f64>::new();
    let pv = t.constant(probs);
    let cv = t.constant(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
    let (terms, _) = total_loss(&mut t, pv, cv, &gt, &LossConfig::default(), None).map_err(e)?;
    let total = t.value(terms.total).item().unwrap();
    perfect = perfect.max(total);
    ensure!(perfect <= 1e-4, "perfect prediction loss {perfect:e}");

    let c = |alpha, gamma| LossConfig { alpha, gamma, ..Default::default() };
    let mut g16 = vec![0.0; 16];
    let mut p16 = vec![0.0; 16];
    g16[..4].fill(1.0);
    p16[2..6].fill(1.0);
    let a = Tensor::new(vec![2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
    let b = Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
    let examples = [
        ("focal 0.5", focal_value(&t1(0.5), &t1(1.0), &c(1.0, 0.0)).map_err(e)?, 0.69314718),
        ("focal 0.9", focal_value(&t1(0.9), &t1(1.0), &c(1.0, 2.0)).map_err(e)?, 1.0536e-3),
        ("dice identical", dice_value(&gt, &gt, &LossConfig::default()).map_err(e)?, 0.0),
        ("dice disjoint", dice_value(&a, &b, &LossConfig::default()).map_err(e)?, 1.0),
        (
            "dice half",
            dice_value(&Tensor::new(vec![4, 4], p16).unwrap(), &Tensor::new(vec![4, 4], g16).unwrap(), &LossConfig::default()).map_err(e)?,
            0.5,
        ),
    ];
    for (name, got, want) in examples {
        ensure!((got - want).abs() <= 1e-6, "{name}: {got} vs {want}");
    }
    ensure!(
        t.value(terms.total).item().unwrap() == t.value(terms.focal).item().unwrap() + t.value(terms.dice).item().unwrap() + t.value(terms.confidence).item().unwrap(),
        "total is not focal + dice + confidence"
    );
    Ok(format!("BCE gap {bce_gap:.1e}, perfect {perfect:.1e}, {} examples within 1e-6", examples.len()))
}

// Metrics

fn random_mask(r: &mut ChaCha8Rng, w: usize, h: usize) -> Mask {
    let density = r.gen_range(0.0..0.3);
    let mut d: Vec<bool> = (0..w * h).map(|_| r.gen_bool(density)).collect();
    for _ in 0..r.gen_range(0..3) {
        let (x0, y0) = (r.gen_range(0..w), r.gen_range(0..h));
        let (x1, y1) = (r.gen_range(x0..=w), r.gen_range(y0..=h));
        for y in y0..y1 {
            for x in x0..x1 {
                d[y * w + x] = true;
            }
        }
    }
    Mask::new(w, h, d).unwrap()
}

fn brute_surface(m: &Mask) -> Vec<(usize, usize)> {
    let (w, h) = (m.width as i64, m.height as i64);
    let fg = |x: i64, y: i64| x >= 0 && y >= 0 && x < w && y < h && m.data[(y * w + x) as usize];
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let edge = x == 0 || y == 0 || x == w - 1 || y == h - 1;
            if fg(x, y) && (edge || [(1, 0), (-1, 0), (0, 1), (0, -1)].iter().any(|&(dx, dy)| !fg(x + dx, y + dy))) {
                out.push((x as usize, y as usize));
            }
        }
    }
    out
}

fn nearest(p: (usize, usize), to: &[(usize, usize)], s: (f64, f64)) -> f64 {
    to.iter()
        .map(|&q| ((p.0 as f64 - q.0 as f64) * s.0).hypot((p.1 as f64 - q.1 as f64) * s.1))
        .fold(f64::INFINITY, f64::min)
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut r = rng(2024);
    let (mut surfaces, mut worst_msd, mut worst_hd): (usize, f64, f64) = (0, 0.0, 0.0);
    for case in 0..500 {
        let (w, h) = (r.gen_range(1..=32), r.gen_range(1..=32));
        let gt = random_mask(&mut r, w, h);
        let pred = random_mask(&mut r, w, h);
        let spacing = if case % 2 == 0 { (1.0, 1.0) } else { (r.gen_range(0.3..2.0), r.gen_range(0.3..2.0)) };

        let g: BTreeSet<usize> = (0..w * h).filter(|&i| gt.data[i]).collect();
        let p: BTreeSet<usize> = (0..w * h).filter(|&i| pred.data[i]).collect();
        let inter = g.intersection(&p).count() as f64;
        let union = g.union(&p).count() as f64;
        let dc_ref = if g.len() + p.len() == 0 { 1.0 } else { 2.0 * inter / (g.len() + p.len()) as f64 };
        let iou_ref = if union == 0.0 { 1.0 } else { inter / union };
        let dc = dice_coef(&gt, &pred).map_err(|e| e.to_string())?.value;
        let io = iou(&gt, &pred).map_err(|e| e.to_string())?.value;
        ensure!(dc == dc_ref && io == iou_ref, "case {case}: overlap {dc}/{io} vs {dc_ref}/{iou_ref}");
        ensure!((dc - 2.0 * io / (1.0 + io)).abs() <= 1e-12, "case {case}: DC/IoU identity");

        let sg = extract_surface(&gt, SurfaceSource::Gt);
        let sp = extract_surface(&pred, SurfaceSource::Pred);
        ensure!(sg.points == brute_surface(&gt) && sp.points == brute_surface(&pred), "case {case}: surface");
        let Some(d) = surface_distances(&sg, &sp, w, h, spacing, 95.0) else {
            ensure!(sg.points.is_empty() || sp.points.is_empty(), "case {case}: distances missing");
            continue;
        };
        let da: Vec<f64> = sg.points.iter().map(|&q| nearest(q, &sp.points, spacing)).collect();
        let db: Vec<f64> = sp.points.iter().map(|&q| nearest(q, &sg.points, spacing)).collect();
        let msd = (da.iter().sum::<f64>() + db.iter().sum::<f64>()) / (da.len() + db.len()) as f64;
        let hd = da.iter().chain(&db).copied().fold(0.0, f64::max);
        worst_msd = worst_msd.max((d.msd - msd).abs());
        worst_hd = worst_hd.max((d.hd100 - hd).abs());
        ensure!((d.msd - msd).abs() <= 1e-9, "case {case}: msd {} vs {msd}", d.msd);
        ensure!((d.hd100 - hd).abs() <= 1e-9, "case {case}: hd {} vs {hd}", d.hd100);
        let literal = hd95(&sg, &sp, w, h, spacing, 100.0).unwrap();
        ensure!((literal - hd).abs() <= 1e-9, "case {case}: literal hausdorff");
        ensure!(d.hd <= d.hd100, "case {case}: hd95 {} > hd100 {}", d.hd, d.hd100);
        surfaces += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 120.0, "runtime {secs:.1} s");
    Ok(format!("500 pairs ({surfaces} with surfaces), msd gap {worst_msd:.1e}, hd gap {worst_hd:.1e}, {secs:.2} s"))
}

// Preprocessing

fn crafted_volume(dir: &std::path::Path, id: &str) {
    let (z, y, x) = (3, 100, 100);
    let vox = vec![900i16; z * y * x];
    let mut lab = vec![0i16; z * y * x];
    for (slice, count) in [(0usize, 99usize), (1, 100)] {
        for i in 0..count {
            lab[slice * y * x + i] = 1;
        }
    }
    CtVolume::new(id, [z, y, x], [1.0, 1.0, 1.0], vox).unwrap().save(dir, id).unwrap();
    CtVolume::new(labels_stem(id), [z, y, x], [1.0, 1.0, 1.0], lab).unwrap().save(dir, &labels_stem(id)).unwrap();
}

fn preprocessing() -> Outcome {
    let bone = WindowConfig::bone();
    let lo = bone.level - bone.width / 2.0;
    let hi = bone.level + bone.width / 2.0;
    let boundary = [(lo, 0.0), (lo - 1.0, 0.0), (hi, 1.0), (hi + 1.0, 1.0), (bone.level, 0.5), (850.0, 0.75)];
    for (hu, want) in boundary {
        ensure!(bone.apply(hu) == want, "window({hu}) = {} != {want}", bone.apply(hu));
    }

    let input = tempfile::tempdir().map_err(|e| e.to_string())?;
    for id in ["craftA", "craftB"] {
        crafted_volume(input.path(), id);
    }
    let cfg = PreprocessConfig { size: 16, split_ratio: 0.5, ..PreprocessConfig::default() };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let m1 = run(&cfg, input.path(), a.path()).map_err(|e| e.to_string())?;
    let m2 = run(&cfg, input.path(), b.path()).map_err(|e| e.to_string())?;
    for r in &m1.records {
        let want = match (r.plane, r.index) {
            (Plane::Axial, 0) => Some(DropReason::Area),
            (Plane::Axial, 1) => None,
            (Plane::Axial, _) => Some(DropReason::Area),
            _ => Some(DropReason::Aspect),
        };
        ensure!(r.filter.reason == want && r.filter.keep == want.is_none(), "{} {:?} {}: {:?}", r.volume_id, r.plane, r.index, r.filter);
    }
    ensure!(m1.kept == 2, "kept {}", m1.kept);
    ensure!(m1.hash == m2.hash, "manifest hash differs between identical runs");
    let c = tempfile::tempdir().unwrap();
    let m3 = run(&PreprocessConfig { seed: 1, ..cfg.clone() }, input.path(), c.path()).map_err(|e| e.to_string())?;
    ensure!(m3.hash != m1.hash, "seed does not enter the manifest hash");

    let mut recs: Vec<SliceRecord> = (0..120)
        .flat_map(|v| {
            (0..3).map(move |i| SliceRecord {
                volume_id: format!("vol{v:03}"),
                plane: Plane::Axial,
                index: i,
                height: 1,
                width: 1,
                image: vec![0.0],
                mask: vec![0],
                split: None,
            })
        })
        .collect();
    split_dataset(&mut recs, 0.8, 9, SplitUnit::Volume).map_err(|e| e.to_string())?;
    let side = |s: Split| recs.iter().filter(|r| r.split == Some(s)).map(|r| r.volume_id.clone()).collect::<BTreeSet<_>>();
    let (train, test) = (side(Split::Train), side(Split::Test));
    ensure!((train.len(), test.len()) == (96, 24), "split {}/{}", train.len(), test.len());
    ensure!(train.is_disjoint(&test), "volume leakage");
    Ok(format!("window boundaries exact, crafted filters ok ({} records), split 96/24 disjoint, hash {}", m1.records.len(), &m1.hash[..12]))
}

// Interactive training

fn interactive_training() -> Outcome {
    let start = Instant::now();
    let data = fixtures::training_set(&PhantomConfig::default());
    ensure!(data.len() == 32 && data[0].image.shape() == [64, 64], "fixture set shape");
    let mut model = SegModel::new(ModelConfig::toy(), 0).map_err(|e| e.to_string())?;
    let cfg = TrainConfig { target_dice: Some(0.95), eval_every: 5, ..TrainConfig::default() };
    let rounds = cfg.rounds_per_sample;
    let report = Trainer::new(cfg.clone()).and_then(|mut t| t.train(&mut model, &data)).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let ev = &report.final_eval;
    ensure!(report.epochs_run <= 200, "{} epochs", report.epochs_run);
    ensure!(ev.final_dice >= 0.95, "train Dice {:.4} after {} epochs", ev.final_dice, report.epochs_run);
    ensure!(secs < 900.0, "runtime {secs:.0} s");
    let expected_checks = report.epochs_run * data.len() * (rounds - 1);
    ensure!(report.freeze_checks == expected_checks, "{} freeze checks, expected {expected_checks}", report.freeze_checks);
    for w in ev.round_dice.windows(2) {
        ensure!(w[1] >= w[0] - 0.005, "per-round Dice decreases: {:?}", ev.round_dice);
    }

    // independent check: a decoder-only epoch leaves every other parameter bit-identical
    let others = |m: &SegModel| m.store.hash_where(|n| !is_decoder_param(n));
    let (before, dec_before) = (others(&model), model.store.hash_where(is_decoder_param));
    let phase = TrainConfig { epochs: 1, refinement: Refinement::EpochPhase { full_epochs: 0 }, ..cfg };
    Trainer::new(phase).and_then(|mut t| t.train(&mut model, &data[..4])).map_err(|e| e.to_string())?;
    ensure!(others(&model) == before, "decoder-only epoch changed non-decoder parameters");
    ensure!(model.store.hash_where(is_decoder_param) != dec_before, "decoder-only epoch did not update the decoder");
    let rd: Vec<String> = ev.round_dice.iter().map(|d| format!("{d:.4}")).collect();
    Ok(format!(
        "train Dice {:.4} at epoch {}, rounds [{}], {} freeze checks, {secs:.0} s",
        ev.final_dice,
        report.epochs_run,
        rd.join(", "),
        report.freeze_checks
    ))
}

// Command protocol

fn score(cases: &[Case]) -> usize {
    cases
        .iter()
        .filter(|c| matches!(parse_command(&c.text), Ok(op) if op.op == c.op && op.category == c.op.category() && op.slots == c.slots))
        .count()
}

fn mock(reply: &'static str, delay: Duration) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/parse", listener.local_addr().unwrap());
    std::thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut len = 0usize;
        loop {
            let mut line = String::new();
            if reader.read_line(&mut line).is_err() || line == "\r\n" || line.is_empty() {
                break;
            }
            if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                len = v.trim().parse().unwrap_or(0);
            }
        }
        let mut body = vec![0; len];
        let _ = reader.read_exact(&mut body);
        std::thread::sleep(delay);
        let mut stream = stream;
        let _ = write!(
            stream,
            "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
            reply.len(),
            reply
        );
    });
    url
}

fn command_protocol() -> Outcome {
    let canonical = corpus::canonical();
    let hits = score(&canonical);
    ensure!(hits == canonical.len(), "canonical {hits}/{}", canonical.len());
    for op in spine_command::OpName::ALL {
        let n = canonical.iter().filter(|c| c.op == op).map(|c| c.text.as_str()).collect::<BTreeSet<_>>().len();
        ensure!(n >= 4, "{op} has {n} phrasings");
    }
    let para = corpus::paraphrase();
    ensure!(para.len() >= 105, "paraphrase corpus has {}", para.len());
    let ph = score(&para);
    let acc = ph as f64 / para.len() as f64;
    ensure!(acc >= 0.90, "paraphrase accuracy {acc:.4}");

    let g = Grammar::load_default();
    let texts: Vec<String> = canonical.iter().chain(&para).map(|c| c.text.clone()).collect();
    let _ = measure_parse_latency(g, &texts);
    let lat = measure_parse_latency(g, &texts);
    let p99 = lat.p99().ok_or("no latency samples")?;
    ensure!(p99 < 10.0, "p99 {p99:.3} ms");

    const TEXT: &str = "Add three points to the vertebral body";
    const VALID: &str = r#"{"category":"point_ops","op":"add_points","slots":{"count":3,"region":"vertebral body"},"confidence":0.9,"source":"remote_llm"}"#;
    let cfg = |url: String, timeout_ms| LlmClientConfig { timeout_ms, ..LlmClientConfig::new(url) };
    let grammar_op = parse_command(TEXT).map_err(|e| e.to_string())?;
    let valid = parse_via_llm(TEXT, &cfg(mock(VALID, Duration::ZERO), 2000), g).map_err(|e| e.to_string())?;
    ensure!(valid.fallback.is_none() && valid.op.source == OpSource::RemoteLlm, "valid reply not used");
    ensure!(valid.op.same_meaning(&grammar_op), "remote op differs from grammar op");
    let bad = parse_via_llm(TEXT, &cfg(mock("{\"op\": add_", Duration::ZERO), 2000), g).map_err(|e| e.to_string())?;
    ensure!(bad.fallback == Some(FallbackReason::InvalidJson) && bad.op == grammar_op, "malformed reply: {:?}", bad.fallback);
    let t = Instant::now();
    let slow = parse_via_llm(TEXT, &cfg(mock(VALID, Duration::from_millis(1500)), 300), g).map_err(|e| e.to_string())?;
    let waited = t.elapsed().as_millis();
    ensure!(slow.fallback == Some(FallbackReason::Timeout) && slow.op == grammar_op, "timeout: {:?}", slow.fallback);
    ensure!(waited < 350, "timeout fallback took {waited} ms");
    Ok(format!(
        "canonical {hits}/{}, paraphrase {ph}/{} = {:.1}%, p99 {p99:.3} ms, mock valid/malformed/timeout ({waited} ms) ok",
        canonical.len(),
        para.len(),
        100.0 * acc
    ))
}

// Service contract

fn service_contract() -> Outcome {
    let (_dir, svc) = common::service(ServiceConfig::default());
    let e = |x: spine_service::ServiceError| x.to_string();
    let id = svc.create_session(Some(common::first_image())).map_err(e)?.id;
    svc.execute_command(&id, "Add three points").map_err(e)?;
    for (x, y) in [(30, 30), (26, 34), (34, 22)] {
        svc.add_point(&id, x, y, None).map_err(e)?;
    }
    svc.execute_command(&id, "Generate segmentation mask").map_err(e)?;
    svc.undo(&id).map_err(e)?;
    let log = svc.events(&id).map_err(e)?;
    let text = serde_json::to_string(&log).map_err(|x| x.to_string())?;
    let parsed: Vec<spine_service::Event> = serde_json::from_str(&text).map_err(|x| x.to_string())?;
    let original = svc.fingerprint(&id).map_err(e)?;
    let a = svc.replay(&parsed).map_err(e)?.fingerprint();
    let b = svc.replay(&parsed).map_err(e)?.fingerprint();
    ensure!(a == original && b == original, "replayed state differs from the live session");

    let warm = svc.create_session(Some(common::first_image())).map_err(e)?.id;
    svc.execute_command(&warm, "add a point at (32, 30)").map_err(e)?;
    svc.segment(&warm).map_err(e)?;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let t = Instant::now();
        let r = svc.segment(&warm).map_err(e)?;
        ensure!(r.cache_hit, "warm segment missed the cache");
        worst = worst.max(t.elapsed().as_secs_f64() * 1e3);
    }
    ensure!(worst < 800.0, "warm segment {worst:.1} ms");

    let checked = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|x| x.to_string())?
        .block_on(http_contract())?;
    Ok(format!("replay fingerprint equal over {} events, warm segment max {worst:.1} ms, {checked} replies schema-valid", log.len()))
}

async fn http_contract() -> Result<usize, String> {
    let (_dir, svc) = common::service(ServiceConfig::default());
    let app = common::router(&svc);
    let mut checked = 0;
    let mut expect = |r: &common::Reply, status: u16, def: &str| -> Result<Value, String> {
        ensure!(r.status.as_u16() == status, "{def}: status {} ({})", r.status, String::from_utf8_lossy(&r.bytes));
        let v: Value = serde_json::from_slice(&r.bytes).map_err(|x| x.to_string())?;
        let errors: Vec<String> = common::validator(def).iter_errors(&v).map(|x| x.to_string()).collect();
        ensure!(errors.is_empty(), "{def}: {}", errors.join("; "));
        checked += 1;
        Ok(v)
    };
    use common::call;
    expect(&call(&app, "GET", "/healthz", None).await, 200, "Health")?;
    let body = json!({ "image": common::first_image() }).to_string();
    let created = expect(&call(&app, "POST", "/sessions", Some(&body)).await, 201, "CreateReply")?;
    let id = created["id"].as_str().ok_or("no id")?.to_string();
    let u = |p: &str| format!("/sessions/{id}/{p}");
    expect(&call(&app, "POST", &u("command"), Some(r#"{"text":"Add two points"}"#)).await, 200, "CommandReply")?;
    expect(&call(&app, "POST", &u("points"), Some(r#"{"x":30,"y":30}"#)).await, 200, "StateReply")?;
    expect(&call(&app, "POST", &u("points"), Some(r#"{"x":28,"y":36,"label":"positive"}"#)).await, 200, "StateReply")?;
    let rejected = expect(&call(&app, "POST", &u("points"), Some(r#"{"x":2,"y":2}"#)).await, 409, "ErrorReply")?;
    ensure!(rejected["error"]["remaining"] == 0, "rejection without remaining 0");
    expect(&call(&app, "POST", &u("box"), Some(r#"{"x_min":10,"y_min":10,"x_max":50,"y_max":54}"#)).await, 200, "StateReply")?;
    let gen = expect(&call(&app, "POST", &u("command"), Some(r#"{"text":"Generate segmentation mask"}"#)).await, 200, "CommandReply")?;
    ensure!(gen["mask"].is_object(), "generate returned no mask");
    expect(&call(&app, "POST", &u("segment"), None).await, 200, "SegmentReply")?;
    let png = call(&app, "GET", &u("mask.png"), None).await;
    ensure!(png.status == 200 && png.content_type.as_deref() == Some("image/png") && png.bytes.starts_with(b"\x89PNG"), "mask.png");
    expect(&call(&app, "GET", &u("state"), None).await, 200, "StateReply")?;
    expect(&call(&app, "POST", &u("undo"), None).await, 200, "UndoReply")?;
    expect(&call(&app, "POST", &u("command"), Some(r#"{"text":"rotate the volume"}"#)).await, 422, "ErrorReply")?;
    expect(&call(&app, "POST", &u("points"), Some("{bad")).await, 400, "ErrorReply")?;
    expect(&call(&app, "POST", &u("box"), Some(r#"{"x_min":9,"y_min":9,"x_max":3,"y_max":20}"#)).await, 422, "ErrorReply")?;
    expect(&call(&app, "GET", "/sessions/missing/state", None).await, 404, "ErrorReply")?;
    Ok(checked)
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient integrity", gradient_integrity),
        ("lora contract", lora_contract),
        ("cbam contract", cbam_contract),
        ("loss suite", loss_suite),
        ("metric oracle equivalence", metric_oracles),
        ("preprocessing", preprocessing),
        ("interactive training", interactive_training),
        ("command protocol", command_protocol),
        ("service contract", service_contract),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(reason) => {
                failed += 1;
                println!("FAIL {name}: {reason}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
