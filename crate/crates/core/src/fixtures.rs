//! Synthetic CT phantoms with known masks.
//!
//! Each slice holds a bright target ellipse (the structure to segment), a
//! smaller distractor ellipse (by default just as bright, so only the prompts
//! tell them apart) and Gaussian noise over a soft-tissue background, all in
//! Hounsfield units.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::preprocess::{window_normalize, WindowConfig};
use crate::trainer::Sample;
use spine_neural::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub size: usize,
    pub count: usize,
    pub seed: u64,
    pub background_hu: f64,
    pub target_hu: f64,
    pub distractor_hu: f64,
    pub noise_hu: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            size: 64,
            count: 32,
            seed: 7,
            background_hu: 40.0,
            target_hu: 900.0,
            distractor_hu: 900.0,
            noise_hu: 25.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub angle: f64,
}

impl Ellipse {
    /// Whether the centre of pixel `(x, y)` lies inside.
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let (dx, dy) = (x as f64 + 0.5 - self.cx, y as f64 + 0.5 - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phantom {
    pub id: String,
    pub size: usize,
    pub hu: Vec<i16>,
    pub mask: Vec<u8>,
    pub target: Ellipse,
    pub distractor: Ellipse,
}

impl Phantom {
    pub fn sample(&self, window: &WindowConfig) -> Sample {
        let s = self.size;
        let hu: Vec<f64> = self.hu.iter().map(|&v| v as f64).collect();
        let img = window_normalize(&hu, window);
        Sample {
            id: self.id.clone(),
            image: Tensor::new(vec![s, s], img).expect("phantom shape"),
            mask: Tensor::new(vec![s, s], self.mask.iter().map(|&m| m as f64).collect()).expect("phantom shape"),
        }
    }
}

fn random_ellipse(rng: &mut ChaCha8Rng, size: f64, r_lo: f64, r_hi: f64) -> Ellipse {
    let rx = rng.gen_range(r_lo..r_hi) * size;
    let ry = rng.gen_range(r_lo..r_hi) * size;
    let margin = rx.max(ry) + 2.0;
    Ellipse {
        cx: rng.gen_range(margin..size - margin),
        cy: rng.gen_range(margin..size - margin),
        rx,
        ry,
        angle: rng.gen_range(0.0..std::f64::consts::PI),
    }
}

fn overlaps(a: &Ellipse, b: &Ellipse) -> bool {
    let d = ((a.cx - b.cx).powi(2) + (a.cy - b.cy).powi(2)).sqrt();
    d < a.rx.max(a.ry) + b.rx.max(b.ry) + 2.0
}

pub fn generate(cfg: &PhantomConfig) -> Vec<Phantom> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.size;
    let size = n as f64;
    (0..cfg.count)
        .map(|i| {
            let target = random_ellipse(&mut rng, size, 0.12, 0.22);
            let distractor = loop {
                let d = random_ellipse(&mut rng, size, 0.07, 0.13);
                if !overlaps(&target, &d) {
                    break d;
                }
            };
            let mut hu = Vec::with_capacity(n * n);
            let mut mask = Vec::with_capacity(n * n);
            for y in 0..n {
                for x in 0..n {
                    let inside = target.contains(x, y);
                    let base = if inside {
                        cfg.target_hu
                    } else if distractor.contains(x, y) {
                        cfg.distractor_hu
                    } else {
                        cfg.background_hu
                    };
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    let noise = noise * cfg.noise_hu;
                    hu.push((base + noise).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16);
                    mask.push(u8::from(inside));
                }
            }
            Phantom {
                id: format!("phantom_{i:03}"),
                size: n,
                hu,
                mask,
                target,
                distractor,
            }
        })
        .collect()
}

/// The default 32-slice training fixture, bone-windowed.
pub fn training_set(cfg: &PhantomConfig) -> Vec<Sample> {
    let w = WindowConfig::bone();
    generate(cfg).iter().map(|p| p.sample(&w)).collect()
}

/// Phantom CT volumes (`depth x size x size`) with an ellipsoidal target
/// (label 1) and a distractor ellipsoid, written in the on-disk volume format.
pub fn write_volumes(cfg: &PhantomConfig, volumes: usize, depth: usize, dir: &std::path::Path) -> crate::Result<Vec<String>> {
    use crate::preprocess::volume::{labels_stem, CtVolume};
    std::fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (n, d) = (cfg.size, depth);
    let mut ids = Vec::with_capacity(volumes);
    for v in 0..volumes {
        let target = random_ellipse(&mut rng, n as f64, 0.12, 0.22);
        let distractor = loop {
            let e = random_ellipse(&mut rng, n as f64, 0.07, 0.13);
            if !overlaps(&target, &e) {
                break e;
            }
        };
        let (tz, tr) = (rng.gen_range(0.35..0.65) * d as f64, rng.gen_range(0.25..0.4) * d as f64);
        let (dz, dr) = (rng.gen_range(0.3..0.7) * d as f64, rng.gen_range(0.15..0.3) * d as f64);
        let mut hu = Vec::with_capacity(d * n * n);
        let mut labels = Vec::with_capacity(d * n * n);
        for z in 0..d {
            let zc = z as f64 + 0.5;
            let t_scale = 1.0 - ((zc - tz) / tr).powi(2);
            let d_scale = 1.0 - ((zc - dz) / dr).powi(2);
            for y in 0..n {
                for x in 0..n {
                    let inside = |e: &Ellipse, s: f64| s > 0.0 && Ellipse { rx: e.rx * s.sqrt(), ry: e.ry * s.sqrt(), ..*e }.contains(x, y);
                    let in_t = inside(&target, t_scale);
                    let base = if in_t {
                        cfg.target_hu
                    } else if inside(&distractor, d_scale) {
                        cfg.distractor_hu
                    } else {
                        cfg.background_hu
                    };
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    hu.push((base + noise * cfg.noise_hu).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16);
                    labels.push(i16::from(in_t));
                }
            }
        }
        let id = format!("phantom_vol_{v:03}");
        CtVolume::new(&id, [d, n, n], [0.5, 0.5, 1.0], hu)?.save(dir, &id)?;
        CtVolume::new(labels_stem(&id), [d, n, n], [0.5, 0.5, 1.0], labels)?.save(dir, &labels_stem(&id))?;
        ids.push(id);
    }
    Ok(ids)
}
