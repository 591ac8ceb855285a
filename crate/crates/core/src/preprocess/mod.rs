//! CT preprocessing: windowing, tri-planar slicing, filtering, splitting,
//! resizing and export with a reproducible manifest.

pub mod png_io;
pub mod resize;
pub mod slices;
pub mod split;
pub mod volume;
pub mod window;

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use resize::{bilinear, nearest, resize_bilinear};
pub use slices::{cross_section, extract_slices, filter_slice, DropReason, FilterDecision, Plane, SliceRecord, Split};
pub use split::{split_dataset, train_count, SplitUnit};
pub use volume::{labels_stem, list_volumes, CtVolume, VolumeHeader};
pub use window::{window_normalize, WindowConfig};

use crate::error::{CoreError, Result};
use crate::trainer::Sample;
use spine_neural::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub window: WindowConfig,
    pub planes: Vec<Plane>,
    pub min_area_frac: f64,
    pub split_ratio: f64,
    pub split_unit: SplitUnit,
    pub seed: u64,
    pub target_label: i16,
    pub size: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            window: WindowConfig::bone(),
            planes: Plane::ALL.to_vec(),
            min_area_frac: 0.01,
            split_ratio: 0.8,
            split_unit: SplitUnit::Volume,
            seed: 0,
            target_label: 1,
            size: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub volume_id: String,
    pub plane: Plane,
    pub index: usize,
    pub split: Option<Split>,
    pub source_height: usize,
    pub source_width: usize,
    pub foreground: usize,
    pub filter: FilterDecision,
    pub image: Option<String>,
    pub mask: Option<String>,
    /// SHA-256 over the exported 8-bit image bytes followed by the mask bytes.
    pub content_sha256: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: PreprocessConfig,
    pub records: Vec<ManifestRecord>,
    pub kept: usize,
    pub dropped_aspect: usize,
    pub dropped_area: usize,
    pub train: usize,
    pub test: usize,
    /// SHA-256 of the JSON serialisation of `config` and `records`.
    pub hash: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Manifest {
    pub fn compute_hash(config: &PreprocessConfig, records: &[ManifestRecord]) -> Result<String> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(config)?);
        h.update(serde_json::to_vec(records)?);
        Ok(hex(&h.finalize()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

fn image_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// Extract, filter, split, resize and export every volume in `input`.
/// Writes `images/`, `masks/` and `manifest.json` under `out`.
pub fn run(cfg: &PreprocessConfig, input: &Path, out: &Path) -> Result<Manifest> {
    let ids = list_volumes(input)?;
    if ids.is_empty() {
        return Err(CoreError::Empty(format!("no volumes found in {}", input.display())));
    }
    let mut all = Vec::new();
    for id in &ids {
        let vol = CtVolume::load(input, id)?;
        let labels = CtVolume::load(input, &labels_stem(id))?;
        let mut vol = vol;
        vol.id = id.clone();
        all.extend(extract_slices(&vol, &labels, cfg.target_label, &cfg.planes, &cfg.window)?);
    }
    split_dataset(&mut all, cfg.split_ratio, cfg.seed, cfg.split_unit)?;
    std::fs::create_dir_all(out.join("images"))?;
    std::fs::create_dir_all(out.join("masks"))?;

    let mut records = Vec::with_capacity(all.len());
    for rec in &all {
        let filter = filter_slice(rec.height, rec.width, rec.foreground(), cfg.min_area_frac);
        let mut entry = ManifestRecord {
            volume_id: rec.volume_id.clone(),
            plane: rec.plane,
            index: rec.index,
            split: rec.split,
            source_height: rec.height,
            source_width: rec.width,
            foreground: rec.foreground(),
            filter,
            image: None,
            mask: None,
            content_sha256: None,
        };
        if filter.keep {
            let r = resize_bilinear(rec, cfg.size)?;
            let stem = format!("{}_{}_{:04}", r.volume_id, r.plane.short(), r.index);
            let img = image_bytes(&r.image);
            let image = format!("images/{stem}.png");
            let mask = format!("masks/{stem}.png");
            png_io::write_gray8(&out.join(&image), r.width, r.height, &img)?;
            png_io::write_mask(&out.join(&mask), r.width, r.height, &r.mask)?;
            let mut h = Sha256::new();
            h.update(&img);
            h.update(&r.mask);
            entry.image = Some(image);
            entry.mask = Some(mask);
            entry.content_sha256 = Some(hex(&h.finalize()));
        }
        records.push(entry);
    }
    let count = |f: &dyn Fn(&ManifestRecord) -> bool| records.iter().filter(|r| f(r)).count();
    let manifest = Manifest {
        config: cfg.clone(),
        kept: count(&|r| r.filter.keep),
        dropped_aspect: count(&|r| r.filter.reason == Some(DropReason::Aspect)),
        dropped_area: count(&|r| r.filter.reason == Some(DropReason::Area)),
        train: count(&|r| r.filter.keep && r.split == Some(Split::Train)),
        test: count(&|r| r.filter.keep && r.split == Some(Split::Test)),
        hash: Manifest::compute_hash(cfg, &records)?,
        records,
    };
    std::fs::write(out.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Load the kept records of one split from a preprocessed directory.
pub fn load_split(dir: &Path, split: Option<Split>) -> Result<Vec<Sample>> {
    let manifest = Manifest::load(dir.join("manifest.json"))?;
    let mut out = Vec::new();
    for r in manifest.records.iter().filter(|r| r.filter.keep) {
        if split.is_some() && r.split != split {
            continue;
        }
        let (Some(img), Some(mask)) = (&r.image, &r.mask) else { continue };
        let (w, h, px) = png_io::read_gray(&dir.join(img))?;
        let (mw, mh, mk) = png_io::read_gray(&dir.join(mask))?;
        if (w, h) != (mw, mh) {
            return Err(CoreError::Shape(format!("image and mask sizes differ for {img}")));
        }
        out.push(Sample {
            id: format!("{}_{}_{:04}", r.volume_id, r.plane.short(), r.index),
            image: Tensor::new(vec![h, w], px.iter().map(|&v| v as f64 / 255.0).collect())?,
            mask: Tensor::new(vec![h, w], mk.iter().map(|&v| f64::from(u8::from(v >= 128))).collect())?,
        });
    }
    Ok(out)
}
