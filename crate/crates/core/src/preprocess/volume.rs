//! Volume files: raw little-endian `int16` voxels (`<id>.raw`) with a JSON
//! sidecar (`<id>.json`) holding `{dims: [D, H, W], spacing_mm: [sx, sy, sz],
//! hu_offset}`. Stored value plus `hu_offset` gives HU. Label volumes use the
//! same layout under `<id>.labels.raw` / `<id>.labels.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    /// `[depth, height, width]`, i.e. `[z, y, x]`.
    pub dims: [usize; 3],
    /// `[sx, sy, sz]` in millimetres.
    pub spacing_mm: [f64; 3],
    #[serde(default)]
    pub hu_offset: i32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CtVolume {
    pub id: String,
    pub header: VolumeHeader,
    pub voxels: Vec<i16>,
}

impl CtVolume {
    pub fn new(id: impl Into<String>, dims: [usize; 3], spacing_mm: [f64; 3], voxels: Vec<i16>) -> Result<Self> {
        let v = Self {
            id: id.into(),
            header: VolumeHeader {
                dims,
                spacing_mm,
                hu_offset: 0,
            },
            voxels,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        let [d, h, w] = self.header.dims;
        if d == 0 || h == 0 || w == 0 {
            return Err(CoreError::Format(format!("volume `{}` has a zero dimension", self.id)));
        }
        if self.header.spacing_mm.iter().any(|&s| !(s > 0.0)) {
            return Err(CoreError::Format(format!("volume `{}` spacing must be positive", self.id)));
        }
        if self.voxels.len() != d * h * w {
            return Err(CoreError::Format(format!(
                "volume `{}` holds {} voxels, header says {}",
                self.id,
                self.voxels.len(),
                d * h * w
            )));
        }
        Ok(())
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> i16 {
        let [_, h, w] = self.header.dims;
        self.voxels[(z * h + y) * w + x]
    }

    pub fn hu(&self, z: usize, y: usize, x: usize) -> f64 {
        self.at(z, y, x) as f64 + self.header.hu_offset as f64
    }

    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut raw = Vec::with_capacity(self.voxels.len() * 2);
        for v in &self.voxels {
            raw.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(dir.join(format!("{stem}.raw")), raw)?;
        fs::write(dir.join(format!("{stem}.json")), serde_json::to_vec_pretty(&self.header)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>, stem: &str) -> Result<Self> {
        let dir = dir.as_ref();
        let header: VolumeHeader = serde_json::from_slice(&fs::read(dir.join(format!("{stem}.json")))?)?;
        let raw = fs::read(dir.join(format!("{stem}.raw")))?;
        if raw.len() % 2 != 0 {
            return Err(CoreError::Format(format!("`{stem}.raw` has odd length")));
        }
        let voxels = raw.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])).collect();
        let v = Self {
            id: stem.to_string(),
            header,
            voxels,
        };
        v.validate()?;
        Ok(v)
    }
}

/// Volume ids in `dir`: every `<id>.json` that is not a label sidecar.
pub fn list_volumes(dir: impl AsRef<Path>) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path: PathBuf = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(stem) = name.strip_suffix(".json") {
            if !stem.ends_with(".labels") {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn labels_stem(id: &str) -> String {
    format!("{id}.labels")
}
