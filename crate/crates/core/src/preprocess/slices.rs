use serde::{Deserialize, Serialize};

use super::volume::CtVolume;
use super::window::WindowConfig;
use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    Sagittal,
    Coronal,
    Axial,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Sagittal, Plane::Coronal, Plane::Axial];

    /// `sag`/`sagittal`, `cor`/`coronal`, `ax`/`axial`.
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sag" | "sagittal" => Ok(Plane::Sagittal),
            "cor" | "coronal" => Ok(Plane::Coronal),
            "ax" | "axial" => Ok(Plane::Axial),
            other => Err(CoreError::Config(format!("unknown plane `{other}`"))),
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            Plane::Sagittal => "sag",
            Plane::Coronal => "cor",
            Plane::Axial => "ax",
        }
    }

    /// Number of slices along this plane for `[D, H, W]` dims.
    pub fn count(self, dims: [usize; 3]) -> usize {
        match self {
            Plane::Axial => dims[0],
            Plane::Coronal => dims[1],
            Plane::Sagittal => dims[2],
        }
    }

    /// `(rows, cols)` of one slice.
    pub fn slice_shape(self, dims: [usize; 3]) -> (usize, usize) {
        let [d, h, w] = dims;
        match self {
            Plane::Axial => (h, w),
            Plane::Coronal => (d, w),
            Plane::Sagittal => (d, h),
        }
    }

    /// Volume coordinate `(z, y, x)` of slice pixel `(row, col)`.
    pub fn voxel(self, index: usize, row: usize, col: usize) -> (usize, usize, usize) {
        match self {
            Plane::Axial => (index, row, col),
            Plane::Coronal => (row, index, col),
            Plane::Sagittal => (row, col, index),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceRecord {
    pub volume_id: String,
    pub plane: Plane,
    pub index: usize,
    pub height: usize,
    pub width: usize,
    /// Windowed intensities in `[0, 1]`, row-major.
    pub image: Vec<f64>,
    /// Binary target mask, row-major.
    pub mask: Vec<u8>,
    pub split: Option<Split>,
}

impl SliceRecord {
    pub fn foreground(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0).count()
    }
}

/// Raw cross-section `(rows, cols, values)` of `vol` along `plane`.
pub fn cross_section(vol: &CtVolume, plane: Plane, index: usize) -> (usize, usize, Vec<i16>) {
    let (rows, cols) = plane.slice_shape(vol.header.dims);
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let (z, y, x) = plane.voxel(index, r, c);
            out.push(vol.at(z, y, x));
        }
    }
    (rows, cols, out)
}

/// One record per index per requested plane, before filtering. The mask is
/// `labels == target_label`.
pub fn extract_slices(
    vol: &CtVolume,
    labels: &CtVolume,
    target_label: i16,
    planes: &[Plane],
    window: &WindowConfig,
) -> Result<Vec<SliceRecord>> {
    if vol.header.dims != labels.header.dims {
        return Err(CoreError::Shape(format!(
            "volume dims {:?} differ from label dims {:?}",
            vol.header.dims, labels.header.dims
        )));
    }
    let offset = vol.header.hu_offset as f64;
    let mut out = Vec::new();
    for &plane in planes {
        for index in 0..plane.count(vol.header.dims) {
            let (rows, cols, raw) = cross_section(vol, plane, index);
            let (_, _, lab) = cross_section(labels, plane, index);
            out.push(SliceRecord {
                volume_id: vol.id.clone(),
                plane,
                index,
                height: rows,
                width: cols,
                image: raw.iter().map(|&v| window.apply(v as f64 + offset)).collect(),
                mask: lab.iter().map(|&l| u8::from(l == target_label)).collect(),
                split: None,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropReason {
    Aspect,
    Area,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub keep: bool,
    pub reason: Option<DropReason>,
}

/// Drop when `min(H, W) < max(H, W) / 2`, else when the foreground area is
/// below `min_area_frac · H · W`. Both comparisons are strict.
pub fn filter_slice(height: usize, width: usize, foreground: usize, min_area_frac: f64) -> FilterDecision {
    let drop = |r| FilterDecision {
        keep: false,
        reason: Some(r),
    };
    if (height.min(width) as f64) < 0.5 * height.max(width) as f64 {
        return drop(DropReason::Aspect);
    }
    if (foreground as f64) < min_area_frac * (height * width) as f64 {
        return drop(DropReason::Area);
    }
    FilterDecision { keep: true, reason: None }
}
