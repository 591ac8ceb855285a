//! Slice images under the service data directory.

use std::path::{Component, Path, PathBuf};

use spine_core::preprocess::{png_io, resize};
use spine_neural::Tensor;

use crate::error::ServiceError;

/// One loadable slice: its reference, pixels in `[0, 1]` and optional ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Slice {
    pub reference: String,
    pub image: Tensor<f64>,
    pub gt: Option<Vec<bool>>,
}

#[derive(Clone, Debug)]
pub struct ImageStore {
    root: PathBuf,
    size: usize,
}

impl ImageStore {
    /// Slices are resampled to `size x size`, the model input.
    pub fn new(root: impl Into<PathBuf>, size: usize) -> Self {
        Self { root: root.into(), size }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Resolve a reference relative to the data root, refusing escapes.
    pub fn resolve(&self, reference: &str) -> Result<PathBuf, ServiceError> {
        let rel = Path::new(reference);
        if reference.is_empty()
            || rel.is_absolute()
            || rel.components().any(|c| !matches!(c, Component::Normal(_) | Component::CurDir))
        {
            return Err(ServiceError::BadRequest(format!("image reference `{reference}` must be relative")));
        }
        Ok(self.root.join(rel))
    }

    /// The slice references behind `reference`: the file itself, or the sorted
    /// PNG files of a directory.
    pub fn stack(&self, reference: &str) -> Result<Vec<String>, ServiceError> {
        let path = self.resolve(reference)?;
        if path.is_file() {
            return Ok(vec![reference.trim_end_matches('/').to_string()]);
        }
        if path.is_dir() {
            let mut names: Vec<String> = std::fs::read_dir(&path)
                .map_err(|e| ServiceError::Internal(e.to_string()))?
                .filter_map(|e| e.ok())
                .filter(|e| e.path().extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .collect();
            names.sort();
            if names.is_empty() {
                return Err(ServiceError::NotFound(format!("no PNG slices in `{reference}`")));
            }
            let base = reference.trim_end_matches('/');
            return Ok(names.into_iter().map(|n| format!("{base}/{n}")).collect());
        }
        Err(ServiceError::NotFound(format!("image `{reference}` does not exist")))
    }

    /// Read a slice; a mask at the sibling `masks/` path is registered as ground truth.
    pub fn load(&self, reference: &str) -> Result<Slice, ServiceError> {
        let path = self.resolve(reference)?;
        if !path.is_file() {
            return Err(ServiceError::NotFound(format!("image `{reference}` does not exist")));
        }
        let (w, h, px) = png_io::read_gray(&path).map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        let values: Vec<f64> = px.iter().map(|&v| f64::from(v) / 255.0).collect();
        let s = self.size;
        let values = if (w, h) == (s, s) { values } else { resize::bilinear(&values, h, w, s, s) };
        let image = Tensor::new(vec![s, s], values).map_err(|e| ServiceError::Internal(e.to_string()))?;
        let gt = match gt_path(&path) {
            Some(p) if p.is_file() => {
                let (mw, mh, mk) = png_io::read_gray(&p).map_err(|e| ServiceError::BadRequest(e.to_string()))?;
                let bits: Vec<bool> = mk.iter().map(|&v| v >= 128).collect();
                Some(if (mw, mh) == (s, s) { bits } else { resize::nearest(&bits, mh, mw, s, s) })
            }
            _ => None,
        };
        Ok(Slice { reference: reference.to_string(), image, gt })
    }
}

/// `.../images/x.png` maps to `.../masks/x.png`.
fn gt_path(image: &Path) -> Option<PathBuf> {
    let parent = image.parent()?;
    if parent.file_name()? != "images" {
        return None;
    }
    Some(parent.parent()?.join("masks").join(image.file_name()?))
}

/// Write synthetic phantom slices as `images/*.png` with ground truth in `masks/*.png`.
pub fn write_phantom_slices(cfg: &spine_core::fixtures::PhantomConfig, dir: &Path) -> spine_core::Result<Vec<String>> {
    let window = spine_core::preprocess::WindowConfig::bone();
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let mut refs = Vec::new();
    for p in spine_core::fixtures::generate(cfg) {
        let s = p.sample(&window);
        let name = format!("{}.png", p.id);
        png_io::write_gray(&dir.join("images").join(&name), p.size, p.size, s.image.data())?;
        png_io::write_mask(&dir.join("masks").join(&name), p.size, p.size, &p.mask)?;
        refs.push(format!("images/{name}"));
    }
    Ok(refs)
}
