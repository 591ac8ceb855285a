//! Parameter checkpoint file.
//!
//! Layout (all integers little-endian):
//!
//! | bytes            | content                                   |
//! |------------------|-------------------------------------------|
//! | 0..8             | magic `SPNCKPT1`                          |
//! | 8..16            | `u64` length `N` of the JSON index        |
//! | 16..16+N         | UTF-8 JSON index                          |
//! | 16+N..           | data section: raw little-endian values    |
//!
//! The index is `{"tensors": {name: {"shape": [..], "dtype": "f32"|"f64",
//! "offset": bytes, "trainable": bool}}, "metadata": {..}}`. Offsets are
//! relative to the start of the data section; tensors are written in name
//! order with no padding.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NeuralError, Result};
use crate::params::ParamStore;
use crate::scalar::DType;
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 8] = b"SPNCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: u64,
    #[serde(default)]
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Index {
    pub tensors: BTreeMap<String, IndexEntry>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

pub fn to_bytes(store: &ParamStore, dtype: DType, metadata: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let mut index = Index {
        tensors: BTreeMap::new(),
        metadata: metadata.clone(),
    };
    let mut data = Vec::new();
    for (name, p) in store.iter() {
        index.tensors.insert(
            name.clone(),
            IndexEntry {
                shape: p.value.shape().to_vec(),
                dtype,
                offset: data.len() as u64,
                trainable: p.requires_grad,
            },
        );
        for &v in p.value.data() {
            match dtype {
                DType::F64 => data.extend_from_slice(&v.to_le_bytes()),
                DType::F32 => data.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
    }
    let header = serde_json::to_vec(&index)?;
    let mut out = Vec::with_capacity(16 + header.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn save(
    store: &ParamStore,
    path: impl AsRef<Path>,
    dtype: DType,
    metadata: &BTreeMap<String, String>,
) -> Result<()> {
    fs::write(path, to_bytes(store, dtype, metadata)?)?;
    Ok(())
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Index, BTreeMap<String, Tensor<f64>>)> {
    let bad = |m: &str| NeuralError::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic header"));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header = bytes.get(16..16 + n).ok_or_else(|| bad("truncated index"))?;
    let index: Index = serde_json::from_slice(header)?;
    let data = &bytes[16 + n..];
    let mut tensors = BTreeMap::new();
    for (name, e) in &index.tensors {
        let count = numel(&e.shape);
        let start = e.offset as usize;
        let end = start + count * e.dtype.size();
        let raw = data
            .get(start..end)
            .ok_or_else(|| NeuralError::Checkpoint(format!("tensor `{name}` runs past end of file")))?;
        let values: Vec<f64> = match e.dtype {
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
        };
        tensors.insert(name.clone(), Tensor::new(e.shape.clone(), values)?);
    }
    Ok((index, tensors))
}

pub fn load(path: impl AsRef<Path>) -> Result<(Index, BTreeMap<String, Tensor<f64>>)> {
    from_bytes(&fs::read(path)?)
}

/// Overwrite values in `store` from a checkpoint. Every parameter of the
/// store must be present with a matching shape; extra tensors are an error.
pub fn load_into(store: &mut ParamStore, path: impl AsRef<Path>) -> Result<Index> {
    let (index, tensors) = load(path)?;
    for name in store.names() {
        if !tensors.contains_key(name) {
            return Err(NeuralError::Checkpoint(format!("checkpoint lacks `{name}`")));
        }
    }
    for (name, t) in tensors {
        if !store.contains(&name) {
            return Err(NeuralError::Checkpoint(format!("unexpected tensor `{name}`")));
        }
        store.set_value(&name, t)?;
    }
    Ok(index)
}
