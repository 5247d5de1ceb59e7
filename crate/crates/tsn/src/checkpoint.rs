//! TSNC checkpoints: a JSON manifest followed by one TSNT blob per tensor.
//!
//! ```text
//! "TSNC" | version: u32 LE | manifest length: u32 LE | JSON manifest | TSNT blobs
//! ```
//!
//! The manifest lists the model settings as `key = value` pairs and, for
//! every tensor, its byte offset and length within the blob section.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tsn_core::model::Model;
use tsn_core::params::ParamSet;
use tsn_core::{ModelConfig, Scalar};

use crate::error::{Result, TsnError};
use crate::tensor_io::{encode_tensor, read_tensor};

pub const TSNC_MAGIC: [u8; 4] = *b"TSNC";
pub const TSNC_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode_checkpoint<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    let mut blobs = Vec::new();
    let mut tensors = Vec::new();
    for (_, name, t) in model.params().iter() {
        let blob = encode_tensor(name, t);
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: T::DTYPE.name().to_string(),
            offset: blobs.len(),
            length: blob.len(),
        });
        blobs.extend_from_slice(&blob);
    }
    let config = model
        .config()
        .to_pairs()
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    let json = serde_json::to_vec(&Manifest { config, tensors }).expect("manifest serializes");
    let mut out = Vec::with_capacity(12 + json.len() + blobs.len());
    out.extend_from_slice(&TSNC_MAGIC);
    out.extend_from_slice(&TSNC_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blobs);
    out
}

pub fn save_checkpoint<T: Scalar>(path: &Path, model: &Model<T>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)).map_err(|e| TsnError::io(path, e))
}

/// Rebuilds a model from checkpoint bytes, converting stored tensors to `T`.
pub fn decode_checkpoint<T: Scalar>(path: &Path, bytes: &[u8]) -> Result<Model<T>> {
    let bad = |m: String| TsnError::format(path, m);
    if bytes.len() < 12 || bytes[..4] != TSNC_MAGIC {
        return Err(bad("not a TSNC checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != TSNC_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = bytes.get(12..12 + len).ok_or_else(|| bad("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(body).map_err(|e| bad(format!("manifest: {e}")))?;
    let blobs = &bytes[12 + len..];

    let mut cfg = ModelConfig::default();
    for (k, v) in &manifest.config {
        cfg.set(k, v)?;
    }
    let mut params = ParamSet::new();
    for entry in &manifest.tensors {
        let blob = entry
            .offset
            .checked_add(entry.length)
            .and_then(|end| blobs.get(entry.offset..end))
            .ok_or_else(|| bad(format!("tensor {} lies outside the file", entry.name)))?;
        let (name, tensor) = read_tensor(&mut &blob[..]).map_err(|e| bad(format!("tensor {}: {e}", entry.name)))?;
        if name != entry.name || tensor.shape() != entry.shape.as_slice() {
            return Err(bad(format!("tensor {} disagrees with the manifest", entry.name)));
        }
        params.push(&name, tensor.cast());
    }
    Ok(Model::with_params(cfg, params)?)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let bytes = std::fs::read(path).map_err(|e| TsnError::io(path, e))?;
    decode_checkpoint(path, &bytes)
}
