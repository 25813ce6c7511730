//! Checkpoint files: a JSON manifest next to a flat little-endian `f64` blob.
//!
//! Manifest (`<stem>.json`):
//!
//! ```json
//! {
//!   "format": "permon-checkpoint",
//!   "version": 1,
//!   "scalar_type": "f64",
//!   "byte_order": "little",
//!   "data_file": "<stem>.bin",
//!   "metadata": { ... },
//!   "tensors": [ { "name": "...", "shape": [r, c], "offset": 0, "len": r*c } ]
//! }
//! ```
//!
//! `offset` and `len` count scalars, not bytes. Tensors are stored row-major
//! in manifest order with no padding.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{NnError, ParamStore, Tensor};

pub const FORMAT_NAME: &str = "permon-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub scalar_type: String,
    pub byte_order: String,
    pub data_file: String,
    #[serde(default)]
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Returns `(manifest_path, data_path)` for a checkpoint path with or without extension.
pub fn checkpoint_paths(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("json"), path.with_extension("bin"))
}

pub fn save(path: &Path, params: &ParamStore, metadata: serde_json::Value) -> Result<(), NnError> {
    let (manifest_path, data_path) = checkpoint_paths(path);
    let mut tensors = Vec::with_capacity(params.len());
    let mut bytes = Vec::with_capacity(params.num_scalars() * 8);
    let mut offset = 0;
    for (name, t) in params.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            len: t.len(),
        });
        offset += t.len();
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        scalar_type: "f64".into(),
        byte_order: "little".into(),
        data_file: data_path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        metadata,
        tensors,
    };
    if let Some(parent) = manifest_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(&data_path, bytes)?;
    fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Manifest, NnError> {
    let (manifest_path, _) = checkpoint_paths(path);
    let manifest: Manifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
    if manifest.format != FORMAT_NAME || manifest.version != FORMAT_VERSION {
        return Err(NnError::Checkpoint(format!(
            "unsupported checkpoint {} v{}",
            manifest.format, manifest.version
        )));
    }
    if manifest.scalar_type != "f64" || manifest.byte_order != "little" {
        return Err(NnError::Checkpoint(format!(
            "unsupported encoding {}/{}",
            manifest.scalar_type, manifest.byte_order
        )));
    }
    Ok(manifest)
}

/// Loads values into an already-built store; names and shapes must match exactly.
pub fn load_into(path: &Path, params: &mut ParamStore) -> Result<Manifest, NnError> {
    let manifest = read_manifest(path)?;
    let (manifest_path, _) = checkpoint_paths(path);
    let data_path = manifest_path.with_file_name(&manifest.data_file);
    let bytes = fs::read(&data_path)?;
    if bytes.len() % 8 != 0 {
        return Err(NnError::Checkpoint("data file length not a multiple of 8".into()));
    }
    let flat: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    if manifest.tensors.len() != params.len() {
        return Err(NnError::Checkpoint(format!(
            "checkpoint has {} tensors, model has {}",
            manifest.tensors.len(),
            params.len()
        )));
    }
    for entry in &manifest.tensors {
        let id = params
            .find(&entry.name)
            .ok_or_else(|| NnError::Checkpoint(format!("unknown tensor {}", entry.name)))?;
        let target = params.get_mut(id);
        if target.shape() != entry.shape.as_slice() || entry.len != target.len() {
            return Err(NnError::Checkpoint(format!(
                "shape mismatch for {}: {:?} vs {:?}",
                entry.name,
                entry.shape,
                target.shape()
            )));
        }
        let slice = flat
            .get(entry.offset..entry.offset + entry.len)
            .ok_or_else(|| NnError::Checkpoint(format!("truncated data for {}", entry.name)))?;
        *target = Tensor::from_vec(entry.shape[0], entry.shape[1], slice.to_vec());
    }
    Ok(manifest)
}
