//! Parameter checkpoints: a JSON manifest next to a raw little-endian `f32`
//! blob. The manifest records every tensor's name, shape, byte offset and
//! element count, plus the model config, hyperparameters, seed and step.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{validation, Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_FORMAT: &str = "smcforge-checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub model: String,
    pub config: serde_json::Value,
    pub hyperparameters: serde_json::Value,
    pub seed: u64,
    pub step: u64,
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
}

/// `ae.ckpt.json` -> `ae.ckpt.bin`
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

#[allow(clippy::too_many_arguments)]
pub fn save_checkpoint<F: Scalar>(
    manifest_path: impl AsRef<Path>,
    store: &ParamStore<F>,
    model: &str,
    config: serde_json::Value,
    hyperparameters: serde_json::Value,
    seed: u64,
    step: u64,
) -> Result<CheckpointManifest> {
    let manifest_path = manifest_path.as_ref();
    let blob = blob_path(manifest_path);
    let mut bytes = Vec::with_capacity(4 * store.numel());
    let mut tensors = Vec::with_capacity(store.len());
    for p in store.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset: bytes.len() as u64,
            len: p.value.len() as u64,
        });
        for v in p.value.data() {
            let v = v.to_f32().ok_or_else(|| validation(format!("{} not representable as f32", p.name)))?;
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.to_string(),
        version: 1,
        model: model.to_string(),
        config,
        hyperparameters,
        seed,
        step,
        blob: blob
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| validation("checkpoint path has no file name"))?
            .to_string(),
        tensors,
    };
    fs::write(&blob, &bytes).map_err(|e| Error::io(&blob, e))?;
    let json = serde_json::to_vec_pretty(&manifest)?;
    fs::write(manifest_path, json).map_err(|e| Error::io(manifest_path, e))?;
    Ok(manifest)
}

pub fn load_checkpoint(manifest_path: impl AsRef<Path>) -> Result<(CheckpointManifest, ParamStore<f32>)> {
    let manifest_path = manifest_path.as_ref();
    let text = fs::read(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&text)?;
    if manifest.format != CHECKPOINT_FORMAT || manifest.version != 1 {
        return Err(validation(format!("unsupported checkpoint {} v{}", manifest.format, manifest.version)));
    }
    let blob = manifest_path.with_file_name(&manifest.blob);
    let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
    let mut store = ParamStore::new();
    let mut expected_end = 0u64;
    for t in &manifest.tensors {
        let n: usize = t.shape.iter().product();
        if n as u64 != t.len || t.offset != expected_end {
            return Err(validation(format!("checkpoint entry {} is inconsistent", t.name)));
        }
        let end = t.offset + 4 * t.len;
        let raw = bytes
            .get(t.offset as usize..end as usize)
            .ok_or(Error::Truncated { expected: end, actual: bytes.len() as u64 })?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        store.add(t.name.clone(), Tensor::new(&t.shape, data)?);
        expected_end = end;
    }
    if expected_end != bytes.len() as u64 {
        return Err(validation("checkpoint blob has trailing bytes"));
    }
    Ok((manifest, store))
}
