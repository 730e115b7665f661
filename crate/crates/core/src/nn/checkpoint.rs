//! On-disk checkpoints: a JSON manifest naming each tensor with its shape
//! and byte offset, next to a flat little-endian `f32` payload.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use super::NnError;

pub const FORMAT_TAG: &str = "seqdec-ckpt-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload file.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    /// Payload file name, relative to the manifest.
    pub payload: String,
    pub tensors: Vec<TensorEntry>,
    /// Free-form metadata (decoder configuration, iteration, ...).
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Writes `<dir>/<stem>.json` and `<dir>/<stem>.bin`; returns the manifest
/// path.
pub fn write_checkpoint(
    dir: &Path,
    stem: &str,
    tensors: &[(String, &Tensor<f32>)],
    meta: serde_json::Value,
) -> Result<PathBuf, NnError> {
    fs::create_dir_all(dir)?;
    let payload_name = format!("{stem}.bin");
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: payload.len() as u64,
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT_TAG.to_string(),
        payload: payload_name.clone(),
        tensors: entries,
        meta,
    };
    fs::write(dir.join(&payload_name), payload)?;
    let path = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| NnError::Checkpoint(e.to_string()))?;
    fs::write(&path, text + "\n")?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<Manifest, NnError> {
    let text = fs::read_to_string(path)?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| NnError::Checkpoint(format!("{}: {e}", path.display())))?;
    if manifest.format != FORMAT_TAG {
        return Err(NnError::Checkpoint(format!(
            "unsupported checkpoint format `{}`",
            manifest.format
        )));
    }
    Ok(manifest)
}

/// Loads every tensor listed in the manifest at `path`.
pub fn read_checkpoint(path: &Path) -> Result<(Manifest, Vec<(String, Tensor<f32>)>), NnError> {
    let manifest = read_manifest(path)?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let payload = fs::read(dir.join(&manifest.payload))?;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + 4 * n;
        if end > payload.len() {
            return Err(NnError::Checkpoint(format!(
                "tensor `{}` runs past the end of the payload",
                e.name
            )));
        }
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        tensors.push((e.name.clone(), Tensor::from_vec(&e.shape, data)?));
    }
    Ok((manifest, tensors))
}
