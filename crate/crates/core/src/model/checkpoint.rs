//! Checkpoint files: `<name>.json` manifest plus `<name>.raw` payload of
//! little-endian f32 values, tensors concatenated in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SegmenterConfig, SegmenterParams};
use crate::error::{Error, Result};
use crate::io::volume_paths;

pub const CHECKPOINT_FORMAT: &str = "distgate-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub dtype: String,
    pub config: SegmenterConfig,
    pub seed: u64,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
    /// Free-form provenance, e.g. the training mode and gating parameters.
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn save_checkpoint(
    params: &SegmenterParams<f32>,
    step: u64,
    meta: serde_json::Value,
    path: impl AsRef<Path>,
) -> Result<()> {
    let (manifest_path, raw_path) = volume_paths(path);
    let mut offset = 0;
    let tensors = params
        .tensor_names()
        .into_iter()
        .zip(params.tensor_shapes())
        .map(|(name, shape)| {
            let entry = TensorEntry { name, offset, shape };
            offset += entry.shape.iter().product::<usize>();
            entry
        })
        .collect();
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        dtype: "f32".into(),
        config: params.config.clone(),
        seed: params.config.seed,
        step,
        tensors,
        meta,
    };
    if let Some(dir) = manifest_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let payload: Vec<u8> = params.tensors().iter().flat_map(|t| t.iter().flat_map(|v| v.to_le_bytes())).collect();
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&manifest_path, e))?;
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    fs::write(&raw_path, payload).map_err(|e| Error::io(&raw_path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(SegmenterParams<f32>, CheckpointManifest)> {
    let (manifest_path, raw_path) = volume_paths(path);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::json(&manifest_path, e))?;
    if manifest.format != CHECKPOINT_FORMAT || manifest.dtype != "f32" {
        return Err(Error::format(&manifest_path, format!("unsupported checkpoint {}/{}", manifest.format, manifest.dtype)));
    }
    let mut params = SegmenterParams::<f32>::zeros(&manifest.config)?;
    if params.tensor_shapes() != manifest.tensors.iter().map(|t| t.shape.clone()).collect::<Vec<_>>() {
        return Err(Error::format(&manifest_path, "tensor shapes do not match the config"));
    }
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let expected = params.parameter_count() * 4;
    if bytes.len() != expected {
        return Err(Error::format(&raw_path, format!("payload is {} bytes, expected {expected}", bytes.len())));
    }
    let mut values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            *v = values.next().unwrap();
        }
    }
    if !params.is_finite() {
        return Err(Error::format(&raw_path, "non-finite weights"));
    }
    Ok((params, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = init_params::<f32>(&SegmenterConfig { seed: 3, ..Default::default() }).unwrap();
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&p, 17, serde_json::json!({"mode": "sg"}), &path).unwrap();
        let (back, m) = load_checkpoint(&path).unwrap();
        assert_eq!(back, p);
        assert_eq!(m.step, 17);
        assert_eq!(m.seed, 3);
        assert_eq!(m.meta["mode"], "sg");
        let raw = dir.path().join("ckpt.raw");
        let len = fs::metadata(&raw).unwrap().len() as usize;
        assert_eq!(len, p.parameter_count() * 4);
        fs::write(&raw, vec![0u8; len - 4]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
