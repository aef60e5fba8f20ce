//! Checkpoint directory: `manifest.json` (config, counters, tensor table) plus
//! `params.f32`, every parameter tensor flattened row-major as little-endian
//! `f32`, concatenated in manifest order. Parameters live on the `f32` grid,
//! so save → load is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data_synth::write_f32_blob;
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

use super::{ModelConfig, ModelParams, ModelState};

pub const CHECKPOINT_MANIFEST: &str = "manifest.json";
pub const CHECKPOINT_PARAMS: &str = "params.f32";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into `params.f32`, in values (multiply by 4 for bytes).
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    config: ModelConfig,
    epoch: usize,
    step: u64,
    seed: u64,
    #[serde(default)]
    extra: Option<serde_json::Value>,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(
    state: &ModelState,
    dir: &Path,
    extra: Option<serde_json::Value>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut offset = 0;
    let mut tensors = Vec::new();
    let mut chunks: Vec<Vec<f32>> = Vec::new();
    for (name, t) in state.params.tensors() {
        tensors.push(TensorEntry {
            name,
            shape: t.shape.clone(),
            offset,
        });
        offset += t.len();
        chunks.push(t.data.iter().map(|&v| v as f32).collect());
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        config: state.config.clone(),
        epoch: state.epoch,
        step: state.step,
        seed: state.seed,
        extra,
        tensors,
    };
    let mpath = dir.join(CHECKPOINT_MANIFEST);
    fs::write(&mpath, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
    write_f32_blob(&dir.join(CHECKPOINT_PARAMS), chunks.iter().map(|c| c.as_slice()))
}

/// Loads a checkpoint; also returns the manifest's `extra` payload.
pub fn load_checkpoint(dir: &Path) -> Result<(ModelState, Option<serde_json::Value>)> {
    let mpath = dir.join(CHECKPOINT_MANIFEST);
    let raw = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_slice(&raw).map_err(|e| Error::Manifest {
            path: mpath.clone(),
            reason: e.to_string(),
        })?;
    let ppath = dir.join(CHECKPOINT_PARAMS);
    let bytes = fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    // Build a skeleton with the right shapes, then overwrite every tensor.
    let mut rng = stream(0, Stream::Init, &[]);
    let mut params = ModelParams::init(&manifest.config, &mut rng)?;
    let names: Vec<(String, Vec<usize>)> = params
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape.clone()))
        .collect();
    if names.len() != manifest.tensors.len() {
        return Err(Error::Manifest {
            path: mpath,
            reason: format!(
                "{} tensors listed, config implies {}",
                manifest.tensors.len(),
                names.len()
            ),
        });
    }
    let total: usize = names.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if bytes.len() != total * 4 {
        return Err(Error::BlobSize {
            blob: CHECKPOINT_PARAMS.into(),
            expected: total * 4,
            actual: bytes.len(),
            sample: 0,
        });
    }
    for ((t, entry), (name, shape)) in params
        .tensors_mut()
        .into_iter()
        .zip(&manifest.tensors)
        .zip(&names)
    {
        if &entry.name != name || &entry.shape != shape {
            return Err(Error::Manifest {
                path: mpath,
                reason: format!("tensor `{}` {:?} does not match `{name}` {shape:?}", entry.name, entry.shape),
            });
        }
        let n = t.len();
        for (dst, src) in t.data.iter_mut().zip(&values[entry.offset..entry.offset + n]) {
            *dst = *src as f64;
        }
    }
    Ok((
        ModelState {
            config: manifest.config,
            params,
            epoch: manifest.epoch,
            step: manifest.step,
            seed: manifest.seed,
        },
        manifest.extra,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig {
            image_size: (16, 16),
            channels: [4, 8, 8],
            ..ModelConfig::default()
        };
        let mut state = ModelState::new(cfg, 9).unwrap();
        state.epoch = 3;
        state.step = 77;
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&state, dir.path(), Some(serde_json::json!({"k": 1}))).unwrap();
        let (loaded, extra) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded, state);
        assert_eq!(extra.unwrap()["k"], 1);
        for ((_, a), (_, b)) in loaded.params.tensors().iter().zip(state.params.tensors()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn truncated_params_rejected() {
        let cfg = ModelConfig {
            image_size: (16, 16),
            channels: [4, 8, 8],
            ..ModelConfig::default()
        };
        let state = ModelState::new(cfg, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&state, dir.path(), None).unwrap();
        let p = dir.path().join(CHECKPOINT_PARAMS);
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::BlobSize { .. })));
    }
}
