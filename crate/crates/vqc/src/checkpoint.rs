//! Checkpoint container: a JSON manifest followed by raw little-endian
//! f64 tensor data. Round-trips are bit-exact.
//!
//! Layout: `[u64 LE manifest byte length][manifest JSON][f64 LE data]`.
//! The manifest records the format version, the full run configuration,
//! and per-tensor name/shape/offset so any language can read it back.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::Error;
use crate::model::VqcParams;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the data section, in f64 elements.
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub step: usize,
    pub config: RunConfig,
    pub tensors: Vec<TensorMeta>,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: VqcParams,
}

/// Serialize parameters and config to `path`.
pub fn save(
    path: &Path,
    config: &RunConfig,
    params: &VqcParams,
    seed: u64,
    step: usize,
) -> Result<(), Error> {
    let mut tensors = Vec::new();
    let mut data: Vec<f64> = Vec::new();
    params.for_each(&mut |name, a| {
        tensors.push(TensorMeta {
            name: name.to_string(),
            shape: a.shape().to_vec(),
            offset: data.len(),
            len: a.numel(),
        });
        data.extend_from_slice(a.data());
    });
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        seed,
        step,
        config: config.clone(),
        tensors,
    };
    let manifest_json = serde_json::to_vec(&manifest)?;

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&(manifest_json.len() as u64).to_le_bytes())?;
    file.write_all(&manifest_json)?;
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for v in &data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    file.write_all(&bytes)?;
    Ok(())
}

/// Load a checkpoint, verifying the version and every tensor shape
/// against the stored configuration.
pub fn load(path: &Path) -> Result<Checkpoint, Error> {
    let mut file = std::fs::File::open(path).map_err(|e| {
        Error::Checkpoint(format!("cannot open checkpoint {}: {e}", path.display()))
    })?;
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)
        .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    file.read_exact(&mut manifest_bytes)
        .map_err(|e| Error::Checkpoint(format!("truncated manifest: {e}")))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| Error::Checkpoint(format!("manifest parse failure: {e}")))?;

    if manifest.version > CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint version {} is newer than the supported version {}",
            manifest.version, CHECKPOINT_VERSION
        )));
    }

    let mut raw = Vec::new();
    file.read_to_end(&mut raw)?;
    if raw.len() % 8 != 0 {
        return Err(Error::Checkpoint(format!(
            "data section of {} bytes is not a whole number of f64 values",
            raw.len()
        )));
    }
    let data: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let total: usize = manifest.tensors.iter().map(|t| t.len).sum();
    if total != data.len() {
        return Err(Error::Checkpoint(format!(
            "manifest declares {total} values, data section has {}",
            data.len()
        )));
    }

    let resolved = manifest.config.resolve()?;
    let mut params = VqcParams::zeros(&resolved.model);
    let mut missing = Vec::new();
    params.for_each_mut(&mut |name, a| {
        match manifest.tensors.iter().find(|t| t.name == name) {
            Some(meta) => {
                if meta.shape != a.shape() {
                    missing.push(format!(
                        "tensor {name}: checkpoint shape {:?} vs configured {:?}",
                        meta.shape,
                        a.shape()
                    ));
                    return;
                }
                a.data_mut()
                    .copy_from_slice(&data[meta.offset..meta.offset + meta.len]);
            }
            None => missing.push(format!("tensor {name} absent from checkpoint")),
        }
    });
    if !missing.is_empty() {
        return Err(Error::Checkpoint(missing.join("; ")));
    }
    Ok(Checkpoint { manifest, params })
}
