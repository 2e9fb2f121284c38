//! Checkpoint container: one file holding a JSON manifest (architecture,
//! dimensions, freeze boundary, normalization constants, parameter index)
//! followed by a blob of little-endian `f32` parameter arrays.

use super::{EncoderModel, Normalization, Profile};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Read;
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 8] = b"SVENC001";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint has trailing bytes after the parameter blob")]
    TrailingBytes,
    #[error("checkpoint manifest: {0}")]
    Manifest(String),
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("profile '{0}' cannot be checkpointed")]
    UnsupportedProfile(String),
    #[error("parameter '{0}' missing from checkpoint")]
    ParamMissing(String),
    #[error("checkpoint parameter '{0}' unknown to this architecture")]
    ParamUnknown(String),
    #[error("parameter '{name}' has shape {got:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the blob, in `f32` elements.
    offset: usize,
    /// Element count.
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    profile: Profile,
    num_classes: usize,
    backbone_dim: usize,
    projection_dim: usize,
    freeze_boundary: String,
    partial_frozen: bool,
    normalization: Normalization,
    params: Vec<ParamEntry>,
}

/// Serializes a model to the checkpoint container in memory.
pub fn save_checkpoint_to_vec(model: &EncoderModel<f32>) -> Result<Vec<u8>, CheckpointError> {
    if model.profile == Profile::Custom {
        return Err(CheckpointError::UnsupportedProfile(
            model.profile.name().to_string(),
        ));
    }
    let params = model.params();
    let mut entries = Vec::with_capacity(params.len());
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    for p in &params {
        let len = p.data.len();
        entries.push(ParamEntry {
            name: p.path.clone(),
            shape: p.data.shape().to_vec(),
            offset,
            len,
        });
        for &v in p.data.as_standard_layout().iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += len;
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        profile: model.profile,
        num_classes: model.num_classes,
        backbone_dim: model.backbone_dim,
        projection_dim: model.projection_dim,
        freeze_boundary: model.freeze_boundary.clone(),
        partial_frozen: model.partial_frozen,
        normalization: model.normalization.clone(),
        params: entries,
    };
    let manifest_bytes =
        serde_json::to_vec(&manifest).map_err(|e| CheckpointError::Manifest(e.to_string()))?;

    let mut out = Vec::with_capacity(8 + 8 + manifest_bytes.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_bytes);
    out.extend_from_slice(&blob);
    Ok(out)
}

/// Writes a checkpoint atomically (write to a sibling temp file, then rename).
pub fn save_checkpoint(model: &EncoderModel<f32>, path: &Path) -> Result<(), CheckpointError> {
    let bytes = save_checkpoint_to_vec(model)?;
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a checkpoint and reconstructs the model.
pub fn load_checkpoint(path: &Path) -> Result<EncoderModel<f32>, CheckpointError> {
    let mut file = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    load_checkpoint_from_slice(&bytes)
}

fn load_checkpoint_from_slice(bytes: &[u8]) -> Result<EncoderModel<f32>, CheckpointError> {
    if bytes.len() < 16 {
        return Err(CheckpointError::Truncated);
    }
    if &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let blob_start = 16 + manifest_len;
    if bytes.len() < blob_start {
        return Err(CheckpointError::Truncated);
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..blob_start])
        .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Version(manifest.format_version));
    }
    if manifest.profile == Profile::Custom {
        return Err(CheckpointError::UnsupportedProfile("custom".into()));
    }

    let expected_elems: usize = manifest.params.iter().map(|p| p.len).sum();
    let blob = &bytes[blob_start..];
    if blob.len() < expected_elems * 4 {
        return Err(CheckpointError::Truncated);
    }
    if blob.len() > expected_elems * 4 {
        return Err(CheckpointError::TrailingBytes);
    }

    let mut model: EncoderModel<f32> =
        EncoderModel::new(manifest.profile, manifest.num_classes, 0);
    model.freeze_boundary = manifest.freeze_boundary.clone();
    model.normalization = manifest.normalization.clone();
    model
        .set_partial_freeze(manifest.partial_frozen)
        .map_err(|e| CheckpointError::Manifest(e.to_string()))?;

    use std::collections::HashMap;
    let index: HashMap<&str, &ParamEntry> = manifest
        .params
        .iter()
        .map(|p| (p.name.as_str(), p))
        .collect();
    let mut seen = 0usize;
    for mut param in model.params_mut() {
        let entry = index
            .get(param.path.as_str())
            .ok_or_else(|| CheckpointError::ParamMissing(param.path.clone()))?;
        if entry.shape != param.data.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name: param.path.clone(),
                got: entry.shape.clone(),
                expected: param.data.shape().to_vec(),
            });
        }
        let start = entry.offset * 4;
        let mut values = Vec::with_capacity(entry.len);
        for i in 0..entry.len {
            let b: [u8; 4] = blob[start + i * 4..start + i * 4 + 4].try_into().unwrap();
            values.push(f32::from_le_bytes(b));
        }
        let arr = ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&entry.shape), values)
            .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        param.data.assign(&arr);
        seen += 1;
    }
    if seen != manifest.params.len() {
        let known: std::collections::HashSet<String> =
            model.params().iter().map(|p| p.path.clone()).collect();
        for entry in &manifest.params {
            if !known.contains(&entry.name) {
                return Err(CheckpointError::ParamUnknown(entry.name.clone()));
            }
        }
    }
    Ok(model)
}

impl EncoderModel<f32> {
    /// Hex digest identifying this exact model (architecture + parameters).
    pub fn fingerprint(&self) -> String {
        let bytes = save_checkpoint_to_vec(self).unwrap_or_default();
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        hex_string(&hasher.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    use std::fmt::Write;
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        write!(s, "{b:02x}").unwrap();
    }
    s
}
