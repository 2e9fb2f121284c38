//! Per-instance feature registry with semantic-map metadata.
//!
//! Every observation of instance `i` contributes one feature vector to its
//! set `Z_i`; the record also carries the class label and 3D position from
//! the semantic map so a retrieval hit resolves to a physical location.
//!
//! Persistence is a `store.json` manifest (ids, classes, positions, counts,
//! dim, encoder fingerprint, format version, per-record offsets) next to a
//! `store.vec` blob of little-endian `f32` vectors. Round trips are
//! bit-exact.

use crate::data::MultiViewDataset;
use crate::encoder::{encode, preprocess, EncoderModel, FeatureVector, ModelError};
use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const STORE_FORMAT_VERSION: u32 = 1;
pub const STORE_MANIFEST: &str = "store.json";
pub const STORE_VECTORS: &str = "store.vec";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("vector dim {got} does not match store dim {expected}")]
    DimMismatch { got: usize, expected: usize },
    #[error("zero feature vector rejected (similarity would be undefined)")]
    ZeroVector,
    #[error("non-finite feature vector rejected")]
    NonFinite,
    #[error("instance {id}: {field} conflicts with the existing record ({have} vs {new})")]
    Conflict {
        id: u32,
        field: &'static str,
        have: String,
        new: String,
    },
    #[error("dataset is empty; nothing to register")]
    EmptyDataset,
    #[error("no position known for instance {0}")]
    MissingPosition(u32),
    #[error("store io at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("store manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error("store format version {0} unsupported")]
    Version(u32),
    #[error("vector file truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// All recorded observations of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceRecord {
    pub instance_id: u32,
    pub class_label: String,
    /// Object position in meters from the semantic map.
    pub position: [f64; 3],
    /// The observation set `Z_i`, in registration order.
    pub vectors: Vec<Array1<f32>>,
}

impl InstanceRecord {
    /// Number of observations (`N_i`).
    pub fn count(&self) -> usize {
        self.vectors.len()
    }
}

/// Instance ID -> record, plus the embedding dimension and the fingerprint
/// of the encoder that produced the vectors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureStore {
    pub records: BTreeMap<u32, InstanceRecord>,
    pub dim: Option<usize>,
    pub encoder_fingerprint: String,
}

impl FeatureStore {
    pub fn new(encoder_fingerprint: impl Into<String>) -> Self {
        Self {
            records: BTreeMap::new(),
            dim: None,
            encoder_fingerprint: encoder_fingerprint.into(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Total number of registered observations (sum of all `N_i`).
    pub fn total_observations(&self) -> usize {
        self.records.values().map(|r| r.count()).sum()
    }
}

/// Appends one observation, creating the record on first sight and checking
/// class/position consistency afterwards (the map is static; conflicting
/// metadata for one ID is an error, not something to average away).
pub fn register_observation(
    store: &mut FeatureStore,
    instance_id: u32,
    class_label: &str,
    position: [f64; 3],
    vector: FeatureVector,
) -> Result<(), StoreError> {
    if !vector.is_finite() {
        return Err(StoreError::NonFinite);
    }
    if vector.values.iter().all(|&v| v == 0.0) {
        return Err(StoreError::ZeroVector);
    }
    match store.dim {
        None => store.dim = Some(vector.dim()),
        Some(dim) if dim != vector.dim() => {
            return Err(StoreError::DimMismatch {
                got: vector.dim(),
                expected: dim,
            })
        }
        _ => {}
    }
    match store.records.get_mut(&instance_id) {
        None => {
            store.records.insert(
                instance_id,
                InstanceRecord {
                    instance_id,
                    class_label: class_label.to_string(),
                    position,
                    vectors: vec![vector.values],
                },
            );
        }
        Some(record) => {
            if record.class_label != class_label {
                return Err(StoreError::Conflict {
                    id: instance_id,
                    field: "class",
                    have: record.class_label.clone(),
                    new: class_label.to_string(),
                });
            }
            if record.position != position {
                return Err(StoreError::Conflict {
                    id: instance_id,
                    field: "position",
                    have: format!("{:?}", record.position),
                    new: format!("{position:?}"),
                });
            }
            record.vectors.push(vector.values);
        }
    }
    Ok(())
}

/// Encodes every dataset item and registers it under its instance ID.
///
/// `positions` must cover every instance in the dataset.
pub fn build_store(
    encoder: &EncoderModel<f32>,
    ds: &MultiViewDataset,
    positions: &BTreeMap<u32, [f64; 3]>,
) -> Result<FeatureStore, StoreError> {
    if ds.is_empty() {
        return Err(StoreError::EmptyDataset);
    }
    for id in ds.instance_ids() {
        if !positions.contains_key(&id) {
            return Err(StoreError::MissingPosition(id));
        }
    }
    let vectors: Vec<Result<FeatureVector, ModelError>> = ds
        .items
        .par_iter()
        .map(|item| {
            let input = preprocess::<f32>(&item.pixels, &encoder.normalization);
            encode(encoder, &input)
        })
        .collect();

    let mut store = FeatureStore::new(encoder.fingerprint());
    for (item, vector) in ds.items.iter().zip(vectors) {
        register_observation(
            &mut store,
            item.instance_id,
            &item.class_label,
            positions[&item.instance_id],
            vector?,
        )?;
    }
    Ok(store)
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordEntry {
    instance_id: u32,
    class_label: String,
    position: [f64; 3],
    /// Offset into the vector blob, in f32 elements.
    offset: usize,
    /// Number of vectors (`N_i`).
    count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct StoreManifest {
    format_version: u32,
    dim: usize,
    encoder_fingerprint: String,
    records: Vec<RecordEntry>,
}

/// Writes `store.json` + `store.vec` into `dir` (created if missing);
/// both files land via write-then-rename.
pub fn save_store(store: &FeatureStore, dir: &Path) -> Result<(), StoreError> {
    let io_err = |path: &Path, source: std::io::Error| StoreError::Io {
        path: path.to_path_buf(),
        source,
    };
    let dim = store.dim.unwrap_or(0);
    if store.is_empty() {
        return Err(StoreError::EmptyDataset);
    }
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;

    let mut entries = Vec::with_capacity(store.records.len());
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    for record in store.records.values() {
        entries.push(RecordEntry {
            instance_id: record.instance_id,
            class_label: record.class_label.clone(),
            position: record.position,
            offset,
            count: record.count(),
        });
        for vector in &record.vectors {
            for &v in vector.iter() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            offset += dim;
        }
    }
    let manifest = StoreManifest {
        format_version: STORE_FORMAT_VERSION,
        dim,
        encoder_fingerprint: store.encoder_fingerprint.clone(),
        records: entries,
    };
    let manifest_path = dir.join(STORE_MANIFEST);
    let vec_path = dir.join(STORE_VECTORS);
    let manifest_text = serde_json::to_string_pretty(&manifest).map_err(|e| StoreError::Manifest {
        path: manifest_path.clone(),
        reason: e.to_string(),
    })?;

    let tmp = dir.join("store.vec.tmp");
    std::fs::write(&tmp, &blob).map_err(|e| io_err(&tmp, e))?;
    std::fs::rename(&tmp, &vec_path).map_err(|e| io_err(&vec_path, e))?;
    let tmp = dir.join("store.json.tmp");
    std::fs::write(&tmp, manifest_text).map_err(|e| io_err(&tmp, e))?;
    std::fs::rename(&tmp, &manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    Ok(())
}

/// Reads a store written by [`save_store`].
pub fn load_store(dir: &Path) -> Result<FeatureStore, StoreError> {
    let manifest_path = dir.join(STORE_MANIFEST);
    let vec_path = dir.join(STORE_VECTORS);
    let io_err = |path: &Path, source: std::io::Error| StoreError::Io {
        path: path.to_path_buf(),
        source,
    };
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    let manifest: StoreManifest = serde_json::from_str(&text).map_err(|e| StoreError::Manifest {
        path: manifest_path.clone(),
        reason: e.to_string(),
    })?;
    if manifest.format_version != STORE_FORMAT_VERSION {
        return Err(StoreError::Version(manifest.format_version));
    }
    let blob = std::fs::read(&vec_path).map_err(|e| io_err(&vec_path, e))?;
    let total: usize = manifest.records.iter().map(|r| r.count).sum();
    let expected = total * manifest.dim * 4;
    if blob.len() != expected {
        return Err(StoreError::Truncated {
            expected,
            found: blob.len(),
        });
    }

    let mut store = FeatureStore::new(manifest.encoder_fingerprint.clone());
    store.dim = Some(manifest.dim);
    for entry in &manifest.records {
        let mut vectors = Vec::with_capacity(entry.count);
        for k in 0..entry.count {
            let start = (entry.offset + k * manifest.dim) * 4;
            let mut values = Vec::with_capacity(manifest.dim);
            for i in 0..manifest.dim {
                let b: [u8; 4] = blob[start + i * 4..start + i * 4 + 4]
                    .try_into()
                    .expect("length checked");
                values.push(f32::from_le_bytes(b));
            }
            vectors.push(Array1::from_vec(values));
        }
        store.records.insert(
            entry.instance_id,
            InstanceRecord {
                instance_id: entry.instance_id,
                class_label: entry.class_label.clone(),
                position: entry.position,
                vectors,
            },
        );
    }
    Ok(store)
}
