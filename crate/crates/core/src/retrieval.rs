//! Instance retrieval: cosine similarity against every registered
//! observation, max-pooled per instance, argmax over instances.
//!
//! Search is exact — stores hold at most a few hundred vectors, and the
//! per-instance max followed by argmax is the contract, so no approximate
//! index is involved. Ties break toward the lowest instance ID.

use crate::encoder::{encode, preprocess, EncoderModel, FeatureVector, ModelError};
use crate::registry::{FeatureStore, InstanceRecord};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("similarity of a zero vector is undefined")]
    ZeroVector,
    #[error("vector dims differ: {a} vs {b}")]
    DimMismatch { a: usize, b: usize },
    #[error("instance record {0} has no vectors")]
    EmptyRecord(u32),
    #[error("store is empty")]
    EmptyStore,
    #[error("k must be at least 1")]
    ZeroK,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Cosine similarity; errors on zero vectors and mismatched dims.
pub fn cosine_similarity(a: &FeatureVector, b: &FeatureVector) -> Result<f64, RetrievalError> {
    if a.dim() != b.dim() {
        return Err(RetrievalError::DimMismatch {
            a: a.dim(),
            b: b.dim(),
        });
    }
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.values.iter().zip(b.values.iter()) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(RetrievalError::ZeroVector);
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// `m_i`: the best similarity between the query and any observation of the
/// instance.
pub fn instance_max_similarity(
    record: &InstanceRecord,
    q: &FeatureVector,
) -> Result<f64, RetrievalError> {
    if record.vectors.is_empty() {
        return Err(RetrievalError::EmptyRecord(record.instance_id));
    }
    let mut best = f64::NEG_INFINITY;
    for v in &record.vectors {
        let s = cosine_similarity(&FeatureVector::new(v.clone()), q)?;
        if s > best {
            best = s;
        }
    }
    Ok(best)
}

/// Outcome of one retrieval, including the per-instance score map and the
/// semantic-map metadata of the winner.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RetrievalResult {
    pub instance_id: u32,
    pub similarity: f64,
    pub class_label: String,
    pub position: [f64; 3],
    pub per_instance_scores: BTreeMap<u32, f64>,
    /// Set when the query encoder does not match the store's fingerprint.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fingerprint_warning: Option<String>,
}

/// Retrieval against an already-encoded query vector.
pub fn retrieve_vector(
    store: &FeatureStore,
    q: &FeatureVector,
) -> Result<RetrievalResult, RetrievalError> {
    if store.is_empty() {
        return Err(RetrievalError::EmptyStore);
    }
    let mut scores = BTreeMap::new();
    let mut best: Option<(u32, f64)> = None;
    for (&id, record) in &store.records {
        let m = instance_max_similarity(record, q)?;
        scores.insert(id, m);
        // Strict `>` over ascending IDs implements lowest-ID tie-breaking.
        if best.map_or(true, |(_, b)| m > b) {
            best = Some((id, m));
        }
    }
    let (instance_id, similarity) = best.expect("nonempty store");
    let record = &store.records[&instance_id];
    Ok(RetrievalResult {
        instance_id,
        similarity,
        class_label: record.class_label.clone(),
        position: record.position,
        per_instance_scores: scores,
        fingerprint_warning: None,
    })
}

/// Full retrieval: preprocess + encode the query image, then match it
/// against the store. A fingerprint mismatch between the store and the
/// encoder is surfaced as a warning on the result, not an error.
pub fn retrieve(
    store: &FeatureStore,
    query_image: &image::RgbImage,
    encoder: &EncoderModel<f32>,
) -> Result<RetrievalResult, RetrievalError> {
    let input = preprocess::<f32>(query_image, &encoder.normalization);
    let q = encode(encoder, &input)?;
    let mut result = retrieve_vector(store, &q)?;
    let fp = encoder.fingerprint();
    if fp != store.encoder_fingerprint {
        result.fingerprint_warning = Some(format!(
            "store was built with encoder {} but queried with {}",
            &store.encoder_fingerprint[..12.min(store.encoder_fingerprint.len())],
            &fp[..12]
        ));
    }
    Ok(result)
}

/// One ranked observation-level neighbor.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Neighbor {
    pub instance_id: u32,
    pub view_index: usize,
    pub similarity: f64,
}

/// The `k` individual observations most similar to the query (not
/// max-pooled per instance). Asking for more neighbors than observations
/// returns the full ranking.
pub fn top_k_neighbors(
    store: &FeatureStore,
    q: &FeatureVector,
    k: usize,
) -> Result<Vec<Neighbor>, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    if store.is_empty() {
        return Err(RetrievalError::EmptyStore);
    }
    let mut all = Vec::with_capacity(store.total_observations());
    for (&id, record) in &store.records {
        for (view_index, v) in record.vectors.iter().enumerate() {
            let s = cosine_similarity(&FeatureVector::new(v.clone()), q)?;
            all.push(Neighbor {
                instance_id: id,
                view_index,
                similarity: s,
            });
        }
    }
    all.sort_by(|a, b| {
        b.similarity
            .partial_cmp(&a.similarity)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.instance_id.cmp(&b.instance_id))
            .then(a.view_index.cmp(&b.view_index))
    });
    all.truncate(k);
    Ok(all)
}
