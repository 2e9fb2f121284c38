//! Measurement protocol: repeated-trial mAP over retrievals, the two-way
//! failure taxonomy, k-means + ARI representation scoring and PCA
//! projections for latent-space plots.

mod cluster;
mod pca;
mod plots;

pub use cluster::{ari, cluster_ari, cluster_report, kmeans, representation_score, ClusterReport,
    RepresentationScore};
pub use pca::{pca_project, PcaProjection};
pub use plots::{emit_latent_scatter, emit_map_bars, LatentScatter};

use crate::data::MultiViewDataset;
use crate::encoder::{encode, preprocess, EncoderModel, ModelError};
use crate::registry::FeatureStore;
use crate::retrieval::{retrieve_vector, RetrievalError};
use crate::util::mix_seed;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("query instance {0} is not registered in the store")]
    MissingInstance(u32),
    #[error("instance {id} has {have} query views, need at least {need}")]
    NotEnoughQueryViews { id: u32, have: usize, need: usize },
    #[error("k (queries per instance) must be at least 1")]
    ZeroK,
    #[error("trials must be at least 1")]
    ZeroTrials,
    #[error("no results to aggregate")]
    Empty,
    #[error("k-means: {0}")]
    KMeans(String),
    #[error("label slices differ in length: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("plot io: {0}")]
    PlotIo(String),
}

/// Exact query counts behind the rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub successes: usize,
    pub diff_instance: usize,
    pub diff_class: usize,
    pub total: usize,
}

/// Retrieval quality report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean over instances of per-instance average precision.
    pub map_score: f64,
    pub per_instance_ap: BTreeMap<u32, f64>,
    /// Fraction of queries retrieving the right class but wrong instance.
    pub diff_instance_rate: f64,
    /// Fraction of queries retrieving a different class.
    pub diff_class_rate: f64,
    pub success_rate: f64,
    pub trials: usize,
    pub k: usize,
    pub counts: EvalCounts,
}

/// One retrieval outcome for failure classification.
#[derive(Debug, Clone)]
pub struct QueryOutcome {
    pub query_instance: u32,
    pub query_class: String,
    pub retrieved_instance: u32,
    pub retrieved_class: String,
}

impl QueryOutcome {
    pub fn is_success(&self) -> bool {
        self.query_instance == self.retrieved_instance
    }

    pub fn is_diff_instance(&self) -> bool {
        !self.is_success() && self.query_class == self.retrieved_class
    }

    pub fn is_diff_class(&self) -> bool {
        self.query_class != self.retrieved_class
    }
}

/// Splits failures into same-class/different-instance and different-class
/// fractions of all queries. Success + both rates = 1.
pub fn error_breakdown(outcomes: &[QueryOutcome]) -> Result<(f64, f64), EvalError> {
    if outcomes.is_empty() {
        return Err(EvalError::Empty);
    }
    let total = outcomes.len() as f64;
    let diff_instance = outcomes.iter().filter(|o| o.is_diff_instance()).count();
    let diff_class = outcomes.iter().filter(|o| o.is_diff_class()).count();
    Ok((diff_instance as f64 / total, diff_class as f64 / total))
}

/// Repeated-trial retrieval evaluation.
///
/// Per trial, each instance contributes `k` query views resampled from its
/// pool (seeded, so trials differ while the whole run stays deterministic);
/// a query succeeds when retrieval returns its own instance. AP averages
/// the indicator per instance, mAP averages AP over instances.
pub fn evaluate_map(
    store: &FeatureStore,
    encoder: &EncoderModel<f32>,
    queries: &MultiViewDataset,
    k: usize,
    trials: usize,
    seed: u64,
) -> Result<EvalReport, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    if trials == 0 {
        return Err(EvalError::ZeroTrials);
    }
    if queries.is_empty() {
        return Err(EvalError::Empty);
    }
    let by_instance = queries.indices_by_instance();
    for (&id, views) in &by_instance {
        if !store.records.contains_key(&id) {
            return Err(EvalError::MissingInstance(id));
        }
        if views.len() < k {
            return Err(EvalError::NotEnoughQueryViews {
                id,
                have: views.len(),
                need: k,
            });
        }
    }

    // Encode each query view once; retrievals reuse the cached vectors.
    let encoded: Vec<crate::encoder::FeatureVector> = queries
        .items
        .par_iter()
        .map(|item| {
            let input = preprocess::<f32>(&item.pixels, &encoder.normalization);
            encode(encoder, &input)
        })
        .collect::<Result<_, _>>()?;

    let mut outcomes: Vec<QueryOutcome> = Vec::with_capacity(by_instance.len() * k * trials);
    let mut success_per_instance: BTreeMap<u32, usize> =
        by_instance.keys().map(|&id| (id, 0)).collect();
    for trial in 0..trials {
        for (&id, views) in &by_instance {
            let mut pool = views.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
                seed,
                &[0xe7a1, trial as u64, id as u64],
            ));
            pool.shuffle(&mut rng);
            for &item_idx in pool.iter().take(k) {
                let result = retrieve_vector(store, &encoded[item_idx])?;
                if result.instance_id == id {
                    *success_per_instance.get_mut(&id).unwrap() += 1;
                }
                outcomes.push(QueryOutcome {
                    query_instance: id,
                    query_class: queries.items[item_idx].class_label.clone(),
                    retrieved_instance: result.instance_id,
                    retrieved_class: result.class_label,
                });
            }
        }
    }

    let per_trial = (k * trials) as f64;
    let per_instance_ap: BTreeMap<u32, f64> = success_per_instance
        .iter()
        .map(|(&id, &s)| (id, s as f64 / per_trial))
        .collect();
    let counts = EvalCounts {
        successes: outcomes.iter().filter(|o| o.is_success()).count(),
        diff_instance: outcomes.iter().filter(|o| o.is_diff_instance()).count(),
        diff_class: outcomes.iter().filter(|o| o.is_diff_class()).count(),
        total: outcomes.len(),
    };
    let (diff_instance_rate, diff_class_rate) = error_breakdown(&outcomes)?;
    Ok(EvalReport {
        // Every instance contributes the same query count, so the mean of
        // per-instance APs equals the overall success fraction; computing
        // it from the counts keeps the rate identity exact.
        map_score: counts.successes as f64 / counts.total as f64,
        per_instance_ap,
        diff_instance_rate,
        diff_class_rate,
        success_rate: counts.successes as f64 / counts.total as f64,
        trials,
        k,
        counts,
    })
}

/// Writes `instance_id,class,ap` rows.
pub fn write_per_instance_ap_csv(
    report: &EvalReport,
    classes: &BTreeMap<u32, String>,
    path: &std::path::Path,
) -> Result<(), EvalError> {
    let mut out = String::from("instance_id,class,ap\n");
    for (id, ap) in &report.per_instance_ap {
        let class = classes.get(id).map(String::as_str).unwrap_or("");
        out.push_str(&format!("{id},{class},{ap}\n"));
    }
    std::fs::write(path, out).map_err(|e| EvalError::PlotIo(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome(qi: u32, qc: &str, ri: u32, rc: &str) -> QueryOutcome {
        QueryOutcome {
            query_instance: qi,
            query_class: qc.into(),
            retrieved_instance: ri,
            retrieved_class: rc.into(),
        }
    }

    #[test]
    fn breakdown_all_successes() {
        let outcomes = vec![outcome(0, "a", 0, "a"), outcome(1, "b", 1, "b")];
        assert_eq!(error_breakdown(&outcomes).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn breakdown_all_wrong_class() {
        let outcomes = vec![outcome(0, "a", 1, "b"), outcome(1, "b", 0, "a")];
        assert_eq!(error_breakdown(&outcomes).unwrap(), (0.0, 1.0));
    }

    #[test]
    fn breakdown_mixed_batch() {
        // 10 queries: 5 successes, 2 wrong-instance (same class), 3 wrong-class.
        let mut outcomes = vec![outcome(0, "a", 0, "a"); 5];
        outcomes.extend(vec![outcome(0, "a", 1, "a"); 2]);
        outcomes.extend(vec![outcome(0, "a", 2, "b"); 3]);
        let (di, dc) = error_breakdown(&outcomes).unwrap();
        assert_eq!((di, dc), (0.2, 0.3));
    }

    #[test]
    fn breakdown_rates_partition_unity() {
        let outcomes = vec![
            outcome(0, "a", 0, "a"),
            outcome(0, "a", 1, "a"),
            outcome(0, "a", 2, "b"),
            outcome(1, "b", 1, "b"),
        ];
        let (di, dc) = error_breakdown(&outcomes).unwrap();
        let success = outcomes.iter().filter(|o| o.is_success()).count() as f64
            / outcomes.len() as f64;
        assert_eq!(success + di + dc, 1.0);
    }
}
