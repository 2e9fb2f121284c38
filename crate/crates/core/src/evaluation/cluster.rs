//! Representation scoring: k-means over encoder features, agreement with
//! the true instance labels measured by the adjusted Rand index.

use super::EvalError;
use crate::data::MultiViewDataset;
use crate::encoder::{encode, preprocess, EncoderModel};
use crate::util::mix_seed;
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

const MAX_LLOYD_ITERS: usize = 100;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

fn assign(features: &ArrayView2<f64>, centroids: &Array2<f64>) -> (Vec<usize>, f64) {
    let mut labels = vec![0usize; features.nrows()];
    let mut wcss = 0.0;
    for (i, row) in features.rows().into_iter().enumerate() {
        let mut best = f64::INFINITY;
        let mut best_c = 0;
        for (c, cent) in centroids.rows().into_iter().enumerate() {
            let d = sq_dist(row.as_slice().unwrap(), cent.as_slice().unwrap());
            if d < best {
                best = d;
                best_c = c;
            }
        }
        labels[i] = best_c;
        wcss += best;
    }
    (labels, wcss)
}

fn kmeans_once(features: &ArrayView2<f64>, k: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, f64) {
    let n = features.nrows();
    let d = features.ncols();

    // k-means++ seeding.
    let mut centroids = Array2::zeros((k, d));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&features.row(first));
    let mut dist2: Vec<f64> = (0..n)
        .map(|i| {
            sq_dist(
                features.row(i).as_slice().unwrap(),
                centroids.row(0).as_slice().unwrap(),
            )
        })
        .collect();
    for c in 1..k {
        let total: f64 = dist2.iter().sum();
        let chosen = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut target = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &w) in dist2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        };
        centroids.row_mut(c).assign(&features.row(chosen));
        for i in 0..n {
            let d2 = sq_dist(
                features.row(i).as_slice().unwrap(),
                centroids.row(c).as_slice().unwrap(),
            );
            if d2 < dist2[i] {
                dist2[i] = d2;
            }
        }
    }

    // Lloyd iterations until assignments stabilize.
    let (mut labels, mut wcss) = assign(features, &centroids);
    for _ in 0..MAX_LLOYD_ITERS {
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (i, &c) in labels.iter().enumerate() {
            let mut row = sums.row_mut(c);
            row += &features.row(i);
            counts[c] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                let mut row = sums.row_mut(c);
                row /= counts[c] as f64;
                centroids.row_mut(c).assign(&row);
            }
            // Empty clusters keep their previous centroid.
        }
        let (new_labels, new_wcss) = assign(features, &centroids);
        let stable = new_labels == labels;
        labels = new_labels;
        wcss = new_wcss;
        if stable {
            break;
        }
    }
    (labels, wcss)
}

/// K-means clustering: best of `restarts` k-means++ initializations by
/// within-cluster sum of squares. Deterministic per seed.
pub fn kmeans(
    features: ArrayView2<f64>,
    k: usize,
    seed: u64,
    restarts: usize,
) -> Result<Vec<usize>, EvalError> {
    let n = features.nrows();
    if k == 0 {
        return Err(EvalError::KMeans("k must be at least 1".into()));
    }
    if k > n {
        return Err(EvalError::KMeans(format!("k={k} exceeds {n} samples")));
    }
    if restarts == 0 {
        return Err(EvalError::KMeans("restarts must be at least 1".into()));
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    for r in 0..restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0x63e5, r as u64]));
        let (labels, wcss) = kmeans_once(&features, k, &mut rng);
        if best.as_ref().map_or(true, |(_, b)| wcss < *b) {
            best = Some((labels, wcss));
        }
    }
    Ok(best.expect("restarts >= 1").0)
}

/// Within-cluster sum of squares of a labeling (for oracle tests).
pub fn wcss_of(features: ArrayView2<f64>, labels: &[usize], k: usize) -> f64 {
    let d = features.ncols();
    let mut sums = Array2::<f64>::zeros((k, d));
    let mut counts = vec![0usize; k];
    for (i, &c) in labels.iter().enumerate() {
        let mut row = sums.row_mut(c);
        row += &features.row(i);
        counts[c] += 1;
    }
    for c in 0..k {
        if counts[c] > 0 {
            let mut row = sums.row_mut(c);
            row /= counts[c] as f64;
        }
    }
    labels
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            sq_dist(
                features.row(i).as_slice().unwrap(),
                sums.row(c).as_slice().unwrap(),
            )
        })
        .sum()
}

fn comb2(n: usize) -> f64 {
    (n as f64) * (n as f64 - 1.0) / 2.0
}

/// Whether two labelings induce the same partition (a label bijection).
fn same_partition(a: &[usize], b: &[usize]) -> bool {
    use std::collections::HashMap;
    let mut fwd: HashMap<usize, usize> = HashMap::new();
    let mut rev: HashMap<usize, usize> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        if *fwd.entry(x).or_insert(y) != y || *rev.entry(y).or_insert(x) != x {
            return false;
        }
    }
    true
}

/// Adjusted Rand index between two labelings via the contingency table.
///
/// 1.0 for identical partitions; expected value 0 under independent random
/// labelings. Degenerate cases where the correction denominator vanishes
/// (e.g. one side constant) score 1.0 when the partitions coincide and 0.0
/// otherwise.
pub fn ari(labels_a: &[usize], labels_b: &[usize]) -> Result<f64, EvalError> {
    if labels_a.len() != labels_b.len() {
        return Err(EvalError::LengthMismatch {
            a: labels_a.len(),
            b: labels_b.len(),
        });
    }
    let n = labels_a.len();
    if n < 2 {
        return Err(EvalError::TooFewSamples { need: 2, got: n });
    }

    use std::collections::HashMap;
    let mut contingency: HashMap<(usize, usize), usize> = HashMap::new();
    let mut rows: HashMap<usize, usize> = HashMap::new();
    let mut cols: HashMap<usize, usize> = HashMap::new();
    for (&x, &y) in labels_a.iter().zip(labels_b) {
        *contingency.entry((x, y)).or_insert(0) += 1;
        *rows.entry(x).or_insert(0) += 1;
        *cols.entry(y).or_insert(0) += 1;
    }
    let sum_ij: f64 = contingency.values().map(|&c| comb2(c)).sum();
    let sum_a: f64 = rows.values().map(|&c| comb2(c)).sum();
    let sum_b: f64 = cols.values().map(|&c| comb2(c)).sum();
    let expected = sum_a * sum_b / comb2(n);
    let max_index = 0.5 * (sum_a + sum_b);
    let denom = max_index - expected;
    if denom.abs() < 1e-12 {
        return Ok(if same_partition(labels_a, labels_b) {
            1.0
        } else {
            0.0
        });
    }
    Ok((sum_ij - expected) / denom)
}

/// Representation quality of an encoder on one labeled dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepresentationScore {
    pub ari: f64,
    /// Number of clusters used (= distinct instances).
    pub k: usize,
    pub samples: usize,
}

/// Stacks feature vectors into an `f64` matrix for clustering/PCA.
pub fn stack_features(features: &[crate::encoder::FeatureVector]) -> Array2<f64> {
    let n = features.len();
    let d = features.first().map_or(0, |f| f.dim());
    let mut out = Array2::zeros((n, d));
    for (i, f) in features.iter().enumerate() {
        for (j, &v) in f.values.iter().enumerate() {
            out[(i, j)] = v as f64;
        }
    }
    out
}

/// ARI between a k-means clustering of `features` and reference labels.
pub fn cluster_ari(
    features: ArrayView2<f64>,
    labels: &[usize],
    k: usize,
    seed: u64,
    restarts: usize,
) -> Result<f64, EvalError> {
    let predicted = kmeans(features, k, seed, restarts)?;
    ari(&predicted, labels)
}

/// Encodes every dataset item, clusters with k = number of instances, and
/// scores agreement with the true instance IDs.
pub fn representation_score(
    encoder: &EncoderModel<f32>,
    ds: &MultiViewDataset,
    seed: u64,
    restarts: usize,
) -> Result<RepresentationScore, EvalError> {
    let ids = ds.instance_ids();
    let k = ids.len();
    if ds.len() < k {
        return Err(EvalError::TooFewSamples {
            need: k,
            got: ds.len(),
        });
    }
    let features: Vec<crate::encoder::FeatureVector> = ds
        .items
        .par_iter()
        .map(|item| {
            let input = preprocess::<f32>(&item.pixels, &encoder.normalization);
            encode(encoder, &input)
        })
        .collect::<Result<_, _>>()?;
    let id_to_index: std::collections::BTreeMap<u32, usize> = ids
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, i))
        .collect();
    let labels: Vec<usize> = ds.items.iter().map(|o| id_to_index[&o.instance_id]).collect();
    let matrix = stack_features(&features);
    let ari = cluster_ari(matrix.view(), &labels, k, seed, restarts)?;
    Ok(RepresentationScore {
        ari,
        k,
        samples: ds.len(),
    })
}

/// Train/test representation scores for one fine-tuning condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub ari_train: f64,
    pub ari_test: f64,
    pub k: usize,
    pub condition: String,
}

/// Scores one encoder on both splits.
pub fn cluster_report(
    encoder: &EncoderModel<f32>,
    ds_train: &MultiViewDataset,
    ds_test: &MultiViewDataset,
    condition: &str,
    seed: u64,
    restarts: usize,
) -> Result<ClusterReport, EvalError> {
    let train = representation_score(encoder, ds_train, seed, restarts)?;
    let test = representation_score(encoder, ds_test, seed, restarts)?;
    Ok(ClusterReport {
        ari_train: train.ari,
        ari_test: test.ari,
        k: train.k.max(test.k),
        condition: condition.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn kmeans_separates_two_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rows = Vec::new();
        let mut truth = Vec::new();
        for i in 0..30 {
            let (cx, label) = if i % 2 == 0 { (0.0, 0) } else { (10.0, 1) };
            rows.push([cx + rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)]);
            truth.push(label);
        }
        let features = Array2::from_shape_fn((30, 2), |(i, j)| rows[i][j]);
        let labels = kmeans(features.view(), 2, 7, 3).unwrap();
        assert!((ari(&labels, &truth).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kmeans_k_equals_n_gives_zero_wcss() {
        let features = array![[0.0, 0.0], [1.0, 0.0], [5.0, 5.0], [9.0, 1.0]];
        let labels = kmeans(features.view(), 4, 1, 2).unwrap();
        let mut sorted = labels.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 4, "each point in its own cluster");
        assert!(wcss_of(features.view(), &labels, 4) < 1e-18);
    }

    #[test]
    fn kmeans_beats_random_assignments_on_planted_points() {
        // Fixed 12-point configuration with 3 planted groups.
        let features = array![
            [0.0, 0.1], [0.2, -0.1], [-0.1, 0.0], [0.1, 0.2],
            [5.0, 5.1], [5.2, 4.9], [4.8, 5.0], [5.1, 5.2],
            [10.0, 0.1], [10.2, -0.2], [9.8, 0.0], [10.1, 0.1],
        ];
        let labels = kmeans(features.view(), 3, 11, 4).unwrap();
        let got = wcss_of(features.view(), &labels, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let random: Vec<usize> = (0..12).map(|_| rng.random_range(0..3)).collect();
            let w = wcss_of(features.view(), &random, 3);
            assert!(got <= w + 1e-12, "kmeans {got} vs random assignment {w}");
        }
    }

    #[test]
    fn kmeans_deterministic_per_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let features = Array2::from_shape_simple_fn((40, 6), || rng.random_range(-1.0..1.0));
        let a = kmeans(features.view(), 5, 21, 5).unwrap();
        let b = kmeans(features.view(), 5, 21, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ari_identical_partitions() {
        let a = vec![0, 0, 1, 1, 2, 2];
        assert_eq!(ari(&a, &a).unwrap(), 1.0);
        // Renaming labels preserves the partition.
        let b = vec![5, 5, 9, 9, 1, 1];
        assert_eq!(ari(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn ari_constant_vs_nontrivial_is_zero() {
        let constant = vec![0usize; 6];
        let other = vec![0, 0, 1, 1, 2, 2];
        assert_eq!(ari(&constant, &other).unwrap(), 0.0);
        assert_eq!(ari(&other, &constant).unwrap(), 0.0);
        // Two constant labelings are the same (trivial) partition.
        assert_eq!(ari(&constant, &constant).unwrap(), 1.0);
    }

    #[test]
    fn ari_hand_computed_contingency() {
        // a = [0,0,1,1], b = [0,0,1,2]:
        // pairs together in a: C(2,2)+C(2,2) = 2; in b: 1; in both: 1.
        // expected = 2*1/C(4,2) = 1/3; max = 1.5.
        // ARI = (1 - 1/3) / (1.5 - 1/3) = 4/7.
        let a = vec![0, 0, 1, 1];
        let b = vec![0, 0, 1, 2];
        let got = ari(&a, &b).unwrap();
        assert!((got - 4.0 / 7.0).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn ari_symmetry_and_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..30 {
            let a: Vec<usize> = (0..20).map(|_| rng.random_range(0..4)).collect();
            let b: Vec<usize> = (0..20).map(|_| rng.random_range(0..3)).collect();
            let ab = ari(&a, &b).unwrap();
            let ba = ari(&b, &a).unwrap();
            assert!((ab - ba).abs() < 1e-12);
            let perm: Vec<usize> = a.iter().map(|&x| (x + 7) * 3).collect();
            assert!((ari(&perm, &b).unwrap() - ab).abs() < 1e-12);
        }
    }

    #[test]
    fn ari_rejects_mismatched_lengths() {
        assert!(matches!(
            ari(&[0, 1], &[0, 1, 2]),
            Err(EvalError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn cluster_ari_perfect_for_distinct_constant_features() {
        // Encoder-like features: each instance a distinct constant vector.
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for inst in 0..4usize {
            for _ in 0..5 {
                rows.push([inst as f64 * 3.0, -(inst as f64)]);
                labels.push(inst);
            }
        }
        let features = Array2::from_shape_fn((rows.len(), 2), |(i, j)| rows[i][j]);
        let got = cluster_ari(features.view(), &labels, 4, 13, 3).unwrap();
        assert_eq!(got, 1.0);
    }

    #[test]
    fn cluster_ari_near_zero_for_collapsed_features() {
        // Everything one vector + jitter: clusters carry no label signal.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 60;
        let features = Array2::from_shape_simple_fn((n, 4), || 1.0 + rng.random_range(-1e-3..1e-3));
        let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
        let got = cluster_ari(features.view(), &labels, 4, 19, 3).unwrap();
        assert!(got.abs() < 0.1, "collapsed features should score ~0, got {got}");
    }
}
