//! PCA projection of feature sets for latent-space visualization.
//!
//! Implemented via singular value decomposition of the mean-centered data
//! matrix; the eigendecomposition of the covariance serves as the
//! independent oracle in tests.

use super::EvalError;
use ndarray::{Array1, Array2, ArrayView2};

/// Coordinates of every sample in the top principal components.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    /// `n x effective_dims` projected coordinates.
    pub coords: Array2<f64>,
    /// Sample variance captured by each kept component, non-increasing.
    pub explained_variance: Vec<f64>,
    pub requested_dims: usize,
    /// May be smaller than requested when the data is rank-deficient.
    pub effective_dims: usize,
}

impl PcaProjection {
    pub fn truncated(&self) -> bool {
        self.effective_dims < self.requested_dims
    }
}

/// Projects feature rows onto the top `dims` principal components of the
/// mean-centered matrix. Rank-deficient inputs yield fewer components.
pub fn pca_project(features: ArrayView2<f64>, dims: usize) -> Result<PcaProjection, EvalError> {
    let n = features.nrows();
    let d = features.ncols();
    if dims == 0 {
        return Err(EvalError::KMeans("pca dims must be at least 1".into()));
    }
    if n < dims + 1 {
        return Err(EvalError::TooFewSamples { need: dims + 1, got: n });
    }

    let mean: Array1<f64> = features.mean_axis(ndarray::Axis(0)).expect("nonempty");
    let mut centered = nalgebra::DMatrix::<f64>::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            centered[(i, j)] = features[(i, j)] - mean[j];
        }
    }

    let svd = centered.svd(true, false);
    let u = svd.u.as_ref().expect("u requested");
    let singular = &svd.singular_values;

    let max_sv = singular.iter().cloned().fold(0.0f64, f64::max);
    let tol = max_sv * (n.max(d) as f64) * f64::EPSILON;
    let rank = singular.iter().filter(|&&s| s > tol).count();
    let effective = dims.min(rank).min(d);
    if effective == 0 {
        return Err(EvalError::KMeans(
            "features have zero variance; nothing to project".into(),
        ));
    }

    let mut coords = Array2::zeros((n, effective));
    for i in 0..n {
        for j in 0..effective {
            coords[(i, j)] = u[(i, j)] * singular[j];
        }
    }
    let explained_variance: Vec<f64> = (0..effective)
        .map(|j| singular[j] * singular[j] / (n as f64 - 1.0))
        .collect();
    Ok(PcaProjection {
        coords,
        explained_variance,
        requested_dims: dims,
        effective_dims: effective,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn exact_low_dimensional_subspace_reconstructs() {
        // Points living in a 3D subspace of R^8: projecting to 3 components
        // must capture all the variance.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let basis = Array2::from_shape_simple_fn((3, 8), || rng.random_range(-1.0..1.0));
        let n = 40;
        let mut features = Array2::zeros((n, 8));
        for i in 0..n {
            let c = [
                rng.random_range(-2.0..2.0f64),
                rng.random_range(-2.0..2.0f64),
                rng.random_range(-2.0..2.0f64),
            ];
            for j in 0..8 {
                features[(i, j)] = c[0] * basis[(0, j)] + c[1] * basis[(1, j)] + c[2] * basis[(2, j)];
            }
        }
        let p = pca_project(features.view(), 3).unwrap();
        assert_eq!(p.effective_dims, 3);

        let total_var: f64 = {
            let mean = features.mean_axis(ndarray::Axis(0)).unwrap();
            features
                .rows()
                .into_iter()
                .map(|r| {
                    r.iter()
                        .zip(mean.iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                })
                .sum::<f64>()
                / (n as f64 - 1.0)
        };
        let captured: f64 = p.explained_variance.iter().sum();
        assert!(
            (total_var - captured).abs() <= 1e-6 * total_var.max(1.0),
            "residual variance {} vs {}",
            total_var,
            captured
        );
    }

    #[test]
    fn component_variances_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let features = Array2::from_shape_simple_fn((50, 10), || rng.random_range(-1.0..1.0));
        let p = pca_project(features.view(), 5).unwrap();
        for w in p.explained_variance.windows(2) {
            assert!(w[0] >= w[1] - 1e-12);
        }
    }

    #[test]
    fn variances_match_covariance_eigenvalues() {
        // Oracle: full symmetric eigendecomposition of the covariance.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 60;
        let d = 7;
        let features = Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0));
        let p = pca_project(features.view(), 3).unwrap();

        let mean = features.mean_axis(ndarray::Axis(0)).unwrap();
        let mut cov = nalgebra::DMatrix::<f64>::zeros(d, d);
        for a in 0..d {
            for b in 0..d {
                let mut acc = 0.0;
                for i in 0..n {
                    acc += (features[(i, a)] - mean[a]) * (features[(i, b)] - mean[b]);
                }
                cov[(a, b)] = acc / (n as f64 - 1.0);
            }
        }
        let mut eigen: Vec<f64> = cov.symmetric_eigen().eigenvalues.iter().cloned().collect();
        eigen.sort_by(|x, y| y.partial_cmp(x).unwrap());
        for (got, want) in p.explained_variance.iter().zip(eigen.iter()) {
            assert!((got - want).abs() < 1e-9, "{got} vs eigenvalue {want}");
        }
    }

    #[test]
    fn rank_deficient_input_truncates_with_flag() {
        // All points on a line in R^4: rank 1.
        let n = 10;
        let mut features = Array2::zeros((n, 4));
        for i in 0..n {
            for j in 0..4 {
                features[(i, j)] = i as f64 * (j as f64 + 1.0);
            }
        }
        let p = pca_project(features.view(), 3).unwrap();
        assert_eq!(p.effective_dims, 1);
        assert!(p.truncated());
    }

    #[test]
    fn too_few_samples_rejected() {
        let features = Array2::zeros((3, 5));
        assert!(matches!(
            pca_project(features.view(), 3),
            Err(EvalError::TooFewSamples { .. })
        ));
    }
}
