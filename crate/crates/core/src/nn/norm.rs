//! Normalization layers.
//!
//! Batch statistics are deliberately avoided: [`ChannelNorm`] normalizes each
//! sample over its own feature map and [`FrozenBatchNorm2d`] applies stored
//! running statistics as constants. Both keep samples independent, so batched
//! and per-item passes agree bit-for-bit and gradient work parallelizes
//! across samples without changing results.

use super::{Gradients, ParamKind, ParamMut, ParamRef, Scalar};
use ndarray::{Array1, Array3, Axis};

pub(crate) const NORM_EPS: f64 = 1e-5;

/// Per-sample normalization over the whole `(C, H, W)` activation with a
/// per-channel affine (group normalization with a single group).
#[derive(Debug, Clone)]
pub struct ChannelNorm<F> {
    pub path: String,
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
}

impl<F: Scalar> ChannelNorm<F> {
    pub fn new(path: String, channels: usize) -> Self {
        Self {
            path,
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
        }
    }

    /// Returns `(y, x_hat, inv_sigma)`; the latter two feed the backward pass.
    pub fn forward(&self, x: &Array3<F>) -> (Array3<F>, Array3<F>, F) {
        let n = F::from_f64(x.len() as f64);
        let mean = x.sum() / n;
        let var = x.fold(F::zero(), |acc, &v| {
            let d = v - mean;
            acc + d * d
        }) / n;
        let inv_sigma = F::one() / (var + F::from_f64(NORM_EPS)).sqrt();
        let xhat = x.mapv(|v| (v - mean) * inv_sigma);
        let mut y = xhat.clone();
        for (c, mut plane) in y.axis_iter_mut(Axis(0)).enumerate() {
            let g = self.gamma[c];
            let b = self.beta[c];
            plane.mapv_inplace(|v| v * g + b);
        }
        (y, xhat, inv_sigma)
    }

    pub fn backward(
        &self,
        xhat: &Array3<F>,
        inv_sigma: F,
        grad_out: &Array3<F>,
        grads: &mut Gradients<F>,
    ) -> Array3<F> {
        let channels = self.gamma.len();
        let mut dgamma = Array1::zeros(channels);
        let mut dbeta = Array1::zeros(channels);
        for c in 0..channels {
            let gy = grad_out.index_axis(Axis(0), c);
            let xh = xhat.index_axis(Axis(0), c);
            dgamma[c] = gy.iter().zip(xh.iter()).map(|(&g, &x)| g * x).sum();
            dbeta[c] = gy.sum();
        }

        // dL/dx_hat scaled by the affine, then the layer-norm input gradient.
        let mut g = grad_out.clone();
        for (c, mut plane) in g.axis_iter_mut(Axis(0)).enumerate() {
            let gamma = self.gamma[c];
            plane.mapv_inplace(|v| v * gamma);
        }
        let n = F::from_f64(g.len() as f64);
        let mean_g = g.sum() / n;
        let mean_gx = g
            .iter()
            .zip(xhat.iter())
            .map(|(&a, &b)| a * b)
            .sum::<F>()
            / n;
        let mut dx = g;
        ndarray::Zip::from(&mut dx).and(xhat).for_each(|d, &xh| {
            *d = (*d - mean_g - xh * mean_gx) * inv_sigma;
        });

        grads.add(&format!("{}.gamma", self.path), dgamma.into_dyn());
        grads.add(&format!("{}.beta", self.path), dbeta.into_dyn());
        dx
    }

    pub fn visit_params<'a>(&'a self, out: &mut Vec<ParamRef<'a, F>>) {
        out.push(ParamRef {
            path: format!("{}.gamma", self.path),
            data: self.gamma.view().into_dyn(),
            kind: ParamKind::Weight,
        });
        out.push(ParamRef {
            path: format!("{}.beta", self.path),
            data: self.beta.view().into_dyn(),
            kind: ParamKind::Weight,
        });
    }

    pub fn visit_params_mut<'a>(&'a mut self, out: &mut Vec<ParamMut<'a, F>>) {
        out.push(ParamMut {
            path: format!("{}.gamma", self.path),
            data: self.gamma.view_mut().into_dyn(),
            kind: ParamKind::Weight,
        });
        out.push(ParamMut {
            path: format!("{}.beta", self.path),
            data: self.beta.view_mut().into_dyn(),
            kind: ParamKind::Weight,
        });
    }
}

/// Batch normalization evaluated with fixed running statistics.
///
/// The statistics are serialized buffers, never updated and never optimized;
/// gamma/beta stay trainable. This is how externally pretrained weights are
/// consumed without reintroducing batch coupling.
#[derive(Debug, Clone)]
pub struct FrozenBatchNorm2d<F> {
    pub path: String,
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
}

impl<F: Scalar> FrozenBatchNorm2d<F> {
    pub fn new(path: String, channels: usize) -> Self {
        Self {
            path,
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
        }
    }

    fn scale(&self, c: usize) -> F {
        self.gamma[c] / (self.running_var[c] + F::from_f64(NORM_EPS)).sqrt()
    }

    /// Returns `(y, x_hat)`.
    pub fn forward(&self, x: &Array3<F>) -> (Array3<F>, Array3<F>) {
        let mut xhat = x.clone();
        for (c, mut plane) in xhat.axis_iter_mut(Axis(0)).enumerate() {
            let mean = self.running_mean[c];
            let inv = F::one() / (self.running_var[c] + F::from_f64(NORM_EPS)).sqrt();
            plane.mapv_inplace(|v| (v - mean) * inv);
        }
        let mut y = xhat.clone();
        for (c, mut plane) in y.axis_iter_mut(Axis(0)).enumerate() {
            let g = self.gamma[c];
            let b = self.beta[c];
            plane.mapv_inplace(|v| v * g + b);
        }
        (y, xhat)
    }

    pub fn backward(
        &self,
        xhat: &Array3<F>,
        grad_out: &Array3<F>,
        grads: &mut Gradients<F>,
    ) -> Array3<F> {
        let channels = self.gamma.len();
        let mut dgamma = Array1::zeros(channels);
        let mut dbeta = Array1::zeros(channels);
        let mut dx = grad_out.clone();
        for c in 0..channels {
            let gy = grad_out.index_axis(Axis(0), c);
            let xh = xhat.index_axis(Axis(0), c);
            dgamma[c] = gy.iter().zip(xh.iter()).map(|(&g, &x)| g * x).sum();
            dbeta[c] = gy.sum();
            let s = self.scale(c);
            dx.index_axis_mut(Axis(0), c).mapv_inplace(|v| v * s);
        }
        grads.add(&format!("{}.gamma", self.path), dgamma.into_dyn());
        grads.add(&format!("{}.beta", self.path), dbeta.into_dyn());
        dx
    }

    pub fn visit_params<'a>(&'a self, out: &mut Vec<ParamRef<'a, F>>) {
        out.push(ParamRef {
            path: format!("{}.gamma", self.path),
            data: self.gamma.view().into_dyn(),
            kind: ParamKind::Weight,
        });
        out.push(ParamRef {
            path: format!("{}.beta", self.path),
            data: self.beta.view().into_dyn(),
            kind: ParamKind::Weight,
        });
        out.push(ParamRef {
            path: format!("{}.running_mean", self.path),
            data: self.running_mean.view().into_dyn(),
            kind: ParamKind::Buffer,
        });
        out.push(ParamRef {
            path: format!("{}.running_var", self.path),
            data: self.running_var.view().into_dyn(),
            kind: ParamKind::Buffer,
        });
    }

    pub fn visit_params_mut<'a>(&'a mut self, out: &mut Vec<ParamMut<'a, F>>) {
        out.push(ParamMut {
            path: format!("{}.gamma", self.path),
            data: self.gamma.view_mut().into_dyn(),
            kind: ParamKind::Weight,
        });
        out.push(ParamMut {
            path: format!("{}.beta", self.path),
            data: self.beta.view_mut().into_dyn(),
            kind: ParamKind::Weight,
        });
        out.push(ParamMut {
            path: format!("{}.running_mean", self.path),
            data: self.running_mean.view_mut().into_dyn(),
            kind: ParamKind::Buffer,
        });
        out.push(ParamMut {
            path: format!("{}.running_var", self.path),
            data: self.running_var.view_mut().into_dyn(),
            kind: ParamKind::Buffer,
        });
    }
}

/// Layer normalization over a feature vector with per-feature affine.
#[derive(Debug, Clone)]
pub struct FeatureNorm<F> {
    pub path: String,
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
}

impl<F: Scalar> FeatureNorm<F> {
    pub fn new(path: String, dim: usize) -> Self {
        Self {
            path,
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    /// Returns `(y, x_hat, inv_sigma)`.
    pub fn forward(&self, x: &Array1<F>) -> (Array1<F>, Array1<F>, F) {
        let n = F::from_f64(x.len() as f64);
        let mean = x.sum() / n;
        let var = x.fold(F::zero(), |acc, &v| {
            let d = v - mean;
            acc + d * d
        }) / n;
        let inv_sigma = F::one() / (var + F::from_f64(NORM_EPS)).sqrt();
        let xhat = x.mapv(|v| (v - mean) * inv_sigma);
        let y = &xhat * &self.gamma + &self.beta;
        (y, xhat, inv_sigma)
    }

    pub fn backward(
        &self,
        xhat: &Array1<F>,
        inv_sigma: F,
        grad_out: &Array1<F>,
        grads: &mut Gradients<F>,
    ) -> Array1<F> {
        let dgamma = grad_out * xhat;
        let dbeta = grad_out.clone();
        let g = grad_out * &self.gamma;
        let n = F::from_f64(g.len() as f64);
        let mean_g = g.sum() / n;
        let mean_gx = g.iter().zip(xhat.iter()).map(|(&a, &b)| a * b).sum::<F>() / n;
        let dx = ndarray::Zip::from(&g)
            .and(xhat)
            .map_collect(|&gv, &xh| (gv - mean_g - xh * mean_gx) * inv_sigma);
        grads.add(&format!("{}.gamma", self.path), dgamma.into_dyn());
        grads.add(&format!("{}.beta", self.path), dbeta.into_dyn());
        dx
    }

    pub fn visit_params<'a>(&'a self, out: &mut Vec<ParamRef<'a, F>>) {
        out.push(ParamRef {
            path: format!("{}.gamma", self.path),
            data: self.gamma.view().into_dyn(),
            kind: ParamKind::Weight,
        });
        out.push(ParamRef {
            path: format!("{}.beta", self.path),
            data: self.beta.view().into_dyn(),
            kind: ParamKind::Weight,
        });
    }

    pub fn visit_params_mut<'a>(&'a mut self, out: &mut Vec<ParamMut<'a, F>>) {
        out.push(ParamMut {
            path: format!("{}.gamma", self.path),
            data: self.gamma.view_mut().into_dyn(),
            kind: ParamKind::Weight,
        });
        out.push(ParamMut {
            path: format!("{}.beta", self.path),
            data: self.beta.view_mut().into_dyn(),
            kind: ParamKind::Weight,
        });
    }
}
