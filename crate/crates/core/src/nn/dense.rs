//! Fully connected layers for the projector / predictor / classifier heads.

use super::norm::{FeatureNorm, NORM_EPS};
use super::{Gradients, ParamKind, ParamMut, ParamRef, Scalar};
use ndarray::{Array1, Array2};

/// Affine layer `y = Wx + b`.
#[derive(Debug, Clone)]
pub struct Linear<F> {
    pub path: String,
    pub weight: Array2<F>,
    pub bias: Option<Array1<F>>,
}

impl<F: Scalar> Linear<F> {
    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: &Array1<F>) -> Array1<F> {
        let mut y = self.weight.dot(x);
        if let Some(bias) = &self.bias {
            y += bias;
        }
        y
    }

    pub fn backward(
        &self,
        x: &Array1<F>,
        grad_out: &Array1<F>,
        grads: &mut Gradients<F>,
        need_input_grad: bool,
    ) -> Option<Array1<F>> {
        let dw = grad_out
            .view()
            .insert_axis(ndarray::Axis(1))
            .dot(&x.view().insert_axis(ndarray::Axis(0)));
        grads.add(&format!("{}.weight", self.path), dw.into_dyn());
        if self.bias.is_some() {
            grads.add(&format!("{}.bias", self.path), grad_out.clone().into_dyn());
        }
        if need_input_grad {
            Some(self.weight.t().dot(grad_out))
        } else {
            None
        }
    }

    pub fn visit_params<'a>(&'a self, out: &mut Vec<ParamRef<'a, F>>) {
        out.push(ParamRef {
            path: format!("{}.weight", self.path),
            data: self.weight.view().into_dyn(),
            kind: ParamKind::Weight,
        });
        if let Some(bias) = &self.bias {
            out.push(ParamRef {
                path: format!("{}.bias", self.path),
                data: bias.view().into_dyn(),
                kind: ParamKind::Weight,
            });
        }
    }

    pub fn visit_params_mut<'a>(&'a mut self, out: &mut Vec<ParamMut<'a, F>>) {
        out.push(ParamMut {
            path: format!("{}.weight", self.path),
            data: self.weight.view_mut().into_dyn(),
            kind: ParamKind::Weight,
        });
        if let Some(bias) = &mut self.bias {
            out.push(ParamMut {
                path: format!("{}.bias", self.path),
                data: bias.view_mut().into_dyn(),
                kind: ParamKind::Weight,
            });
        }
    }
}

/// Batch norm over features with fixed running statistics (see the 2D
/// counterpart for rationale).
#[derive(Debug, Clone)]
pub struct FrozenBatchNorm1d<F> {
    pub path: String,
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
}

impl<F: Scalar> FrozenBatchNorm1d<F> {
    pub fn new(path: String, dim: usize) -> Self {
        Self {
            path,
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            running_mean: Array1::zeros(dim),
            running_var: Array1::ones(dim),
        }
    }

    /// Returns `(y, x_hat)`.
    pub fn forward(&self, x: &Array1<F>) -> (Array1<F>, Array1<F>) {
        let eps = F::from_f64(NORM_EPS);
        let xhat = ndarray::Zip::from(x)
            .and(&self.running_mean)
            .and(&self.running_var)
            .map_collect(|&v, &m, &var| (v - m) / (var + eps).sqrt());
        let y = &xhat * &self.gamma + &self.beta;
        (y, xhat)
    }

    pub fn backward(
        &self,
        xhat: &Array1<F>,
        grad_out: &Array1<F>,
        grads: &mut Gradients<F>,
    ) -> Array1<F> {
        let eps = F::from_f64(NORM_EPS);
        grads.add(&format!("{}.gamma", self.path), (grad_out * xhat).into_dyn());
        grads.add(&format!("{}.beta", self.path), grad_out.clone().into_dyn());
        ndarray::Zip::from(grad_out)
            .and(&self.gamma)
            .and(&self.running_var)
            .map_collect(|&g, &gamma, &var| g * gamma / (var + eps).sqrt())
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

/// One step of an MLP head.
#[derive(Debug, Clone)]
pub enum DenseLayer<F> {
    Linear(Linear<F>),
    Norm(FeatureNorm<F>),
    FrozenBn(FrozenBatchNorm1d<F>),
    Relu,
}

/// Per-layer forward cache; mirrors [`DenseLayer`] variants.
#[derive(Debug, Clone)]
pub enum DenseCache<F> {
    Linear { x: Array1<F> },
    Norm { xhat: Array1<F>, inv_sigma: F },
    FrozenBn { xhat: Array1<F> },
    Relu { mask: Array1<bool> },
}

pub type MlpCache<F> = Vec<DenseCache<F>>;

/// A small fully connected head.
#[derive(Debug, Clone)]
pub struct Mlp<F> {
    pub layers: Vec<DenseLayer<F>>,
}

impl<F: Scalar> Mlp<F> {
    pub fn forward(&self, mut x: Array1<F>) -> Array1<F> {
        for layer in &self.layers {
            x = match layer {
                DenseLayer::Linear(lin) => lin.forward(&x),
                DenseLayer::Norm(norm) => norm.forward(&x).0,
                DenseLayer::FrozenBn(bn) => bn.forward(&x).0,
                DenseLayer::Relu => x.mapv_into(|v| v.max(F::zero())),
            };
        }
        x
    }

    pub fn forward_rec(&self, mut x: Array1<F>, caches: &mut MlpCache<F>) -> Array1<F> {
        for layer in &self.layers {
            x = match layer {
                DenseLayer::Linear(lin) => {
                    let y = lin.forward(&x);
                    caches.push(DenseCache::Linear { x });
                    y
                }
                DenseLayer::Norm(norm) => {
                    let (y, xhat, inv_sigma) = norm.forward(&x);
                    caches.push(DenseCache::Norm { xhat, inv_sigma });
                    y
                }
                DenseLayer::FrozenBn(bn) => {
                    let (y, xhat) = bn.forward(&x);
                    caches.push(DenseCache::FrozenBn { xhat });
                    y
                }
                DenseLayer::Relu => {
                    let y = x.mapv_into(|v| v.max(F::zero()));
                    caches.push(DenseCache::Relu {
                        mask: y.mapv(|v| v > F::zero()),
                    });
                    y
                }
            };
        }
        x
    }

    pub fn backward(
        &self,
        caches: &MlpCache<F>,
        mut grad: Array1<F>,
        grads: &mut Gradients<F>,
        need_input_grad: bool,
    ) -> Option<Array1<F>> {
        debug_assert_eq!(caches.len(), self.layers.len());
        for (i, (layer, cache)) in self.layers.iter().zip(caches.iter()).enumerate().rev() {
            let need = need_input_grad || i > 0;
            let next = match (layer, cache) {
                (DenseLayer::Linear(lin), DenseCache::Linear { x }) => {
                    lin.backward(x, &grad, grads, need)
                }
                (DenseLayer::Norm(norm), DenseCache::Norm { xhat, inv_sigma }) => {
                    Some(norm.backward(xhat, *inv_sigma, &grad, grads))
                }
                (DenseLayer::FrozenBn(bn), DenseCache::FrozenBn { xhat }) => {
                    Some(bn.backward(xhat, &grad, grads))
                }
                (DenseLayer::Relu, DenseCache::Relu { mask }) => {
                    ndarray::Zip::from(&mut grad).and(mask).for_each(|g, &m| {
                        if !m {
                            *g = F::zero();
                        }
                    });
                    Some(grad)
                }
                _ => unreachable!("cache/layer mismatch"),
            };
            match next {
                Some(g) => grad = g,
                None => return None,
            }
        }
        Some(grad)
    }

    pub fn visit_params<'a>(&'a self, out: &mut Vec<ParamRef<'a, F>>) {
        for layer in &self.layers {
            match layer {
                DenseLayer::Linear(lin) => lin.visit_params(out),
                DenseLayer::Norm(norm) => norm.visit_params(out),
                DenseLayer::FrozenBn(bn) => bn.visit_params(out),
                DenseLayer::Relu => {}
            }
        }
    }

    pub fn visit_params_mut<'a>(&'a mut self, out: &mut Vec<ParamMut<'a, F>>) {
        for layer in &mut self.layers {
            match layer {
                DenseLayer::Linear(lin) => lin.visit_params_mut(out),
                DenseLayer::Norm(norm) => norm.visit_params_mut(out),
                DenseLayer::FrozenBn(bn) => bn.visit_params_mut(out),
                DenseLayer::Relu => {}
            }
        }
    }
}
