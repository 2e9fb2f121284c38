//! Convolutional layers operating on single samples shaped `(C, H, W)`.
//!
//! Batching happens one level up (the trainer fans samples out across a
//! thread pool and merges gradients in index order), which keeps every
//! layer free of cross-sample coupling: encoding a batch is bit-identical
//! to encoding its items one by one.

use super::norm::{ChannelNorm, FrozenBatchNorm2d};
use super::{Gradients, ParamKind, ParamMut, ParamRef, Scalar};
use ndarray::{Array1, Array2, Array3, ArrayView3, Axis};

/// Unfolds `x` into a `(c_in*k*k, out_h*out_w)` patch matrix.
///
/// Out-of-bounds taps (zero padding) stay zero.
pub fn im2col<F: Scalar>(x: &ArrayView3<F>, k: usize, stride: usize, pad: usize) -> Array2<F> {
    let (c, h, w) = x.dim();
    let out_h = (h + 2 * pad - k) / stride + 1;
    let out_w = (w + 2 * pad - k) / stride + 1;
    let mut col = Array2::zeros((c * k * k, out_h * out_w));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let mut dst = col.row_mut(row);
                let mut idx = 0usize;
                for oy in 0..out_h {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        idx += out_w;
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..out_w {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dst[idx] = x[(ci, iy, ix as usize)];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters a patch-matrix gradient back onto the
/// input tensor.
fn col2im<F: Scalar>(
    dcol: &Array2<F>,
    input_dim: (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Array3<F> {
    let (c, h, w) = input_dim;
    let out_h = (h + 2 * pad - k) / stride + 1;
    let out_w = (w + 2 * pad - k) / stride + 1;
    let mut dx = Array3::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = dcol.row(row);
                let mut idx = 0usize;
                for oy in 0..out_h {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        idx += out_w;
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..out_w {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dx[(ci, iy, ix as usize)] += src[idx];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
    dx
}

/// 2D convolution stored as a GEMM-ready `(c_out, c_in*k*k)` weight matrix.
#[derive(Debug, Clone)]
pub struct Conv2d<F> {
    pub path: String,
    pub weight: Array2<F>,
    pub bias: Option<Array1<F>>,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl<F: Scalar> Conv2d<F> {
    pub fn output_dim(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn forward(&self, x: &Array3<F>) -> Array3<F> {
        let (_, h, w) = x.dim();
        let (out_h, out_w) = self.output_dim(h, w);
        let col = im2col(&x.view(), self.kernel, self.stride, self.pad);
        let mut y = self.weight.dot(&col);
        if let Some(bias) = &self.bias {
            y += &bias.view().insert_axis(Axis(1));
        }
        y.into_shape_with_order((self.c_out, out_h, out_w))
            .expect("conv output reshape")
    }

    fn backward(
        &self,
        x: &Array3<F>,
        grad_out: &Array3<F>,
        grads: &mut Gradients<F>,
        need_input_grad: bool,
    ) -> Option<Array3<F>> {
        let input_dim = x.dim();
        let (c_out, out_h, out_w) = grad_out.dim();
        let gy = grad_out
            .view()
            .into_shape_with_order((c_out, out_h * out_w))
            .expect("grad reshape");
        let col = im2col(&x.view(), self.kernel, self.stride, self.pad);
        grads.add(&format!("{}.weight", self.path), gy.dot(&col.t()).into_dyn());
        if self.bias.is_some() {
            grads.add(&format!("{}.bias", self.path), gy.sum_axis(Axis(1)).into_dyn());
        }
        if need_input_grad {
            let dcol = self.weight.t().dot(&gy);
            Some(col2im(&dcol, input_dim, self.kernel, self.stride, self.pad))
        } else {
            None
        }
    }
}

/// Max pooling; padded positions never win the max.
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl MaxPool2d {
    fn forward<F: Scalar>(&self, x: &Array3<F>) -> (Array3<F>, Vec<usize>) {
        let (c, h, w) = x.dim();
        let out_h = (h + 2 * self.pad - self.kernel) / self.stride + 1;
        let out_w = (w + 2 * self.pad - self.kernel) / self.stride + 1;
        let mut y = Array3::zeros((c, out_h, out_w));
        let mut argmax = vec![0usize; c * out_h * out_w];
        for ci in 0..c {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut best = F::neg_infinity();
                    let mut best_idx = 0usize;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let v = x[(ci, iy as usize, ix as usize)];
                            if v > best {
                                best = v;
                                best_idx = (ci * h + iy as usize) * w + ix as usize;
                            }
                        }
                    }
                    y[(ci, oy, ox)] = best;
                    argmax[(ci * out_h + oy) * out_w + ox] = best_idx;
                }
            }
        }
        (y, argmax)
    }

    fn backward<F: Scalar>(
        &self,
        input_dim: (usize, usize, usize),
        argmax: &[usize],
        grad_out: &Array3<F>,
    ) -> Array3<F> {
        let mut dx = Array3::zeros(input_dim);
        let flat = dx.as_slice_mut().expect("contiguous");
        for (g, &idx) in grad_out.iter().zip(argmax.iter()) {
            flat[idx] += *g;
        }
        dx
    }
}

/// Residual container: `y = main(x) + shortcut(x)`, identity shortcut when
/// the branch list is empty.
#[derive(Debug, Clone)]
pub struct ResidualBlock<F> {
    pub main: ConvStack<F>,
    pub shortcut: ConvStack<F>,
}

/// One step of a convolutional stack.
#[derive(Debug, Clone)]
pub enum ConvLayer<F> {
    Conv(Conv2d<F>),
    Norm(ChannelNorm<F>),
    FrozenBn(FrozenBatchNorm2d<F>),
    Relu,
    MaxPool(MaxPool2d),
    Residual(ResidualBlock<F>),
}

/// Per-layer forward cache; mirrors [`ConvLayer`] variants.
#[derive(Debug, Clone)]
pub enum ConvCache<F> {
    Conv { x: Array3<F> },
    Norm { xhat: Array3<F>, inv_sigma: F },
    FrozenBn { xhat: Array3<F> },
    Relu { mask: Array3<bool> },
    MaxPool { input_dim: (usize, usize, usize), argmax: Vec<usize> },
    Residual { main: StackCache<F>, shortcut: StackCache<F> },
}

/// Ordered forward caches for one [`ConvStack`] pass.
pub type StackCache<F> = Vec<ConvCache<F>>;

/// A plain sequence of convolutional layers.
#[derive(Debug, Clone)]
pub struct ConvStack<F>(pub Vec<ConvLayer<F>>);

impl<F: Scalar> ConvStack<F> {
    /// Inference forward pass (no caches).
    pub fn forward(&self, mut x: Array3<F>) -> Array3<F> {
        for layer in &self.0 {
            x = match layer {
                ConvLayer::Conv(conv) => conv.forward(&x),
                ConvLayer::Norm(norm) => norm.forward(&x).0,
                ConvLayer::FrozenBn(bn) => bn.forward(&x).0,
                ConvLayer::Relu => x.mapv_into(|v| v.max(F::zero())),
                ConvLayer::MaxPool(pool) => pool.forward(&x).0,
                ConvLayer::Residual(res) => {
                    let main = res.main.forward(x.clone());
                    let short = if res.shortcut.0.is_empty() {
                        x
                    } else {
                        res.shortcut.forward(x)
                    };
                    main + short
                }
            };
        }
        x
    }

    /// Recorded forward pass; appends one cache entry per layer.
    pub fn forward_rec(&self, mut x: Array3<F>, caches: &mut StackCache<F>) -> Array3<F> {
        for layer in &self.0 {
            x = match layer {
                ConvLayer::Conv(conv) => {
                    let y = conv.forward(&x);
                    caches.push(ConvCache::Conv { x });
                    y
                }
                ConvLayer::Norm(norm) => {
                    let (y, xhat, inv_sigma) = norm.forward(&x);
                    caches.push(ConvCache::Norm { xhat, inv_sigma });
                    y
                }
                ConvLayer::FrozenBn(bn) => {
                    let (y, xhat) = bn.forward(&x);
                    caches.push(ConvCache::FrozenBn { xhat });
                    y
                }
                ConvLayer::Relu => {
                    let y = x.mapv_into(|v| v.max(F::zero()));
                    caches.push(ConvCache::Relu {
                        mask: y.mapv(|v| v > F::zero()),
                    });
                    y
                }
                ConvLayer::MaxPool(pool) => {
                    let input_dim = x.dim();
                    let (y, argmax) = pool.forward(&x);
                    caches.push(ConvCache::MaxPool { input_dim, argmax });
                    y
                }
                ConvLayer::Residual(res) => {
                    let mut main_cache = Vec::new();
                    let main = res.main.forward_rec(x.clone(), &mut main_cache);
                    let mut shortcut_cache = Vec::new();
                    let short = if res.shortcut.0.is_empty() {
                        x
                    } else {
                        res.shortcut.forward_rec(x, &mut shortcut_cache)
                    };
                    caches.push(ConvCache::Residual {
                        main: main_cache,
                        shortcut: shortcut_cache,
                    });
                    main + short
                }
            };
        }
        x
    }

    /// Backward pass over the recorded caches.
    ///
    /// Returns the input gradient only when `need_input_grad` is set; the
    /// first trainable layer of a partially frozen model skips the (useless
    /// and expensive) gradient into the frozen prefix.
    pub fn backward(
        &self,
        caches: &StackCache<F>,
        mut grad: Array3<F>,
        grads: &mut Gradients<F>,
        need_input_grad: bool,
    ) -> Option<Array3<F>> {
        debug_assert_eq!(caches.len(), self.0.len());
        for (i, (layer, cache)) in self.0.iter().zip(caches.iter()).enumerate().rev() {
            let need = need_input_grad || i > 0;
            let next = match (layer, cache) {
                (ConvLayer::Conv(conv), ConvCache::Conv { x }) => {
                    conv.backward(x, &grad, grads, need)
                }
                (ConvLayer::Norm(norm), ConvCache::Norm { xhat, inv_sigma }) => {
                    Some(norm.backward(xhat, *inv_sigma, &grad, grads))
                }
                (ConvLayer::FrozenBn(bn), ConvCache::FrozenBn { xhat }) => {
                    Some(bn.backward(xhat, &grad, grads))
                }
                (ConvLayer::Relu, ConvCache::Relu { mask }) => {
                    ndarray::Zip::from(&mut grad).and(mask).for_each(|g, &m| {
                        if !m {
                            *g = F::zero();
                        }
                    });
                    Some(grad)
                }
                (ConvLayer::MaxPool(pool), ConvCache::MaxPool { input_dim, argmax }) => {
                    Some(pool.backward(*input_dim, argmax, &grad))
                }
                (ConvLayer::Residual(res), ConvCache::Residual { main, shortcut }) => {
                    let main_grad = res.main.backward(main, grad.clone(), grads, need);
                    let short_grad = if res.shortcut.0.is_empty() {
                        Some(grad)
                    } else {
                        res.shortcut.backward(shortcut, grad, grads, need)
                    };
                    match (main_grad, short_grad) {
                        (Some(a), Some(b)) => Some(a + b),
                        _ => None,
                    }
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
        for layer in &self.0 {
            match layer {
                ConvLayer::Conv(conv) => {
                    out.push(ParamRef {
                        path: format!("{}.weight", conv.path),
                        data: conv.weight.view().into_dyn(),
                        kind: ParamKind::Weight,
                    });
                    if let Some(bias) = &conv.bias {
                        out.push(ParamRef {
                            path: format!("{}.bias", conv.path),
                            data: bias.view().into_dyn(),
                            kind: ParamKind::Weight,
                        });
                    }
                }
                ConvLayer::Norm(norm) => norm.visit_params(out),
                ConvLayer::FrozenBn(bn) => bn.visit_params(out),
                ConvLayer::Relu | ConvLayer::MaxPool(_) => {}
                ConvLayer::Residual(res) => {
                    res.main.visit_params(out);
                    res.shortcut.visit_params(out);
                }
            }
        }
    }

    pub fn visit_params_mut<'a>(&'a mut self, out: &mut Vec<ParamMut<'a, F>>) {
        for layer in &mut self.0 {
            match layer {
                ConvLayer::Conv(conv) => {
                    out.push(ParamMut {
                        path: format!("{}.weight", conv.path),
                        data: conv.weight.view_mut().into_dyn(),
                        kind: ParamKind::Weight,
                    });
                    if let Some(bias) = &mut conv.bias {
                        out.push(ParamMut {
                            path: format!("{}.bias", conv.path),
                            data: bias.view_mut().into_dyn(),
                            kind: ParamKind::Weight,
                        });
                    }
                }
                ConvLayer::Norm(norm) => norm.visit_params_mut(out),
                ConvLayer::FrozenBn(bn) => bn.visit_params_mut(out),
                ConvLayer::Relu | ConvLayer::MaxPool(_) => {}
                ConvLayer::Residual(res) => {
                    res.main.visit_params_mut(out);
                    res.shortcut.visit_params_mut(out);
                }
            }
        }
    }
}
