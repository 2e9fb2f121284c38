//! Neural-network building blocks with hand-written forward/backward passes.
//!
//! Everything is generic over [`Scalar`] so the same layer code runs in `f32`
//! for production models and in `f64` for numerical tests (finite-difference
//! gradient checks need the extra precision).
//!
//! Layers cache whatever their backward pass needs during a recorded forward
//! pass; gradients are accumulated into a [`Gradients`] map keyed by parameter
//! path, which keeps optimizer state and checkpoint serialization aligned on
//! one naming scheme.

mod conv;
mod dense;
mod norm;
#[cfg(test)]
mod tests;

pub use conv::{im2col, ConvCache, ConvLayer, ConvStack, MaxPool2d, ResidualBlock};
pub use conv::{Conv2d, StackCache};
pub use dense::{DenseCache, DenseLayer, FrozenBatchNorm1d, Linear, Mlp, MlpCache};
pub use norm::{ChannelNorm, FeatureNorm, FrozenBatchNorm2d};

use ndarray::ArrayD;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

/// Floating-point element type for all layer math.
///
/// `from_f64` funnels every literal and RNG draw through `f64`, so an `f32`
/// model and an `f64` model built from the same seed hold the same values
/// (up to rounding), and constants live in one place.
pub trait Scalar: ndarray::NdFloat + std::iter::Sum {
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Marks whether a tensor participates in optimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Weights/biases: trainable unless their block is frozen.
    Weight,
    /// Running statistics and similar constants: never optimized,
    /// still serialized.
    Buffer,
}

/// Borrowed view of one named parameter tensor.
pub struct ParamRef<'a, F> {
    pub path: String,
    pub data: ndarray::ArrayViewD<'a, F>,
    pub kind: ParamKind,
}

/// Mutable view of one named parameter tensor.
pub struct ParamMut<'a, F> {
    pub path: String,
    pub data: ndarray::ArrayViewMutD<'a, F>,
    pub kind: ParamKind,
}

/// Gradient accumulator keyed by parameter path.
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    map: HashMap<String, ArrayD<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn new() -> Self {
        Self {
            map: HashMap::new(),
        }
    }

    /// Adds `grad` for `path`, accumulating if the path was already present.
    pub fn add(&mut self, path: &str, grad: ArrayD<F>) {
        match self.map.get_mut(path) {
            Some(existing) => *existing += &grad,
            None => {
                self.map.insert(path.to_string(), grad);
            }
        }
    }

    pub fn get(&self, path: &str) -> Option<&ArrayD<F>> {
        self.map.get(path)
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    /// Merges another gradient set into this one (element-wise sums).
    ///
    /// Accumulation order is controlled by the caller, which matters for
    /// bit-level determinism of training runs.
    pub fn merge(&mut self, other: &Gradients<F>) {
        for (path, grad) in &other.map {
            match self.map.get_mut(path) {
                Some(existing) => *existing += grad,
                None => {
                    self.map.insert(path.clone(), grad.clone());
                }
            }
        }
    }

    /// Scales every gradient by `factor` (used for batch averaging).
    pub fn scale(&mut self, factor: F) {
        for grad in self.map.values_mut() {
            *grad *= factor;
        }
    }
}

impl<F: Scalar> Default for Gradients<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Draws from a normal distribution via `f64` so the stream is identical
/// for every `Scalar` instantiation of the same seed.
pub(crate) fn normal_draw<F: Scalar>(rng: &mut ChaCha8Rng, std: f64) -> F {
    let x: f64 = rng.sample(rand_distr::StandardNormal);
    F::from_f64(x * std)
}

/// He-normal initialization for a weight tensor with the given fan-in.
pub(crate) fn he_init<F: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<F> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let values: Vec<F> = (0..n).map(|_| normal_draw(rng, std)).collect();
    ArrayD::from_shape_vec(ndarray::IxDyn(shape), values).expect("shape/product mismatch")
}
