//! Encoder model: convolutional backbone, projector/predictor heads and a
//! linear instance classifier.
//!
//! The backbone maps a preprocessed image to an embedding (global average
//! pool over the last feature map). Registration and retrieval consume that
//! embedding directly; the projector/predictor pair and the classifier only
//! participate in fine-tuning.

mod checkpoint;
mod preprocess;
mod profiles;

pub use checkpoint::{load_checkpoint, save_checkpoint, save_checkpoint_to_vec, CheckpointError};
pub use preprocess::{augment_pair, preprocess, Normalization, INPUT_SIZE, RESIZE_SIZE};

use crate::nn::{
    ConvStack, Gradients, Linear, Mlp, MlpCache, ParamKind, ParamMut, ParamRef, Scalar, StackCache,
};
use ndarray::{Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input shape {got:?} does not match expected (3, {expected}, {expected})")]
    InputShape { got: Vec<usize>, expected: usize },
    #[error("classifier is {width} wide but the dataset has {classes} instances")]
    ClassifierWidth { width: usize, classes: usize },
    #[error("unknown freeze boundary block '{0}'")]
    UnknownBoundary(String),
    #[error("embedding dimension mismatch: got {got}, expected {expected}")]
    DimMismatch { got: usize, expected: usize },
}

/// Backbone architecture family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Profile {
    /// Five-block convnet, 128-d embedding; trains on a CPU in minutes.
    #[serde(rename = "small")]
    Small,
    /// ResNet50-shaped backbone, 2048-d embedding, for externally trained
    /// weights; not intended for desk-scale training.
    #[serde(rename = "resnet50-compatible")]
    ResNet50Compat,
    /// Hand-assembled models (tests, experiments); not checkpointable.
    #[serde(rename = "custom")]
    Custom,
}

impl Profile {
    pub fn parse(name: &str) -> Option<Profile> {
        match name {
            "small" => Some(Profile::Small),
            "resnet50-compatible" => Some(Profile::ResNet50Compat),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Profile::Small => "small",
            Profile::ResNet50Compat => "resnet50-compatible",
            Profile::Custom => "custom",
        }
    }
}

/// A named group of convolutional layers; the freeze boundary is expressed
/// in terms of these names.
#[derive(Debug, Clone)]
pub struct Block<F> {
    pub name: String,
    pub layers: ConvStack<F>,
}

/// Convolutional feature extractor ending in a global average pool.
#[derive(Debug, Clone)]
pub struct Backbone<F> {
    pub blocks: Vec<Block<F>>,
}

impl<F: Scalar> Backbone<F> {
    /// Embedding for one input: all blocks, then global average pool.
    pub fn embed(&self, mut x: Array3<F>) -> Array1<F> {
        for block in &self.blocks {
            x = block.layers.forward(x);
        }
        global_avg_pool(&x)
    }

    /// Recorded embed; blocks before `first_trainable` run without caches
    /// (their backward pass is never taken).
    fn embed_rec(
        &self,
        mut x: Array3<F>,
        first_trainable: usize,
        caches: &mut Vec<StackCache<F>>,
    ) -> (Array1<F>, (usize, usize, usize)) {
        for (i, block) in self.blocks.iter().enumerate() {
            let mut cache = Vec::new();
            if i < first_trainable {
                x = block.layers.forward(x);
            } else {
                x = block.layers.forward_rec(x, &mut cache);
            }
            caches.push(cache);
        }
        let dim = x.dim();
        (global_avg_pool(&x), dim)
    }
}

fn global_avg_pool<F: Scalar>(x: &Array3<F>) -> Array1<F> {
    let (c, h, w) = x.dim();
    let scale = F::one() / F::from_f64((h * w) as f64);
    let mut out = Array1::zeros(c);
    for (ci, plane) in x.axis_iter(Axis(0)).enumerate() {
        out[ci] = plane.sum() * scale;
    }
    out
}

/// Outputs of one view through the training graph.
#[derive(Debug, Clone)]
pub struct ViewForward<F> {
    /// Backbone embedding (pre-projector).
    pub embedding: Array1<F>,
    /// Projector output `z`.
    pub z: Array1<F>,
    /// Predictor output `h`.
    pub h: Array1<F>,
    /// Instance-classifier logits.
    pub logits: Array1<F>,
}

/// Forward caches needed to backpropagate one view.
pub struct ViewTape<F> {
    block_caches: Vec<StackCache<F>>,
    feature_map_dim: (usize, usize, usize),
    embedding: Array1<F>,
    projector_cache: MlpCache<F>,
    predictor_cache: MlpCache<F>,
}

/// Both views of a training pair, per the fine-tuning graph contract.
#[derive(Debug, Clone)]
pub struct PairForward<F> {
    pub view_a: ViewForward<F>,
    pub view_b: ViewForward<F>,
}

/// The encoder with every head attached.
#[derive(Debug, Clone)]
pub struct EncoderModel<F = f32> {
    pub profile: Profile,
    pub backbone: Backbone<F>,
    pub projector: Mlp<F>,
    pub predictor: Mlp<F>,
    pub classifier: Linear<F>,
    pub num_classes: usize,
    pub backbone_dim: usize,
    pub projection_dim: usize,
    /// Name of the last block that freezes under partial fine-tuning.
    pub freeze_boundary: String,
    /// Whether partial freezing is currently active.
    pub partial_frozen: bool,
    pub normalization: Normalization,
    /// Expected square input side; `None` skips input validation (tests).
    pub input_size: Option<usize>,
}

impl<F: Scalar> EncoderModel<F> {
    pub fn new(profile: Profile, num_classes: usize, seed: u64) -> Self {
        match profile {
            Profile::Small => profiles::small(num_classes, seed),
            Profile::ResNet50Compat => profiles::resnet50_compat(num_classes, seed),
            Profile::Custom => panic!("custom models are built with from_parts"),
        }
    }

    /// Assembles a model from explicit pieces (toy models in tests,
    /// experimental architectures).
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        backbone: Backbone<F>,
        projector: Mlp<F>,
        predictor: Mlp<F>,
        classifier: Linear<F>,
        backbone_dim: usize,
        projection_dim: usize,
        freeze_boundary: &str,
        normalization: Normalization,
    ) -> Self {
        let num_classes = classifier.out_dim();
        Self {
            profile: Profile::Custom,
            backbone,
            projector,
            predictor,
            classifier,
            num_classes,
            backbone_dim,
            projection_dim,
            freeze_boundary: freeze_boundary.to_string(),
            partial_frozen: false,
            normalization,
            input_size: None,
        }
    }

    fn check_input(&self, x: &Array3<F>) -> Result<(), ModelError> {
        if let Some(size) = self.input_size {
            let (c, h, w) = x.dim();
            if c != 3 || h != size || w != size {
                return Err(ModelError::InputShape {
                    got: vec![c, h, w],
                    expected: size,
                });
            }
        }
        Ok(())
    }

    /// Backbone embedding in inference mode.
    pub fn embed(&self, input: &Array3<F>) -> Result<Array1<F>, ModelError> {
        self.check_input(input)?;
        Ok(self.backbone.embed(input.clone()))
    }

    /// Index of the freeze-boundary block.
    pub fn boundary_index(&self) -> Result<usize, ModelError> {
        self.backbone
            .blocks
            .iter()
            .position(|b| b.name == self.freeze_boundary)
            .ok_or_else(|| ModelError::UnknownBoundary(self.freeze_boundary.clone()))
    }

    /// Number of leading backbone blocks currently frozen.
    pub fn frozen_blocks(&self) -> usize {
        if !self.partial_frozen {
            return 0;
        }
        match self.boundary_index() {
            Ok(i) => i + 1,
            Err(_) => 0,
        }
    }

    /// Marks blocks up to and including the freeze boundary as non-trainable.
    pub fn set_partial_freeze(&mut self, active: bool) -> Result<(), ModelError> {
        if active {
            self.boundary_index()?;
        }
        self.partial_frozen = active;
        Ok(())
    }

    /// Whether the parameter at `path` participates in optimization.
    pub fn is_trainable(&self, path: &str, kind: ParamKind) -> bool {
        if kind == ParamKind::Buffer {
            return false;
        }
        let frozen = self.frozen_blocks();
        for block in &self.backbone.blocks[..frozen] {
            if path.starts_with(&format!("backbone.{}.", block.name)) {
                return false;
            }
        }
        true
    }

    /// All parameters in deterministic traversal order.
    pub fn params(&self) -> Vec<ParamRef<'_, F>> {
        let mut out = Vec::new();
        for block in &self.backbone.blocks {
            block.layers.visit_params(&mut out);
        }
        self.projector.visit_params(&mut out);
        self.predictor.visit_params(&mut out);
        self.classifier.visit_params(&mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_, F>> {
        let mut out = Vec::new();
        for block in &mut self.backbone.blocks {
            block.layers.visit_params_mut(&mut out);
        }
        self.projector.visit_params_mut(&mut out);
        self.predictor.visit_params_mut(&mut out);
        self.classifier.visit_params_mut(&mut out);
        out
    }

    /// One view through backbone + heads, inference mode.
    pub fn view_forward(&self, x: &Array3<F>) -> Result<ViewForward<F>, ModelError> {
        self.check_input(x)?;
        let embedding = self.backbone.embed(x.clone());
        let z = self.projector.forward(embedding.clone());
        let h = self.predictor.forward(z.clone());
        let logits = self.classifier.forward(&embedding);
        Ok(ViewForward {
            embedding,
            z,
            h,
            logits,
        })
    }

    /// Training graph for an augmented pair:
    /// `z = g(f(x))`, `h = p(z)`, `logits = c(f(x))` and likewise primed.
    pub fn forward_training(
        &self,
        x: &Array3<F>,
        x_prime: &Array3<F>,
    ) -> Result<PairForward<F>, ModelError> {
        Ok(PairForward {
            view_a: self.view_forward(x)?,
            view_b: self.view_forward(x_prime)?,
        })
    }

    /// Batched training forward; row `i` of each output corresponds to pair `i`.
    pub fn forward_training_batch(
        &self,
        xs: &[Array3<F>],
        x_primes: &[Array3<F>],
    ) -> Result<BatchForward<F>, ModelError> {
        assert_eq!(xs.len(), x_primes.len(), "pair lists must align");
        let mut pairs = Vec::with_capacity(xs.len());
        for (x, xp) in xs.iter().zip(x_primes) {
            pairs.push(self.forward_training(x, xp)?);
        }
        Ok(BatchForward::stack(&pairs, self))
    }

    /// Recorded forward pass for one view.
    pub fn view_forward_rec(&self, x: &Array3<F>) -> Result<(ViewForward<F>, ViewTape<F>), ModelError> {
        self.check_input(x)?;
        let mut block_caches = Vec::with_capacity(self.backbone.blocks.len());
        let (embedding, feature_map_dim) =
            self.backbone
                .embed_rec(x.clone(), self.frozen_blocks(), &mut block_caches);
        let mut projector_cache = Vec::new();
        let z = self
            .projector
            .forward_rec(embedding.clone(), &mut projector_cache);
        let mut predictor_cache = Vec::new();
        let h = self.predictor.forward_rec(z.clone(), &mut predictor_cache);
        let logits = self.classifier.forward(&embedding);
        Ok((
            ViewForward {
                embedding: embedding.clone(),
                z,
                h,
                logits,
            },
            ViewTape {
                block_caches,
                feature_map_dim,
                embedding,
                projector_cache,
                predictor_cache,
            },
        ))
    }

    /// Backpropagates one view given loss gradients at the predictor output
    /// and (optionally) the classifier logits.
    ///
    /// Contrastive targets are constants by construction — no gradient path
    /// enters here for `z` in its target role, which is exactly the
    /// stop-gradient semantics.
    pub fn view_backward(
        &self,
        tape: &ViewTape<F>,
        d_h: &Array1<F>,
        d_logits: Option<&Array1<F>>,
        grads: &mut Gradients<F>,
    ) {
        let d_z = self
            .predictor
            .backward(&tape.predictor_cache, d_h.clone(), grads, true)
            .expect("predictor input gradient");
        let mut d_embedding = self
            .projector
            .backward(&tape.projector_cache, d_z, grads, true)
            .expect("projector input gradient");
        if let Some(d_logits) = d_logits {
            let d_emb_cls = self
                .classifier
                .backward(&tape.embedding, d_logits, grads, true)
                .expect("classifier input gradient");
            d_embedding += &d_emb_cls;
        }

        // Global-average-pool backward, then the backbone blocks in reverse.
        // Blocks inside the frozen prefix are skipped entirely.
        let first_trainable = self.frozen_blocks();
        let (c, h, w) = tape.feature_map_dim;
        let scale = F::one() / F::from_f64((h * w) as f64);
        let mut grad = Array3::zeros((c, h, w));
        for (ci, mut plane) in grad.axis_iter_mut(Axis(0)).enumerate() {
            let g = d_embedding[ci] * scale;
            plane.fill(g);
        }

        let mut grad = Some(grad);
        for i in (first_trainable..self.backbone.blocks.len()).rev() {
            let block = &self.backbone.blocks[i];
            let need_input = i > first_trainable;
            grad = block.layers.backward(
                &tape.block_caches[i],
                grad.expect("gradient chain"),
                grads,
                need_input,
            );
            if grad.is_none() {
                break;
            }
        }
    }
}

/// Stacked training outputs for a batch of pairs.
#[derive(Debug, Clone)]
pub struct BatchForward<F> {
    pub z: Array2<F>,
    pub h: Array2<F>,
    pub logits: Array2<F>,
    pub z_prime: Array2<F>,
    pub h_prime: Array2<F>,
    pub logits_prime: Array2<F>,
}

impl<F: Scalar> BatchForward<F> {
    fn stack(pairs: &[PairForward<F>], model: &EncoderModel<F>) -> Self {
        let b = pairs.len();
        let dz = model.projection_dim;
        let c = model.num_classes;
        let mut out = BatchForward {
            z: Array2::zeros((b, dz)),
            h: Array2::zeros((b, dz)),
            logits: Array2::zeros((b, c)),
            z_prime: Array2::zeros((b, dz)),
            h_prime: Array2::zeros((b, dz)),
            logits_prime: Array2::zeros((b, c)),
        };
        for (i, pair) in pairs.iter().enumerate() {
            out.z.row_mut(i).assign(&pair.view_a.z);
            out.h.row_mut(i).assign(&pair.view_a.h);
            out.logits.row_mut(i).assign(&pair.view_a.logits);
            out.z_prime.row_mut(i).assign(&pair.view_b.z);
            out.h_prime.row_mut(i).assign(&pair.view_b.h);
            out.logits_prime.row_mut(i).assign(&pair.view_b.logits);
        }
        out
    }
}

/// A single backbone feature vector.
///
/// Registration and retrieval exchange these; they are always `f32`, the
/// storage format of the feature store.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Array1<f32>,
}

impl FeatureVector {
    pub fn new(values: Array1<f32>) -> Self {
        Self { values }
    }

    pub fn from_vec(values: Vec<f32>) -> Self {
        Self {
            values: Array1::from_vec(values),
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Encodes a preprocessed input into a backbone feature vector.
pub fn encode(model: &EncoderModel<f32>, input: &Array3<f32>) -> Result<FeatureVector, ModelError> {
    let embedding = model.embed(input)?;
    if embedding.len() != model.backbone_dim {
        return Err(ModelError::DimMismatch {
            got: embedding.len(),
            expected: model.backbone_dim,
        });
    }
    Ok(FeatureVector::new(embedding))
}

/// Preprocess + encode in one step.
pub fn encode_image(
    model: &EncoderModel<f32>,
    image: &image::RgbImage,
) -> Result<FeatureVector, ModelError> {
    let input = preprocess::<f32>(image, &model.normalization);
    encode(model, &input)
}
