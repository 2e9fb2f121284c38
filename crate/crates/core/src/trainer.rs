//! Self-supervised fine-tuning: combined contrastive + classification loss
//! minimized with SGD under any of the four freezing/classifier conditions.
//!
//! The loss over one augmented pair is
//!
//! ```text
//! L = -1/2 [cos(h, sg(z')) + cos(h', sg(z))]
//!     + 1/2 [CE(logits, y) + CE(logits', y')]
//! ```
//!
//! with `sg` the stop-gradient (projector outputs act as constants in their
//! target role) and the CE bracket dropped when the classifier is disabled.
//! Minimizing the negative cosine pulls the predictor output toward the
//! partner view's projection; the classifier term ties all views of an
//! instance to its pseudo-label from the semantic map.

use crate::data::MultiViewDataset;
use crate::encoder::{augment_pair, EncoderModel, ModelError, Profile};
use crate::nn::{Gradients, ParamKind, Scalar};
use crate::util::mix_seed;
use ndarray::{Array1, ArrayD};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("pair labels disagree: {a} vs {b} (views of one instance share a label)")]
    LabelMismatch { a: usize, b: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("need at least 2 instances, got {0}")]
    TooFewInstances(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("cannot write training log: {0}")]
    Log(#[from] std::io::Error),
}

/// Hyperparameters and condition switches for one fine-tuning run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub use_classifier: bool,
    pub freeze_partial: bool,
    pub seed: u64,
    pub backbone_profile: Profile,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr: 0.07,
            weight_decay: 1.5e-6,
            momentum: 0.9,
            epochs: 100,
            use_classifier: true,
            freeze_partial: true,
            seed: 0,
            backbone_profile: Profile::Small,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(TrainError::ShapeMismatch(
                "batch_size and epochs must be positive".into(),
            ));
        }
        if self.lr <= 0.0 || self.momentum < 0.0 || self.weight_decay < 0.0 {
            return Err(TrainError::ShapeMismatch(
                "lr must be positive; momentum/weight_decay nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// The four fine-tuning conditions: full vs. partial parameter updates,
/// with or without the attached instance classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainCondition {
    AllWithClassifier,
    PartialWithClassifier,
    AllNoClassifier,
    PartialNoClassifier,
}

impl TrainCondition {
    pub const ALL: [TrainCondition; 4] = [
        TrainCondition::AllWithClassifier,
        TrainCondition::PartialWithClassifier,
        TrainCondition::AllNoClassifier,
        TrainCondition::PartialNoClassifier,
    ];

    pub fn freeze_partial(&self) -> bool {
        matches!(
            self,
            TrainCondition::PartialWithClassifier | TrainCondition::PartialNoClassifier
        )
    }

    pub fn use_classifier(&self) -> bool {
        matches!(
            self,
            TrainCondition::AllWithClassifier | TrainCondition::PartialWithClassifier
        )
    }

    /// Partially frozen runs train for half the epochs of full runs.
    pub fn epochs(&self, full_epochs: usize) -> usize {
        if self.freeze_partial() {
            (full_epochs / 2).max(1)
        } else {
            full_epochs
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            TrainCondition::AllWithClassifier => "all+classifier",
            TrainCondition::PartialWithClassifier => "partial+classifier",
            TrainCondition::AllNoClassifier => "all",
            TrainCondition::PartialNoClassifier => "partial",
        }
    }

    pub fn apply(&self, cfg: &mut TrainConfig) {
        cfg.freeze_partial = self.freeze_partial();
        cfg.use_classifier = self.use_classifier();
        cfg.epochs = self.epochs(cfg.epochs);
    }
}

/// Per-epoch training curves.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainReport {
    pub loss_history: Vec<f64>,
    pub contrastive_history: Vec<f64>,
    pub ce_history: Vec<f64>,
    pub lr_history: Vec<f64>,
    pub wall_time_s: f64,
}

impl TrainReport {
    /// Writes the per-epoch CSV log (`epoch,total,contrastive,ce,lr`).
    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        let mut out = String::from("epoch,total,contrastive,ce,lr\n");
        for e in 0..self.loss_history.len() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e,
                self.loss_history[e],
                self.contrastive_history[e],
                self.ce_history[e],
                self.lr_history[e]
            ));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Cosine learning-rate schedule: `base * (1 + cos(pi * epoch/total)) / 2`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, base_lr: f64) -> f64 {
    assert!(epoch < total_epochs, "epoch {epoch} out of {total_epochs}");
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / total_epochs as f64).cos())
}

fn cosine<F: Scalar>(a: &Array1<F>, b: &Array1<F>) -> Result<F, TrainError> {
    if a.len() != b.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "cosine on {} vs {} dims",
            a.len(),
            b.len()
        )));
    }
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == F::zero() || nb == F::zero() {
        return Err(TrainError::ShapeMismatch("cosine of zero vector".into()));
    }
    Ok(a.dot(b) / (na * nb))
}

/// Cross-entropy of one logit vector against a class index, log-sum-exp
/// stabilized. Returns the loss and (optionally reused) softmax.
fn cross_entropy<F: Scalar>(logits: &Array1<F>, label: usize) -> Result<(F, Array1<F>), TrainError> {
    if label >= logits.len() {
        return Err(TrainError::LabelRange {
            label,
            classes: logits.len(),
        });
    }
    let max = logits.fold(F::neg_infinity(), |m, &v| m.max(v));
    let exps = logits.mapv(|v| (v - max).exp());
    let sum: F = exps.sum();
    let log_sum = sum.ln() + max;
    let loss = log_sum - logits[label];
    Ok((loss, exps / sum))
}

/// The fine-tuning loss for one augmented pair (see module docs).
///
/// `y_true` and `y_prime_true` must agree: both views come from one image
/// of one instance.
#[allow(clippy::too_many_arguments)]
pub fn simview_loss<F: Scalar>(
    z: &Array1<F>,
    h: &Array1<F>,
    logits: &Array1<F>,
    y_true: usize,
    z_prime: &Array1<F>,
    h_prime: &Array1<F>,
    logits_prime: &Array1<F>,
    y_prime_true: usize,
    use_classifier: bool,
) -> Result<F, TrainError> {
    if y_true != y_prime_true {
        return Err(TrainError::LabelMismatch {
            a: y_true,
            b: y_prime_true,
        });
    }
    let half = F::from_f64(0.5);
    let contrastive = -half * (cosine(h, z_prime)? + cosine(h_prime, z)?);
    if !use_classifier {
        return Ok(contrastive);
    }
    let (ce_a, _) = cross_entropy(logits, y_true)?;
    let (ce_b, _) = cross_entropy(logits_prime, y_prime_true)?;
    Ok(contrastive + half * (ce_a + ce_b))
}

/// Loss pieces plus the gradients that enter the network backward pass.
pub(crate) struct PairLoss<F> {
    pub total: F,
    pub contrastive: F,
    pub ce: F,
    pub d_h: Array1<F>,
    pub d_h_prime: Array1<F>,
    pub d_logits: Option<Array1<F>>,
    pub d_logits_prime: Option<Array1<F>>,
}

/// Gradient of `-1/2 cos(h, a)` with respect to `h`, `a` constant.
fn neg_half_cos_grad<F: Scalar>(h: &Array1<F>, a: &Array1<F>) -> Array1<F> {
    let half = F::from_f64(0.5);
    let nh = h.dot(h).sqrt();
    let na = a.dot(a).sqrt();
    let c = h.dot(a) / (nh * na);
    // d cos / dh = a/(|h||a|) - cos * h/|h|^2
    let mut g = a.mapv(|v| v / (nh * na));
    g.scaled_add(-c / (nh * nh), h);
    g.mapv_into(|v| -half * v)
}

/// Loss and input-side gradients for one pair, honoring stop-gradient:
/// the cosine terms treat `z` / `z'` as constants, so no gradient flows
/// into the projector through its target role.
#[allow(clippy::too_many_arguments)]
pub(crate) fn pair_loss_and_grads<F: Scalar>(
    z: &Array1<F>,
    h: &Array1<F>,
    logits: &Array1<F>,
    z_prime: &Array1<F>,
    h_prime: &Array1<F>,
    logits_prime: &Array1<F>,
    label: usize,
    use_classifier: bool,
) -> Result<PairLoss<F>, TrainError> {
    let half = F::from_f64(0.5);
    let contrastive = -half * (cosine(h, z_prime)? + cosine(h_prime, z)?);
    let d_h = neg_half_cos_grad(h, z_prime);
    let d_h_prime = neg_half_cos_grad(h_prime, z);

    if !use_classifier {
        return Ok(PairLoss {
            total: contrastive,
            contrastive,
            ce: F::zero(),
            d_h,
            d_h_prime,
            d_logits: None,
            d_logits_prime: None,
        });
    }

    let (ce_a, mut soft_a) = cross_entropy(logits, label)?;
    let (ce_b, mut soft_b) = cross_entropy(logits_prime, label)?;
    let ce = half * (ce_a + ce_b);
    soft_a[label] -= F::one();
    soft_b[label] -= F::one();
    soft_a.mapv_inplace(|v| v * half);
    soft_b.mapv_inplace(|v| v * half);
    Ok(PairLoss {
        total: contrastive + ce,
        contrastive,
        ce,
        d_h,
        d_h_prime,
        d_logits: Some(soft_a),
        d_logits_prime: Some(soft_b),
    })
}

/// SGD with momentum and decoupled-from-nothing weight decay (the decay is
/// added to the gradient, the reference setup for this family of models).
pub(crate) struct Sgd<F> {
    pub momentum: F,
    pub weight_decay: F,
    velocity: HashMap<String, ArrayD<F>>,
}

impl<F: Scalar> Sgd<F> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum: F::from_f64(momentum),
            weight_decay: F::from_f64(weight_decay),
            velocity: HashMap::new(),
        }
    }

    /// One update step. Parameters without a gradient entry (frozen blocks,
    /// unused heads) are untouched.
    pub fn step(&mut self, model: &mut EncoderModel<F>, grads: &Gradients<F>, lr: f64) {
        let lr = F::from_f64(lr);
        let trainable: Vec<bool> = model
            .params()
            .iter()
            .map(|p| model.is_trainable(&p.path, p.kind))
            .collect();
        for (param, is_trainable) in model.params_mut().into_iter().zip(trainable) {
            if !is_trainable {
                continue;
            }
            let Some(grad) = grads.get(&param.path) else {
                continue;
            };
            let path = param.path;
            let mut data = param.data;
            let velocity = self
                .velocity
                .entry(path)
                .or_insert_with(|| ArrayD::zeros(data.raw_dim()));
            ndarray::Zip::from(velocity.view_mut())
                .and(&mut data)
                .and(grad)
                .for_each(|v, p, &g| {
                    let g_eff = g + self.weight_decay * *p;
                    *v = self.momentum * *v + g_eff;
                    *p = *p - lr * *v;
                });
        }
    }
}

/// Marks blocks up to and including the model's freeze boundary as fixed;
/// projector, predictor and classifier stay trainable.
pub fn freeze_partial<F: Scalar>(mut model: EncoderModel<F>) -> Result<EncoderModel<F>, ModelError> {
    model.set_partial_freeze(true)?;
    Ok(model)
}

/// Releases partial freezing.
pub fn unfreeze_all<F: Scalar>(mut model: EncoderModel<F>) -> Result<EncoderModel<F>, ModelError> {
    model.set_partial_freeze(false)?;
    Ok(model)
}

/// Number of (trainable, total) weight elements under the current freeze state.
pub fn trainable_parameter_count<F: Scalar>(model: &EncoderModel<F>) -> (usize, usize) {
    let mut trainable = 0;
    let mut total = 0;
    for p in model.params() {
        if p.kind != ParamKind::Weight {
            continue;
        }
        total += p.data.len();
        if model.is_trainable(&p.path, p.kind) {
            trainable += p.data.len();
        }
    }
    (trainable, total)
}

/// Maps dataset instance IDs (the pseudo-labels) to dense class indices.
pub fn label_mapping(ds: &MultiViewDataset) -> BTreeMap<u32, usize> {
    ds.instance_ids()
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id, i))
        .collect()
}

/// Fine-tunes the encoder on the observed multi-view images and their
/// pseudo-labels. Deterministic per seed.
pub fn train(
    model: EncoderModel<f32>,
    ds_train: &MultiViewDataset,
    cfg: &TrainConfig,
) -> Result<(EncoderModel<f32>, TrainReport), TrainError> {
    cfg.validate()?;
    if ds_train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let labels = label_mapping(ds_train);
    if labels.len() < 2 {
        return Err(TrainError::TooFewInstances(labels.len()));
    }
    if model.num_classes != labels.len() {
        return Err(ModelError::ClassifierWidth {
            width: model.num_classes,
            classes: labels.len(),
        }
        .into());
    }

    let started = std::time::Instant::now();
    let mut model = model;
    model.set_partial_freeze(cfg.freeze_partial)?;
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut report = TrainReport {
        loss_history: Vec::with_capacity(cfg.epochs),
        contrastive_history: Vec::with_capacity(cfg.epochs),
        ce_history: Vec::with_capacity(cfg.epochs),
        lr_history: Vec::with_capacity(cfg.epochs),
        wall_time_s: 0.0,
    };

    let n = ds_train.len();
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr);
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[0xe70c, epoch as u64]));
        order.shuffle(&mut rng);

        let mut sum_total = 0.0f64;
        let mut sum_contrastive = 0.0f64;
        let mut sum_ce = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            // Per-sample forward/backward in parallel; the merge below runs
            // in batch order so results do not depend on scheduling.
            let per_sample: Vec<Result<(f64, f64, f64, Gradients<f32>), TrainError>> = batch
                .par_iter()
                .map(|&idx| {
                    let item = &ds_train.items[idx];
                    let label = labels[&item.instance_id];
                    let sample_seed = mix_seed(cfg.seed, &[0xa06, epoch as u64, idx as u64]);
                    let (xa, xb) =
                        augment_pair::<f32>(&item.pixels, sample_seed, &model.normalization);
                    let (fa, tape_a) = model.view_forward_rec(&xa)?;
                    let (fb, tape_b) = model.view_forward_rec(&xb)?;
                    let pl = pair_loss_and_grads(
                        &fa.z,
                        &fa.h,
                        &fa.logits,
                        &fb.z,
                        &fb.h,
                        &fb.logits,
                        label,
                        cfg.use_classifier,
                    )?;
                    let mut grads = Gradients::new();
                    model.view_backward(&tape_a, &pl.d_h, pl.d_logits.as_ref(), &mut grads);
                    model.view_backward(
                        &tape_b,
                        &pl.d_h_prime,
                        pl.d_logits_prime.as_ref(),
                        &mut grads,
                    );
                    Ok((
                        pl.total as f64,
                        pl.contrastive as f64,
                        pl.ce as f64,
                        grads,
                    ))
                })
                .collect();

            let mut batch_grads = Gradients::new();
            for result in per_sample {
                let (total, contrastive, ce, grads) = result?;
                sum_total += total;
                sum_contrastive += contrastive;
                sum_ce += ce;
                batch_grads.merge(&grads);
            }
            batch_grads.scale(1.0f32 / batch.len() as f32);
            sgd.step(&mut model, &batch_grads, lr);
        }

        report.loss_history.push(sum_total / n as f64);
        report.contrastive_history.push(sum_contrastive / n as f64);
        report.ce_history.push(sum_ce / n as f64);
        report.lr_history.push(lr);
    }

    report.wall_time_s = started.elapsed().as_secs_f64();
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{Backbone, Block, Normalization};
    use crate::nn::{Conv2d, ConvLayer, ConvStack, DenseLayer, Linear, Mlp};
    use ndarray::{arr1, Array2, Array3};
    use rand::Rng;

    #[test]
    fn cosine_lr_anchors() {
        assert!((cosine_lr(0, 100, 0.07) - 0.07).abs() < 1e-12);
        assert!((cosine_lr(50, 100, 0.07) - 0.035).abs() < 1e-12);
        assert!(cosine_lr(99, 100, 0.07) < 0.07 * 0.001);
    }

    #[test]
    fn loss_anchor_perfect_alignment() {
        // h == z', h' == z (unit vectors), overwhelming one-hot logits:
        // both cosines are 1, both CE terms vanish, L = -1.
        let z = arr1(&[1.0f64, 0.0]);
        let zp = arr1(&[0.0f64, 1.0]);
        let h = zp.clone();
        let hp = z.clone();
        let logits = arr1(&[100.0f64, 0.0]);
        let l = simview_loss(&z, &h, &logits, 0, &zp, &hp, &logits, 0, true).unwrap();
        assert!((l + 1.0).abs() < 1e-6, "got {l}");
    }

    #[test]
    fn loss_anchor_orthogonal_uniform() {
        // Orthogonal pairs zero the cosine bracket; uniform logits over C
        // classes make each CE term ln C.
        let c = 5usize;
        let z = arr1(&[1.0f64, 0.0]);
        let zp = arr1(&[1.0f64, 0.0]);
        let h = arr1(&[0.0f64, 1.0]);
        let hp = arr1(&[0.0f64, 1.0]);
        let logits = Array1::from_elem(c, 0.3f64);
        let l = simview_loss(&z, &h, &logits, 2, &zp, &hp, &logits, 2, true).unwrap();
        assert!((l - (c as f64).ln()).abs() < 1e-6, "got {l}");
    }

    #[test]
    fn loss_rejects_mismatched_pair_labels() {
        let v = arr1(&[1.0f64, 0.0]);
        let err = simview_loss(&v, &v, &v, 0, &v, &v, &v, 1, true);
        assert!(matches!(err, Err(TrainError::LabelMismatch { .. })));
    }

    #[test]
    fn loss_invariant_to_positive_rescaling_of_h() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let z: Array1<f64> = Array1::from_shape_simple_fn(6, || rng.random_range(-1.0..1.0));
            let zp: Array1<f64> = Array1::from_shape_simple_fn(6, || rng.random_range(-1.0..1.0));
            let h: Array1<f64> = Array1::from_shape_simple_fn(6, || rng.random_range(-1.0..1.0));
            let hp: Array1<f64> = Array1::from_shape_simple_fn(6, || rng.random_range(-1.0..1.0));
            let logits: Array1<f64> =
                Array1::from_shape_simple_fn(3, || rng.random_range(-2.0..2.0));
            let alpha = rng.random_range(0.01..50.0);
            let a = simview_loss(&z, &h, &logits, 1, &zp, &hp, &logits, 1, true).unwrap();
            let b = simview_loss(
                &z,
                &(h.clone() * alpha),
                &logits,
                1,
                &zp,
                &(hp.clone() * alpha),
                &logits,
                1,
                true,
            )
            .unwrap();
            assert!((a - b).abs() < 1e-9, "rescale by {alpha}: {a} vs {b}");
        }
    }

    #[test]
    fn loss_lower_bound_is_minus_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let z: Array1<f64> = Array1::from_shape_simple_fn(4, || rng.random_range(-1.0..1.0));
            let zp: Array1<f64> = Array1::from_shape_simple_fn(4, || rng.random_range(-1.0..1.0));
            let h: Array1<f64> = Array1::from_shape_simple_fn(4, || rng.random_range(-1.0..1.0));
            let hp: Array1<f64> = Array1::from_shape_simple_fn(4, || rng.random_range(-1.0..1.0));
            let logits: Array1<f64> =
                Array1::from_shape_simple_fn(3, || rng.random_range(-3.0..3.0));
            let l = simview_loss(&z, &h, &logits, 0, &zp, &hp, &logits, 0, true).unwrap();
            assert!(l >= -1.0 - 1e-12);
        }
    }

    /// A ~30-parameter model: one 2x2 conv to a 2-d embedding, single-linear
    /// projector/predictor, 2-class classifier.
    fn toy_model() -> (EncoderModel<f64>, Array3<f64>, Array3<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut rand2 = |r: usize, c: usize| {
            Array2::from_shape_simple_fn((r, c), || rng.random_range(-0.8..0.8f64))
        };
        let conv = Conv2d {
            path: "backbone.b1.conv".into(),
            weight: rand2(2, 12),
            bias: Some(arr1(&[0.05, -0.02])),
            c_in: 3,
            c_out: 2,
            kernel: 2,
            stride: 1,
            pad: 0,
        };
        let backbone = Backbone {
            blocks: vec![Block {
                name: "b1".into(),
                layers: ConvStack(vec![ConvLayer::Conv(conv)]),
            }],
        };
        let projector = Mlp {
            layers: vec![DenseLayer::Linear(Linear {
                path: "projector.0".into(),
                weight: rand2(2, 2),
                bias: Some(arr1(&[0.01, 0.02])),
            })],
        };
        let predictor = Mlp {
            layers: vec![DenseLayer::Linear(Linear {
                path: "predictor.0".into(),
                weight: rand2(2, 2),
                bias: Some(arr1(&[-0.01, 0.03])),
            })],
        };
        let classifier = Linear {
            path: "classifier".into(),
            weight: rand2(2, 2),
            bias: Some(arr1(&[0.0, 0.0])),
        };
        let model = EncoderModel::from_parts(
            backbone,
            projector,
            predictor,
            classifier,
            2,
            2,
            "b1",
            Normalization::default(),
        );
        let mut rng2 = ChaCha8Rng::seed_from_u64(43);
        let xa = Array3::from_shape_simple_fn((3, 3, 3), || rng2.random_range(-1.0..1.0));
        let xb = Array3::from_shape_simple_fn((3, 3, 3), || rng2.random_range(-1.0..1.0));
        (model, xa, xb)
    }

    /// The optimized objective with stop-gradient semantics: contrastive
    /// targets are pinned to `targets`, everything else follows the params.
    fn loss_with_fixed_targets(
        model: &EncoderModel<f64>,
        xa: &Array3<f64>,
        xb: &Array3<f64>,
        targets: (&Array1<f64>, &Array1<f64>),
        label: usize,
        use_classifier: bool,
    ) -> f64 {
        let fa = model.view_forward(xa).unwrap();
        let fb = model.view_forward(xb).unwrap();
        let (za0, zb0) = targets;
        let half = 0.5f64;
        let mut l = -half * (cosine(&fa.h, zb0).unwrap() + cosine(&fb.h, za0).unwrap());
        if use_classifier {
            let (ce_a, _) = cross_entropy(&fa.logits, label).unwrap();
            let (ce_b, _) = cross_entropy(&fb.logits, label).unwrap();
            l += half * (ce_a + ce_b);
        }
        l
    }

    fn analytic_grads(
        model: &EncoderModel<f64>,
        xa: &Array3<f64>,
        xb: &Array3<f64>,
        label: usize,
        use_classifier: bool,
    ) -> Gradients<f64> {
        let (fa, tape_a) = model.view_forward_rec(xa).unwrap();
        let (fb, tape_b) = model.view_forward_rec(xb).unwrap();
        let pl = pair_loss_and_grads(
            &fa.z,
            &fa.h,
            &fa.logits,
            &fb.z,
            &fb.h,
            &fb.logits,
            label,
            use_classifier,
        )
        .unwrap();
        let mut grads = Gradients::new();
        model.view_backward(&tape_a, &pl.d_h, pl.d_logits.as_ref(), &mut grads);
        model.view_backward(&tape_b, &pl.d_h_prime, pl.d_logits_prime.as_ref(), &mut grads);
        grads
    }

    fn perturb(model: &mut EncoderModel<f64>, index: usize, elem: usize, delta: f64) {
        let mut params = model.params_mut();
        let slice = params[index].data.as_slice_mut().unwrap();
        slice[elem] += delta;
    }

    #[test]
    fn gradients_match_central_finite_differences() {
        let (mut model, xa, xb) = toy_model();
        let label = 1usize;
        let base_a = model.view_forward(&xa).unwrap();
        let base_b = model.view_forward(&xb).unwrap();
        let za0 = base_a.z.clone();
        let zb0 = base_b.z.clone();
        let grads = analytic_grads(&model, &xa, &xb, label, true);

        let eps = 1e-6;
        let metas: Vec<(String, usize)> = model
            .params()
            .iter()
            .map(|p| (p.path.clone(), p.data.len()))
            .collect();
        let mut checked = 0usize;
        for (pi, (path, len)) in metas.iter().enumerate() {
            let g: Vec<f64> = grads
                .get(path)
                .unwrap_or_else(|| panic!("missing grad {path}"))
                .as_standard_layout()
                .iter()
                .copied()
                .collect();
            for e in 0..*len {
                perturb(&mut model, pi, e, eps);
                let fp = loss_with_fixed_targets(&model, &xa, &xb, (&za0, &zb0), label, true);
                perturb(&mut model, pi, e, -2.0 * eps);
                let fm = loss_with_fixed_targets(&model, &xa, &xb, (&za0, &zb0), label, true);
                perturb(&mut model, pi, e, eps);
                let fd = (fp - fm) / (2.0 * eps);
                let an = g[e];
                let tol = 1e-10 + 1e-4 * fd.abs().max(an.abs());
                assert!(
                    (fd - an).abs() <= tol,
                    "{path}[{e}]: fd={fd} analytic={an}"
                );
                checked += 1;
            }
        }
        assert!(checked >= 30, "toy model should cover all parameters");
    }

    #[test]
    fn stop_gradient_changes_the_objective() {
        // Recomputing targets from the perturbed parameters (no stop-grad)
        // must disagree with the analytic gradient somewhere in the
        // projector/backbone path; otherwise the stop-gradient is vacuous.
        let (mut model, xa, xb) = toy_model();
        let label = 0usize;
        let grads = analytic_grads(&model, &xa, &xb, label, false);

        let loss_live_targets = |m: &EncoderModel<f64>| {
            let fa = m.view_forward(&xa).unwrap();
            let fb = m.view_forward(&xb).unwrap();
            -0.5 * (cosine(&fa.h, &fb.z).unwrap() + cosine(&fb.h, &fa.z).unwrap())
        };

        let eps = 1e-6;
        let mut max_rel = 0.0f64;
        let metas: Vec<(String, usize)> = model
            .params()
            .iter()
            .map(|p| (p.path.clone(), p.data.len()))
            .collect();
        for (pi, (path, len)) in metas.iter().enumerate() {
            if !path.starts_with("projector") && !path.starts_with("backbone") {
                continue;
            }
            let g: Vec<f64> = grads
                .get(path)
                .unwrap()
                .as_standard_layout()
                .iter()
                .copied()
                .collect();
            for e in 0..*len {
                perturb(&mut model, pi, e, eps);
                let fp = loss_live_targets(&model);
                perturb(&mut model, pi, e, -2.0 * eps);
                let fm = loss_live_targets(&model);
                perturb(&mut model, pi, e, eps);
                let fd = (fp - fm) / (2.0 * eps);
                let denom = fd.abs().max(g[e].abs()).max(1e-9);
                max_rel = max_rel.max((fd - g[e]).abs() / denom);
            }
        }
        assert!(
            max_rel > 1e-3,
            "live-target finite differences agree everywhere (max rel {max_rel}); \
             stop-gradient would be a no-op"
        );
    }

    #[test]
    fn sgd_step_skips_frozen_and_gradless_params() {
        let (model, xa, xb) = toy_model();
        let mut model = freeze_partial(model).unwrap();
        let before: Vec<(String, Vec<f64>)> = model
            .params()
            .iter()
            .map(|p| (p.path.clone(), p.data.iter().copied().collect()))
            .collect();
        let grads = analytic_grads(&model, &xa, &xb, 0, false);
        let mut sgd = Sgd::new(0.9, 0.0);
        sgd.step(&mut model, &grads, 0.05);
        for (p, (path, old)) in model.params().iter().zip(&before) {
            let now: Vec<f64> = p.data.iter().copied().collect();
            let frozen = path.starts_with("backbone.b1.") || path.starts_with("classifier");
            if frozen {
                assert_eq!(&now, old, "{path} should be untouched");
            } else {
                assert_ne!(&now, old, "{path} should have moved");
            }
        }
        let (trainable, total) = trainable_parameter_count(&model);
        assert!(trainable > 0 && trainable < total);
    }
}
