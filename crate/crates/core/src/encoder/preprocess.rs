//! Deterministic inference preprocessing and stochastic training augmentation.
//!
//! Inference: resize to 256x256, center-crop 224x224, scale to `[0, 1]`,
//! normalize per channel. Training: the four augmentation families (crop and
//! resize, color jitter, grayscale, horizontal flip) followed by the same
//! normalization. Pixel math runs in `f64` and is converted to the model
//! element type at the very end, so `f32` and `f64` models see identical
//! inputs for identical seeds.

use crate::nn::Scalar;
use image::RgbImage;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Square side of the model input.
pub const INPUT_SIZE: usize = 224;
/// Intermediate resize target before the center crop.
pub const RESIZE_SIZE: usize = 256;

/// Per-channel normalization constants applied after scaling to `[0, 1]`.
///
/// Defaults are the standard large-scale-dataset statistics used by common
/// pretrained checkpoints; alternate weights can carry their own constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

/// Bilinear sample at continuous source coordinates, channels in `[0, 1]`.
fn sample_bilinear(src: &RgbImage, x: f64, y: f64) -> [f64; 3] {
    let w = src.width() as i64;
    let h = src.height() as i64;
    let x0 = x.floor() as i64;
    let y0 = y.floor() as i64;
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let clamp = |v: i64, hi: i64| v.clamp(0, hi - 1) as u32;
    let mut out = [0.0f64; 3];
    for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
        if wy == 0.0 {
            continue;
        }
        for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
            if wx == 0.0 {
                continue;
            }
            let p = src.get_pixel(clamp(x0 + dx, w), clamp(y0 + dy, h));
            for c in 0..3 {
                out[c] += wy * wx * (p.0[c] as f64 / 255.0);
            }
        }
    }
    out
}

/// Resamples an axis-aligned crop rectangle of `src` to `size x size`.
///
/// The rectangle may extend past the image; samples clamp at the border.
fn crop_resize(src: &RgbImage, x0: f64, y0: f64, cw: f64, ch: f64, size: usize) -> Vec<[f64; 3]> {
    let sx = cw / size as f64;
    let sy = ch / size as f64;
    let mut out = Vec::with_capacity(size * size);
    for oy in 0..size {
        let y = y0 + (oy as f64 + 0.5) * sy - 0.5;
        for ox in 0..size {
            let x = x0 + (ox as f64 + 0.5) * sx - 0.5;
            out.push(sample_bilinear(src, x, y));
        }
    }
    out
}

fn to_model_input<F: Scalar>(pixels: &[[f64; 3]], size: usize, norm: &Normalization) -> Array3<F> {
    let mut out = Array3::zeros((3, size, size));
    for c in 0..3 {
        let mean = norm.mean[c];
        let std = norm.std[c];
        for y in 0..size {
            for x in 0..size {
                out[(c, y, x)] = F::from_f64((pixels[y * size + x][c] - mean) / std);
            }
        }
    }
    out
}

/// Inference preprocessing: 256x256 resize, 224x224 center crop, normalize.
pub fn preprocess<F: Scalar>(image: &RgbImage, norm: &Normalization) -> Array3<F> {
    let resized = crop_resize(
        image,
        0.0,
        0.0,
        image.width() as f64,
        image.height() as f64,
        RESIZE_SIZE,
    );
    let off = (RESIZE_SIZE - INPUT_SIZE) / 2;
    let mut cropped = Vec::with_capacity(INPUT_SIZE * INPUT_SIZE);
    for y in 0..INPUT_SIZE {
        let row = (y + off) * RESIZE_SIZE + off;
        cropped.extend_from_slice(&resized[row..row + INPUT_SIZE]);
    }
    to_model_input(&cropped, INPUT_SIZE, norm)
}

fn luma(p: [f64; 3]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn rgb_to_hsv(p: [f64; 3]) -> [f64; 3] {
    let max = p[0].max(p[1]).max(p[2]);
    let min = p[0].min(p[1]).min(p[2]);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == p[0] {
        ((p[1] - p[2]) / delta).rem_euclid(6.0) / 6.0
    } else if max == p[1] {
        ((p[2] - p[0]) / delta + 2.0) / 6.0
    } else {
        ((p[0] - p[1]) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    [h, s, max]
}

fn hsv_to_rgb(hsv: [f64; 3]) -> [f64; 3] {
    let [h, s, v] = hsv;
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as i64 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// One stochastically augmented view.
fn augment_view(image: &RgbImage, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let (w, h) = (image.width() as f64, image.height() as f64);
    let area = w * h;

    // Crop and resize: sample a sub-rectangle covering 50-100% of the area
    // with aspect ratio in [3/4, 4/3], then resample it to the input size.
    // The lower bound is higher than typical large-image setups: observation
    // crops are tight around the object, so very small crops degenerate to
    // background-only patches that carry no instance identity.
    let mut rect = None;
    for _ in 0..10 {
        let target_area = area * rng.random_range(0.5..=1.0);
        let log_ratio: f64 = rng.random_range((0.75f64).ln()..=(4.0f64 / 3.0).ln());
        let ratio = log_ratio.exp();
        let cw = (target_area * ratio).sqrt();
        let ch = (target_area / ratio).sqrt();
        if cw <= w && ch <= h {
            let x0 = rng.random_range(0.0..=(w - cw));
            let y0 = rng.random_range(0.0..=(h - ch));
            rect = Some((x0, y0, cw, ch));
            break;
        }
    }
    let (x0, y0, cw, ch) = rect.unwrap_or_else(|| {
        let side = w.min(h);
        ((w - side) / 2.0, (h - side) / 2.0, side, side)
    });
    let mut pixels = crop_resize(image, x0, y0, cw, ch, INPUT_SIZE);

    // Color jitter: brightness, contrast, saturation, hue.
    if rng.random_range(0.0..1.0) < 0.8 {
        let b = rng.random_range(0.6..=1.4);
        for p in pixels.iter_mut() {
            for c in p.iter_mut() {
                *c = (*c * b).clamp(0.0, 1.0);
            }
        }
        let f = rng.random_range(0.6..=1.4);
        let gray = pixels.iter().map(|&p| luma(p)).sum::<f64>() / pixels.len() as f64;
        for p in pixels.iter_mut() {
            for c in p.iter_mut() {
                *c = (gray + f * (*c - gray)).clamp(0.0, 1.0);
            }
        }
        let f = rng.random_range(0.6..=1.4);
        for p in pixels.iter_mut() {
            let l = luma(*p);
            for c in p.iter_mut() {
                *c = (l + f * (*c - l)).clamp(0.0, 1.0);
            }
        }
        let dh = rng.random_range(-0.1..=0.1);
        for p in pixels.iter_mut() {
            let mut hsv = rgb_to_hsv(*p);
            hsv[0] += dh;
            *p = hsv_to_rgb(hsv);
        }
    }

    // Random grayscale.
    if rng.random_range(0.0..1.0) < 0.2 {
        for p in pixels.iter_mut() {
            let l = luma(*p);
            *p = [l, l, l];
        }
    }

    // Horizontal flip.
    if rng.random_range(0.0..1.0) < 0.5 {
        for row in pixels.chunks_mut(INPUT_SIZE) {
            row.reverse();
        }
    }

    pixels
}

/// Two independently augmented views of one image, deterministic per seed.
pub fn augment_pair<F: Scalar>(
    image: &RgbImage,
    seed: u64,
    norm: &Normalization,
) -> (Array3<F>, Array3<F>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = augment_view(image, &mut rng);
    let b = augment_view(image, &mut rng);
    (
        to_model_input(&a, INPUT_SIZE, norm),
        to_model_input(&b, INPUT_SIZE, norm),
    )
}
