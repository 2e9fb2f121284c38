//! Multi-view object-image datasets: domain types, a synthetic generator,
//! directory loaders and observation-side preprocessing (masks, bounding
//! boxes, square crops, exploration grids).

mod geometry;
mod loader;
mod synthetic;

pub use geometry::{
    crop_square, exploration_points, mask_to_bbox, BBox, OccupancyGrid, DEFAULT_SPACING_M,
};
pub use loader::{load_directory_dataset, write_directory_dataset, InstanceMeta};
pub use synthetic::generate_synthetic_multiview;

use image::RgbImage;
use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dataset root not found: {0}")]
    MissingRoot(PathBuf),
    #[error("empty instance directory: {0}")]
    EmptyInstanceDir(PathBuf),
    #[error("dataset is empty under {0}")]
    EmptyDataset(PathBuf),
    #[error("unreadable image {path}: {reason}")]
    UnreadableImage { path: PathBuf, reason: String },
    #[error("bad metadata {path}: {reason}")]
    BadMetadata { path: PathBuf, reason: String },
    #[error("mask has no set pixels")]
    EmptyMask,
    #[error("bbox {0:?} exceeds image bounds {1}x{2}")]
    BBoxOutOfBounds(BBox, u32, u32),
    #[error("instance {0} has fewer than 2 views; cannot split")]
    TooFewViews(u32),
    #[error("dataset invariant violated: {0}")]
    Invariant(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// One RGB observation of one object instance with its pseudo-label.
#[derive(Debug, Clone)]
pub struct ObservationImage {
    pub pixels: RgbImage,
    /// Instance ID from the semantic map; stable across views.
    pub instance_id: u32,
    pub class_label: String,
    pub view_index: u32,
    /// Camera position in meters, when known.
    pub camera_position: Option<[f64; 3]>,
}

/// A labeled collection of multi-view object observations.
#[derive(Debug, Clone, Default)]
pub struct MultiViewDataset {
    pub items: Vec<ObservationImage>,
    /// Instance ID -> class name.
    pub class_of: BTreeMap<u32, String>,
    /// Instance ID -> object position in meters (the semantic-map entry),
    /// when the source provides one.
    pub positions: BTreeMap<u32, [f64; 3]>,
}

impl MultiViewDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn instance_ids(&self) -> BTreeSet<u32> {
        self.items.iter().map(|o| o.instance_id).collect()
    }

    pub fn views_per_instance(&self) -> BTreeMap<u32, usize> {
        let mut counts = BTreeMap::new();
        for item in &self.items {
            *counts.entry(item.instance_id).or_insert(0) += 1;
        }
        counts
    }

    /// Item indices grouped by instance, in dataset order.
    pub fn indices_by_instance(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, item) in self.items.iter().enumerate() {
            map.entry(item.instance_id).or_default().push(i);
        }
        map
    }

    /// Checks the structural invariants (labels known, views accounted for,
    /// uniform pixel format is implied by `RgbImage`).
    pub fn validate(&self) -> Result<(), DataError> {
        for item in &self.items {
            if !self.class_of.contains_key(&item.instance_id) {
                return Err(DataError::Invariant(format!(
                    "instance {} missing from class_of",
                    item.instance_id
                )));
            }
        }
        let total: usize = self.views_per_instance().values().sum();
        if total != self.items.len() {
            return Err(DataError::Invariant(
                "views_per_instance does not sum to item count".into(),
            ));
        }
        Ok(())
    }
}

/// Splits per instance: each keeps ~`train_fraction` of its views in train.
///
/// Deterministic per seed; partitions are disjoint and exhaustive. Instances
/// with fewer than two views cannot be split.
pub fn split_dataset(
    ds: &MultiViewDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(MultiViewDataset, MultiViewDataset), DataError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::InvalidParameter(format!(
            "train_fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for (id, indices) in ds.indices_by_instance() {
        let n = indices.len();
        if n < 2 {
            return Err(DataError::TooFewViews(id));
        }
        let mut shuffled = indices.clone();
        let mut rng =
            rand_chacha::ChaCha8Rng::seed_from_u64(crate::util::mix_seed(seed, &[0x5b17, id as u64]));
        shuffled.shuffle(&mut rng);
        let want = (train_fraction * n as f64).round() as usize;
        let n_train = want.clamp(1, n - 1);
        train_idx.extend_from_slice(&shuffled[..n_train]);
        test_idx.extend_from_slice(&shuffled[n_train..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();

    let pick = |indices: &[usize]| -> MultiViewDataset {
        let items: Vec<ObservationImage> = indices.iter().map(|&i| ds.items[i].clone()).collect();
        let ids: BTreeSet<u32> = items.iter().map(|o| o.instance_id).collect();
        MultiViewDataset {
            items,
            class_of: ds
                .class_of
                .iter()
                .filter(|(id, _)| ids.contains(id))
                .map(|(id, c)| (*id, c.clone()))
                .collect(),
            positions: ds
                .positions
                .iter()
                .filter(|(id, _)| ids.contains(id))
                .map(|(id, p)| (*id, *p))
                .collect(),
        }
    };
    Ok((pick(&train_idx), pick(&test_idx)))
}
