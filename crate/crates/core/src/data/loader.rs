//! Directory-backed datasets.
//!
//! Layout: `<root>/<class_name>/<instance_dir>/<view>.png` with an optional
//! `meta.json` per instance directory carrying the object position and
//! per-view camera positions. Instance IDs are assigned densely from 0 in
//! lexicographic `(class, instance_dir)` order, so a given tree always
//! loads the same way.

use super::{DataError, MultiViewDataset, ObservationImage};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Optional per-instance metadata file (`meta.json`).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct InstanceMeta {
    /// Object position in meters (the semantic-map entry).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub position: Option<[f64; 3]>,
    /// Camera position per view file name.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub camera_positions: BTreeMap<String, [f64; 3]>,
}

fn sorted_dirs(path: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut dirs = Vec::new();
    let entries = std::fs::read_dir(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    for entry in entries {
        let entry = entry.map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if entry.path().is_dir() {
            dirs.push(entry.path());
        }
    }
    dirs.sort();
    Ok(dirs)
}

fn sorted_pngs(path: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut files = Vec::new();
    let entries = std::fs::read_dir(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    for entry in entries {
        let entry = entry.map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let p = entry.path();
        let is_png = p
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if p.is_file() && is_png {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

/// Loads a dataset from the documented directory layout.
pub fn load_directory_dataset(root: &Path) -> Result<MultiViewDataset, DataError> {
    if !root.is_dir() {
        return Err(DataError::MissingRoot(root.to_path_buf()));
    }
    let mut items = Vec::new();
    let mut class_of = BTreeMap::new();
    let mut positions = BTreeMap::new();
    let mut next_id: u32 = 0;

    for class_dir in sorted_dirs(root)? {
        let class_name = class_dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        for instance_dir in sorted_dirs(&class_dir)? {
            let id = next_id;
            next_id += 1;

            let meta_path = instance_dir.join("meta.json");
            let meta: InstanceMeta = if meta_path.is_file() {
                let text = std::fs::read_to_string(&meta_path).map_err(|source| DataError::Io {
                    path: meta_path.clone(),
                    source,
                })?;
                serde_json::from_str(&text).map_err(|e| DataError::BadMetadata {
                    path: meta_path.clone(),
                    reason: e.to_string(),
                })?
            } else {
                InstanceMeta::default()
            };

            let views = sorted_pngs(&instance_dir)?;
            if views.is_empty() {
                return Err(DataError::EmptyInstanceDir(instance_dir));
            }
            for (view_index, view_path) in views.iter().enumerate() {
                let img = image::open(view_path)
                    .map_err(|e| DataError::UnreadableImage {
                        path: view_path.clone(),
                        reason: e.to_string(),
                    })?
                    .to_rgb8();
                let file_name = view_path
                    .file_name()
                    .and_then(|n| n.to_str())
                    .unwrap_or_default();
                items.push(ObservationImage {
                    pixels: img,
                    instance_id: id,
                    class_label: class_name.clone(),
                    view_index: view_index as u32,
                    camera_position: meta.camera_positions.get(file_name).copied(),
                });
            }
            class_of.insert(id, class_name.clone());
            if let Some(p) = meta.position {
                positions.insert(id, p);
            }
        }
    }

    if items.is_empty() {
        return Err(DataError::EmptyDataset(root.to_path_buf()));
    }
    Ok(MultiViewDataset {
        items,
        class_of,
        positions,
    })
}

/// Writes a dataset to the documented layout (inverse of the loader).
///
/// Instance directories are named `instance_<id:03>`, views `<index:03>.png`;
/// positions and camera positions land in `meta.json`.
pub fn write_directory_dataset(ds: &MultiViewDataset, root: &Path) -> Result<(), DataError> {
    let io_err = |path: &Path, source: std::io::Error| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    for (id, indices) in ds.indices_by_instance() {
        let class = ds
            .class_of
            .get(&id)
            .ok_or_else(|| DataError::Invariant(format!("instance {id} missing class")))?;
        let dir = root.join(class).join(format!("instance_{id:03}"));
        std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;

        let mut meta = InstanceMeta {
            position: ds.positions.get(&id).copied(),
            camera_positions: BTreeMap::new(),
        };
        for &i in &indices {
            let item = &ds.items[i];
            let name = format!("{:03}.png", item.view_index);
            let path = dir.join(&name);
            item.pixels
                .save(&path)
                .map_err(|e| DataError::UnreadableImage {
                    path: path.clone(),
                    reason: e.to_string(),
                })?;
            if let Some(cam) = item.camera_position {
                meta.camera_positions.insert(name, cam);
            }
        }
        if meta.position.is_some() || !meta.camera_positions.is_empty() {
            let meta_path = dir.join("meta.json");
            let text = serde_json::to_string_pretty(&meta)
                .map_err(|e| DataError::BadMetadata {
                    path: meta_path.clone(),
                    reason: e.to_string(),
                })?;
            std::fs::write(&meta_path, text).map_err(|e| io_err(&meta_path, e))?;
        }
    }
    Ok(())
}
