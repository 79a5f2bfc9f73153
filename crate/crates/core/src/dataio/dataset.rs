use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::raster::SUPPORTED_EXTENSIONS;
use crate::error::{Error, Result};
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split '{other}' (expected train, val or test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetEntry {
    pub stem: String,
    pub image_path: PathBuf,
    pub label_path: Option<PathBuf>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub entries: Vec<DatasetEntry>,
    pub split_ratio: f64,
    pub seed: u64,
}

impl DatasetIndex {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &DatasetEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }
}

/// Maps file stem to path for every supported raster directly inside `dir`.
fn scan_rasters(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let read = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in read {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if !path.is_file() {
            continue;
        }
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .unwrap_or_default();
        if !SUPPORTED_EXTENSIONS.contains(&ext.as_str()) {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if let Some(prev) = out.insert(stem.to_string(), path.clone()) {
            return Err(Error::Dataset(format!(
                "duplicate stem '{stem}': {} and {}",
                prev.display(),
                path.display()
            )));
        }
    }
    Ok(out)
}

/// Pairs `images/` with `labels/` by stem. If `labels/` exists every image
/// must have a label.
fn scan_pool(root: &Path) -> Result<Vec<(String, PathBuf, Option<PathBuf>)>> {
    let images_dir = root.join("images");
    if !images_dir.is_dir() {
        return Err(Error::Dataset(format!("missing directory {}", images_dir.display())));
    }
    let images = scan_rasters(&images_dir)?;
    let labels_dir = root.join("labels");
    let labels = if labels_dir.is_dir() {
        Some(scan_rasters(&labels_dir)?)
    } else {
        None
    };
    let mut out = Vec::with_capacity(images.len());
    for (stem, image_path) in images {
        let label_path = match &labels {
            Some(labels) => Some(labels.get(&stem).cloned().ok_or_else(|| {
                Error::Dataset(format!("image '{}' has no label in {}", stem, labels_dir.display()))
            })?),
            None => None,
        };
        out.push((stem, image_path, label_path));
    }
    Ok(out)
}

/// Indexes `<root>/images` (+ optional `<root>/labels`) and splits it into
/// train/val with a seeded permutation cut at `split_ratio`. An optional
/// `<root>/test/` with the same layout becomes the test split.
pub fn load_dataset(root: impl AsRef<Path>, split_ratio: f64, seed: u64) -> Result<DatasetIndex> {
    let root = root.as_ref();
    if !(0.0..=1.0).contains(&split_ratio) {
        return Err(Error::Config(format!("split_ratio must lie in [0, 1], got {split_ratio}")));
    }
    if !root.is_dir() {
        return Err(Error::Dataset(format!("missing directory {}", root.display())));
    }
    let mut pool = scan_pool(root)?;
    if pool.is_empty() {
        return Err(Error::Dataset("empty dataset".into()));
    }
    // Stems are sorted by the BTreeMap scan, so the permutation only depends on the seed.
    pool.shuffle(&mut rng_for(seed, &[0x5917]));
    let n_train = (split_ratio * pool.len() as f64).round() as usize;
    let mut entries: Vec<DatasetEntry> = pool
        .into_iter()
        .enumerate()
        .map(|(i, (stem, image_path, label_path))| DatasetEntry {
            stem,
            image_path,
            label_path,
            split: if i < n_train { Split::Train } else { Split::Val },
        })
        .collect();

    let test_root = root.join("test");
    if test_root.join("images").is_dir() {
        entries.extend(scan_pool(&test_root)?.into_iter().map(|(stem, image_path, label_path)| DatasetEntry {
            stem,
            image_path,
            label_path,
            split: Split::Test,
        }));
    }
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        entries,
        split_ratio,
        seed,
    })
}
