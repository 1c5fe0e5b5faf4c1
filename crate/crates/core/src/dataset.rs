//! Dataset indexing for the `category/{train,test,ground_truth}` layout.
//!
//! ```text
//! root/<category>/train/good/*.png
//! root/<category>/test/good/*.png
//! root/<category>/test/<defect>/<stem>.png
//! root/<category>/ground_truth/<defect>/<stem>_mask.png
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::imaging::{ImageTensor, Mask};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub path: PathBuf,
    /// `<category>/<split>/<defect>/<stem>`; also the feature-file key.
    pub id: String,
    /// `None` for normal images.
    pub defect: Option<String>,
    pub mask: Option<PathBuf>,
}

impl Sample {
    pub fn is_anomalous(&self) -> bool {
        self.defect.is_some()
    }

    /// Loads, resizes and center-crops the image.
    pub fn load_image(&self, resize: usize, crop: usize) -> Result<ImageTensor> {
        Ok(ImageTensor::load(&self.path)?.resize_center_crop(resize, crop).with_id(self.id.clone()))
    }

    /// Ground truth after the same resize and crop; empty for normal images.
    pub fn load_mask(&self, resize: usize, crop: usize) -> Result<Mask> {
        match &self.mask {
            Some(p) => Ok(Mask::load(p)?.resize_center_crop(resize, crop)),
            None => Ok(Mask::empty(crop, crop)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub name: String,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Labelled anomalies available for training.
    pub pool: Vec<Sample>,
}

impl Category {
    pub fn test_normal(&self) -> usize {
        self.test.iter().filter(|s| !s.is_anomalous()).count()
    }

    pub fn test_anomalous(&self) -> usize {
        self.test.iter().filter(|s| s.is_anomalous()).count()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub categories: Vec<Category>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .at(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .at(dir)?;
    v.sort();
    Ok(v)
}

fn is_image(p: &Path) -> bool {
    p.is_file()
        && matches!(
            p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
            Some("png" | "jpg" | "jpeg" | "bmp")
        )
}

fn stem(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string()
}

fn find_mask(gt_dir: &Path, stem: &str) -> Option<PathBuf> {
    ["png", "jpg", "bmp"]
        .iter()
        .map(|ext| gt_dir.join(format!("{stem}_mask.{ext}")))
        .chain(std::iter::once(gt_dir.join(format!("{stem}.png"))))
        .find(|p| p.is_file())
}

fn ingest_category(root: &Path, name: &str) -> Result<Category> {
    let base = root.join(name);
    let train_dir = base.join("train").join("good");
    let train: Vec<Sample> = if train_dir.is_dir() {
        sorted_entries(&train_dir)?
            .into_iter()
            .filter(|p| is_image(p))
            .map(|p| Sample { id: format!("{name}/train/good/{}", stem(&p)), path: p, defect: None, mask: None })
            .collect()
    } else {
        Vec::new()
    };
    if train.is_empty() {
        return Err(Error::Dataset(format!("category `{name}` has no training images in {}", train_dir.display())));
    }
    let mut test = Vec::new();
    let test_dir = base.join("test");
    if test_dir.is_dir() {
        for dir in sorted_entries(&test_dir)?.into_iter().filter(|p| p.is_dir()) {
            let defect = dir.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            for p in sorted_entries(&dir)?.into_iter().filter(|p| is_image(p)) {
                let s = stem(&p);
                let id = format!("{name}/test/{defect}/{s}");
                if defect == "good" {
                    test.push(Sample { path: p, id, defect: None, mask: None });
                } else {
                    let gt_dir = base.join("ground_truth").join(&defect);
                    let mask = find_mask(&gt_dir, &s)
                        .ok_or_else(|| Error::MissingMask(gt_dir.join(format!("{s}_mask.png"))))?;
                    test.push(Sample { path: p, id, defect: Some(defect.clone()), mask: Some(mask) });
                }
            }
        }
    }
    Ok(Category { name: name.to_string(), train, test, pool: Vec::new() })
}

/// Indexes every category directory under `root` that contains `train/`.
pub fn ingest_dataset(root: &Path) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", root.display())));
    }
    let mut categories = Vec::new();
    for dir in sorted_entries(root)?.into_iter().filter(|p| p.join("train").is_dir()) {
        let name = dir.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        categories.push(ingest_category(root, &name)?);
    }
    if categories.is_empty() {
        return Err(Error::Dataset(format!("no categories under {}", root.display())));
    }
    Ok(DatasetIndex { root: root.to_path_buf(), categories })
}

impl DatasetIndex {
    /// Keeps the named categories, in the given order; empty keeps all.
    pub fn select(&self, names: &[String]) -> Result<DatasetIndex> {
        if names.is_empty() {
            return Ok(self.clone());
        }
        let categories = names
            .iter()
            .map(|n| {
                self.categories
                    .iter()
                    .find(|c| &c.name == n)
                    .cloned()
                    .ok_or_else(|| Error::Dataset(format!("unknown category `{n}`")))
            })
            .collect::<Result<_>>()?;
        Ok(DatasetIndex { root: self.root.clone(), categories })
    }

    /// Moves `n` seeded anomalous test images per category into the training
    /// pool. Pool images are removed from the test split.
    pub fn with_anomaly_pool(&self, n: usize, seed: u64) -> Result<DatasetIndex> {
        let mut out = self.clone();
        for (ci, cat) in out.categories.iter_mut().enumerate() {
            let mut anomalous: Vec<usize> = (0..cat.test.len()).filter(|&i| cat.test[i].is_anomalous()).collect();
            if n > anomalous.len() {
                return Err(Error::Dataset(format!(
                    "category `{}` has {} anomalies, {n} requested for training",
                    cat.name,
                    anomalous.len()
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (ci as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            anomalous.shuffle(&mut rng);
            let mut chosen: Vec<usize> = anomalous[..n].to_vec();
            chosen.sort_unstable();
            for &i in chosen.iter().rev() {
                cat.pool.push(cat.test.remove(i));
            }
            cat.pool.reverse();
        }
        Ok(out)
    }

    pub fn train_count(&self) -> usize {
        self.categories.iter().map(|c| c.train.len()).sum()
    }

    /// One line per category with split counts.
    pub fn summary(&self) -> String {
        self.categories
            .iter()
            .map(|c| {
                format!(
                    "{}: train {}, test good {}, test anomalous {}, pool {}\n",
                    c.name,
                    c.train.len(),
                    c.test_normal(),
                    c.test_anomalous(),
                    c.pool.len()
                )
            })
            .collect()
    }
}
