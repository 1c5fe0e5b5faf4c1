//! Generator for a small textured-surface dataset with seeded defects, laid
//! out like a standard anomaly-detection benchmark.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{IoContext, Result};
use crate::imaging::{ImageTensor, Mask};

pub const CATEGORIES: [&str; 2] = ["tiles", "weave"];
pub const DEFECTS: [&str; 2] = ["scratch", "blob"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub size: usize,
    pub train: usize,
    pub test_good: usize,
    /// Anomalous test images per category, split across defect types.
    pub test_defect: usize,
    pub categories: Vec<String>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            size: 64,
            train: 50,
            test_good: 10,
            test_defect: 10,
            categories: CATEGORIES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryCounts {
    pub train: usize,
    pub test_good: usize,
    pub test_defect: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SynthSpec,
    pub categories: BTreeMap<String, CategoryCounts>,
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    std::array::from_fn(|k| a[k] + t * (b[k] - a[k]))
}

fn jitter(c: [f64; 3], rng: &mut ChaCha8Rng, amount: f64) -> [f64; 3] {
    std::array::from_fn(|k| (c[k] + rng.random_range(-amount..=amount)).clamp(0.0, 1.0))
}

/// Defect-free surface of the given category.
pub fn normal_surface(category: &str, size: usize, rng: &mut ChaCha8Rng) -> ImageTensor {
    let mut img = ImageTensor::filled(size, size, [0.0; 3]);
    let (oy, ox) = (rng.random_range(0.0..16.0), rng.random_range(0.0..16.0));
    match category {
        "tiles" => {
            let tile = jitter([0.78, 0.74, 0.66], rng, 0.04);
            let grout = jitter([0.42, 0.40, 0.38], rng, 0.03);
            for y in 0..size {
                for x in 0..size {
                    let (u, v) = ((y as f64 + oy) % 16.0, (x as f64 + ox) % 16.0);
                    let edge = u < 2.0 || v < 2.0;
                    let shade = 0.03 * ((u + v) / 32.0);
                    let c = if edge { grout } else { tile.map(|t| t - shade) };
                    img.set(y, x, jitter(c, rng, 0.015));
                }
            }
        }
        _ => {
            let a = jitter([0.30, 0.36, 0.52], rng, 0.04);
            let b = jitter([0.55, 0.60, 0.74], rng, 0.04);
            for y in 0..size {
                for x in 0..size {
                    let s = (2.0 * PI * (y as f64 + oy) / 8.0).sin();
                    let t = (2.0 * PI * (x as f64 + ox) / 8.0).sin();
                    let w = 0.5 + 0.25 * (s + t);
                    img.set(y, x, jitter(mix(a, b, w), rng, 0.015));
                }
            }
        }
    }
    img
}

/// Paints a seeded defect into `img` and returns its mask. Defects stay at
/// least `margin` pixels from the border.
pub fn paint_defect(img: &mut ImageTensor, defect: &str, margin: usize, rng: &mut ChaCha8Rng) -> Mask {
    let size = img.height();
    let mut mask = Mask::empty(size, img.width());
    let lo = margin as f64 + 6.0;
    let hi = (size - margin) as f64 - 6.0;
    let inside = |y: usize, x: usize| (margin..size - margin).contains(&y) && (margin..size - margin).contains(&x);
    match defect {
        "scratch" => {
            let color = if rng.random::<bool>() { [0.08, 0.06, 0.05] } else { [0.98, 0.96, 0.90] };
            let (cy, cx) = (rng.random_range(lo..hi), rng.random_range(lo..hi));
            let theta = rng.random_range(0.0..PI);
            let half = rng.random_range(7.0..14.0);
            let width = rng.random_range(1.2..2.2);
            let (dy, dx) = (theta.sin(), theta.cos());
            for y in 0..size {
                for x in 0..size {
                    let (py, px) = (y as f64 - cy, x as f64 - cx);
                    let along = py * dy + px * dx;
                    let across = (py * dx - px * dy).abs();
                    if along.abs() <= half && across <= width && inside(y, x) {
                        img.set(y, x, color);
                        mask.set(y, x, true);
                    }
                }
            }
        }
        _ => {
            let color = jitter([0.62, 0.28, 0.10], rng, 0.08);
            let (cy, cx) = (rng.random_range(lo..hi), rng.random_range(lo..hi));
            let (ry, rx) = (rng.random_range(3.5..7.5), rng.random_range(3.5..7.5));
            for y in 0..size {
                for x in 0..size {
                    let d = ((y as f64 - cy) / ry).powi(2) + ((x as f64 - cx) / rx).powi(2);
                    if d <= 1.0 && inside(y, x) {
                        let base = img.get(y, x);
                        img.set(y, x, mix(base, color, 0.85));
                        mask.set(y, x, true);
                    }
                }
            }
        }
    }
    mask
}

/// Writes the dataset under `out` and returns its manifest, also saved as
/// `out/manifest.json`.
pub fn generate(out: &Path, spec: &SynthSpec) -> Result<Manifest> {
    let margin = spec.size / 16 + 2;
    let mut categories = BTreeMap::new();
    for (ci, cat) in spec.categories.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(ci as u64 + 1);
        let base = out.join(cat);
        let save = |img: &ImageTensor, rel: String| -> Result<()> {
            let p = base.join(rel);
            fs::create_dir_all(p.parent().expect("nested path")).at(&p)?;
            img.save(&p)
        };
        for i in 0..spec.train {
            save(&normal_surface(cat, spec.size, &mut rng), format!("train/good/{i:03}.png"))?;
        }
        for i in 0..spec.test_good {
            save(&normal_surface(cat, spec.size, &mut rng), format!("test/good/{i:03}.png"))?;
        }
        let mut per_defect = BTreeMap::new();
        for i in 0..spec.test_defect {
            let defect = DEFECTS[i % DEFECTS.len()];
            let n = per_defect.entry(defect.to_string()).or_insert(0usize);
            let mut img = normal_surface(cat, spec.size, &mut rng);
            let mask = paint_defect(&mut img, defect, margin, &mut rng);
            save(&img, format!("test/{defect}/{:03}.png", *n))?;
            let mp = base.join(format!("ground_truth/{defect}/{:03}_mask.png", *n));
            fs::create_dir_all(mp.parent().expect("nested path")).at(&mp)?;
            mask.save(&mp)?;
            *n += 1;
        }
        categories.insert(
            cat.clone(),
            CategoryCounts { train: spec.train, test_good: spec.test_good, test_defect: per_defect },
        );
    }
    let manifest = Manifest { spec: spec.clone(), categories };
    let path = out.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes")).at(&path)?;
    Ok(manifest)
}
