//! Pseudo-anomaly synthesis: Perlin-noise masks blended with foreign
//! textures, and transplanting real defects into normal images.

use std::f64::consts::{PI, SQRT_2};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::imaging::{ImageTensor, Mask};

/// Gradient noise normalized to `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseField {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    /// Lattice cells along `(y, x)`.
    pub scale: (usize, usize),
    pub seed: u64,
}

impl NoiseField {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Pixel spacing of lattice points along `(y, x)`.
    pub fn period(&self) -> (usize, usize) {
        (self.height.div_ceil(self.scale.0), self.width.div_ceil(self.scale.1))
    }
}

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// Classic Perlin noise with `scale` lattice cells per side.
pub fn perlin_noise(height: usize, width: usize, scale: usize, seed: u64) -> Result<NoiseField> {
    perlin_noise_xy(height, width, (scale, scale), seed)
}

/// Perlin noise with independent lattice resolutions per axis.
///
/// When a side is not a multiple of its resolution the field is generated on
/// the next multiple and cropped from the top-left, so lattice points stay at
/// integer pixels.
pub fn perlin_noise_xy(height: usize, width: usize, scale: (usize, usize), seed: u64) -> Result<NoiseField> {
    if height == 0 || width == 0 || scale.0 == 0 || scale.1 == 0 {
        return Err(Error::InvalidArgument(format!(
            "noise needs positive sizes, got {height}x{width} at scale {scale:?}"
        )));
    }
    let (sy, sx) = scale;
    let (py, px) = (height.div_ceil(sy), width.div_ceil(sx));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gradients: Vec<(f64, f64)> = (0..(sy + 1) * (sx + 1))
        .map(|_| {
            let a = rng.random::<f64>() * 2.0 * PI;
            (a.cos(), a.sin())
        })
        .collect();
    let grad = |gy: usize, gx: usize| gradients[gy * (sx + 1) + gx];
    let mut values = Vec::with_capacity(height * width);
    for y in 0..height {
        let (cy, ty) = (y / py, (y % py) as f64 / py as f64);
        for x in 0..width {
            let (cx, tx) = (x / px, (x % px) as f64 / px as f64);
            let dot = |gy: usize, gx: usize, dy: f64, dx: f64| {
                let (a, b) = grad(gy, gx);
                a * dy + b * dx
            };
            let n00 = dot(cy, cx, ty, tx);
            let n01 = dot(cy, cx + 1, ty, tx - 1.0);
            let n10 = dot(cy + 1, cx, ty - 1.0, tx);
            let n11 = dot(cy + 1, cx + 1, ty - 1.0, tx - 1.0);
            let (fy, fx) = (fade(ty), fade(tx));
            let top = n00 + fx * (n01 - n00);
            let bottom = n10 + fx * (n11 - n10);
            values.push(((top + fy * (bottom - top)) * SQRT_2).clamp(-1.0, 1.0));
        }
    }
    Ok(NoiseField { height, width, values, scale, seed })
}

/// `noise > threshold`.
pub fn threshold_mask(noise: &NoiseField, threshold: f64) -> Mask {
    Mask::new(noise.height, noise.width, noise.values.iter().map(|&v| v > threshold).collect())
}

/// Draws Perlin masks until one has an acceptable area.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskSampler {
    pub threshold: f64,
    pub min_area: f64,
    pub max_area: f64,
    /// Smallest and largest lattice resolution, both powers of two.
    pub min_scale: usize,
    pub max_scale: usize,
    pub budget: usize,
}

impl Default for MaskSampler {
    fn default() -> Self {
        Self { threshold: 0.5, min_area: 0.001, max_area: 0.3, min_scale: 2, max_scale: 32, budget: 64 }
    }
}

impl MaskSampler {
    fn scales(&self) -> Vec<usize> {
        let mut v = Vec::new();
        let mut s = self.min_scale.max(1);
        while s <= self.max_scale {
            v.push(s);
            s *= 2;
        }
        v
    }

    pub fn accepts(&self, mask: &Mask) -> bool {
        let a = mask.area_fraction();
        !mask.is_empty() && a >= self.min_area && a <= self.max_area
    }

    pub fn sample(&self, height: usize, width: usize, rng: &mut ChaCha8Rng) -> Result<(Mask, NoiseField)> {
        let scales = self.scales();
        if scales.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no power-of-two scale in [{}, {}]",
                self.min_scale, self.max_scale
            )));
        }
        for _ in 0..self.budget {
            let sy = scales[rng.random_range(0..scales.len())];
            let sx = scales[rng.random_range(0..scales.len())];
            let noise = perlin_noise_xy(height, width, (sy, sx), rng.random())?;
            let mask = threshold_mask(&noise, self.threshold);
            if self.accepts(&mask) {
                return Ok((mask, noise));
            }
        }
        Err(Error::MaskBudgetExhausted(self.budget))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleKind {
    Perlin,
    RealEmbed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub kind: SampleKind,
    pub seed: u64,
    pub beta: Option<f64>,
    pub scale: Option<(usize, usize)>,
    pub transform: Option<EmbedTransform>,
    pub sources: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoAnomalySample {
    pub image: ImageTensor,
    pub mask: Mask,
    pub provenance: Provenance,
}

impl PseudoAnomalySample {
    /// Writes `<stem>.png`, `<stem>_mask.png` and `<stem>.json`.
    pub fn dump(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).at(dir)?;
        self.image.save(&dir.join(format!("{stem}.png")))?;
        self.mask.save(&dir.join(format!("{stem}_mask.png")))?;
        let sidecar = dir.join(format!("{stem}.json"));
        let json = serde_json::to_string_pretty(&self.provenance).expect("provenance serializes");
        fs::write(&sidecar, json).at(sidecar)
    }
}

/// `I_a = (1 - M) I + M ((1 - beta) I + beta T)`.
pub fn synthesize_pseudo_anomaly(
    normal: &ImageTensor,
    texture: &ImageTensor,
    mask: &Mask,
    beta: f64,
) -> Result<PseudoAnomalySample> {
    let (h, w) = (normal.height(), normal.width());
    if (texture.height(), texture.width()) != (h, w) || (mask.height(), mask.width()) != (h, w) {
        return Err(Error::Shape(format!(
            "image {h}x{w}, texture {}x{}, mask {}x{}",
            texture.height(),
            texture.width(),
            mask.height(),
            mask.width()
        )));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!("blend factor {beta} outside [0, 1]")));
    }
    let mut image = normal.clone();
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) {
                let (a, t) = (normal.get(y, x), texture.get(y, x));
                image.set(y, x, std::array::from_fn(|c| (1.0 - beta) * a[c] + beta * t[c]));
            }
        }
    }
    let mut sources = Vec::new();
    sources.extend(normal.id.clone());
    sources.extend(texture.id.clone());
    Ok(PseudoAnomalySample {
        image,
        mask: mask.clone(),
        provenance: Provenance { kind: SampleKind::Perlin, seed: 0, beta: Some(beta), scale: None, transform: None, sources },
    })
}

/// Where blend textures come from.
#[derive(Clone, Debug, PartialEq)]
pub enum TextureSource {
    /// Seeded stripes, checkers and color noise.
    Procedural,
    /// Image files, sampled uniformly.
    Files(Vec<PathBuf>),
}

impl TextureSource {
    /// Collects every png/jpg under `root`, recursively, in sorted order.
    pub fn from_dir(root: &Path) -> Result<Self> {
        let mut files = Vec::new();
        collect_images(root, &mut files)?;
        files.sort();
        if files.is_empty() {
            return Err(Error::Dataset(format!("no texture images under {}", root.display())));
        }
        Ok(Self::Files(files))
    }

    pub fn sample(&self, height: usize, width: usize, rng: &mut ChaCha8Rng) -> Result<ImageTensor> {
        match self {
            Self::Procedural => {
                let seed: u64 = rng.random();
                Ok(procedural_texture(height, width, seed).with_id(format!("procedural:{seed}")))
            }
            Self::Files(files) => {
                let path = &files[rng.random_range(0..files.len())];
                Ok(ImageTensor::load(path)?.resize(height, width).with_id(path.display().to_string()))
            }
        }
    }
}

fn collect_images(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).at(dir)? {
        let path = entry.at(dir)?.path();
        if path.is_dir() {
            collect_images(&path, out)?;
        } else if matches!(
            path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
            Some("png" | "jpg" | "jpeg")
        ) {
            out.push(path);
        }
    }
    Ok(())
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    std::array::from_fn(|_| rng.random::<f64>())
}

pub fn procedural_texture(height: usize, width: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b) = (random_color(&mut rng), random_color(&mut rng));
    let kind = rng.random_range(0..3);
    let mut img = ImageTensor::filled(height, width, a);
    match kind {
        0 => {
            let theta = rng.random::<f64>() * PI;
            let period = rng.random_range(3.0..12.0);
            let (s, c) = theta.sin_cos();
            for y in 0..height {
                for x in 0..width {
                    let u = (y as f64 * s + x as f64 * c) / period;
                    let t = 0.5 + 0.5 * (2.0 * PI * u).sin();
                    img.set(y, x, std::array::from_fn(|k| a[k] + t * (b[k] - a[k])));
                }
            }
        }
        1 => {
            let cell = rng.random_range(2..8);
            for y in 0..height {
                for x in 0..width {
                    if (y / cell + x / cell) % 2 == 1 {
                        img.set(y, x, b);
                    }
                }
            }
        }
        _ => {
            let scale = 1 << rng.random_range(2..5);
            let fields: Vec<NoiseField> = (0..3)
                .map(|_| perlin_noise(height, width, scale, rng.random()).expect("positive sizes"))
                .collect();
            for y in 0..height {
                for x in 0..width {
                    img.set(y, x, std::array::from_fn(|k| 0.5 + 0.5 * fields[k].get(y, x)));
                }
            }
        }
    }
    img
}

/// Full Perlin-and-texture recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerlinRecipe {
    pub mask: MaskSampler,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for PerlinRecipe {
    fn default() -> Self {
        Self { mask: MaskSampler::default(), beta_min: 0.15, beta_max: 1.0 }
    }
}

impl PerlinRecipe {
    pub fn generate(&self, normal: &ImageTensor, textures: &TextureSource, seed: u64) -> Result<PseudoAnomalySample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (normal.height(), normal.width());
        let (mask, noise) = self.mask.sample(h, w, &mut rng)?;
        let texture = textures.sample(h, w, &mut rng)?;
        let beta = rng.random_range(self.beta_min..=self.beta_max);
        let mut sample = synthesize_pseudo_anomaly(normal, &texture, &mask, beta)?;
        sample.provenance.seed = seed;
        sample.provenance.scale = Some(noise.scale);
        Ok(sample)
    }
}

/// Geometry applied to a donor defect before pasting.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedTransform {
    /// Counter-clockwise quarter turns.
    pub quarter_turns: u8,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    pub scale: f64,
    /// Top-left paste position; `None` keeps the donor's own position.
    pub position: Option<(usize, usize)>,
}

impl EmbedTransform {
    pub const IDENTITY: Self =
        Self { quarter_turns: 0, flip_horizontal: false, flip_vertical: false, scale: 1.0, position: None };
}

/// Rectangular patch with a support mask.
#[derive(Clone, Debug)]
struct Patch {
    h: usize,
    w: usize,
    rgb: Vec<[f64; 3]>,
    support: Vec<bool>,
}

impl Patch {
    fn remap(&self, h: usize, w: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Patch {
        let mut rgb = Vec::with_capacity(h * w);
        let mut support = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = src(y, x);
                rgb.push(self.rgb[sy * self.w + sx]);
                support.push(self.support[sy * self.w + sx]);
            }
        }
        Patch { h, w, rgb, support }
    }

    fn rotate(&self, turns: u8) -> Patch {
        let (h, w) = (self.h, self.w);
        match turns % 4 {
            0 => self.clone(),
            1 => self.remap(w, h, |y, x| (x, w - 1 - y)),
            2 => self.remap(h, w, |y, x| (h - 1 - y, w - 1 - x)),
            _ => self.remap(w, h, |y, x| (h - 1 - x, y)),
        }
    }

    fn flip(&self, horizontal: bool, vertical: bool) -> Patch {
        let (h, w) = (self.h, self.w);
        self.remap(h, w, |y, x| (if vertical { h - 1 - y } else { y }, if horizontal { w - 1 - x } else { x }))
    }

    /// Nearest-neighbour resize so the support stays binary.
    fn resize(&self, h: usize, w: usize) -> Patch {
        if (h, w) == (self.h, self.w) {
            return self.clone();
        }
        let (sh, sw) = (self.h, self.w);
        self.remap(h, w, |y, x| (((y * sh) / h).min(sh - 1), ((x * sw) / w).min(sw - 1)))
    }
}

/// Pastes the donor's defect into `normal` using an explicit transform.
pub fn embed_with(
    normal: &ImageTensor,
    donor: &ImageTensor,
    donor_mask: &Mask,
    transform: &EmbedTransform,
) -> Result<PseudoAnomalySample> {
    let (h, w) = (normal.height(), normal.width());
    if (donor_mask.height(), donor_mask.width()) != (donor.height(), donor.width()) {
        return Err(Error::Shape("donor mask does not match donor image".into()));
    }
    let (y0, x0, y1, x1) = donor_mask.bounding_box().ok_or(Error::EmptyDonorMask)?;
    let (ph, pw) = (y1 - y0, x1 - x0);
    let mut patch = Patch { h: ph, w: pw, rgb: Vec::with_capacity(ph * pw), support: Vec::with_capacity(ph * pw) };
    for y in y0..y1 {
        for x in x0..x1 {
            patch.rgb.push(donor.get(y, x));
            patch.support.push(donor_mask.get(y, x));
        }
    }
    let patch = patch.rotate(transform.quarter_turns).flip(transform.flip_horizontal, transform.flip_vertical);
    let scaled = |n: usize| ((n as f64 * transform.scale).round() as usize).max(1);
    let (mut th, mut tw) = (scaled(patch.h), scaled(patch.w));
    if th > h || tw > w {
        let shrink = (h as f64 / th as f64).min(w as f64 / tw as f64);
        th = ((th as f64 * shrink).floor() as usize).clamp(1, h);
        tw = ((tw as f64 * shrink).floor() as usize).clamp(1, w);
    }
    let patch = patch.resize(th, tw);
    let (top, left) = transform.position.unwrap_or((y0, x0));
    let (top, left) = (top.min(h - th), left.min(w - tw));
    let mut image = normal.clone();
    let mut mask = Mask::empty(h, w);
    for y in 0..th {
        for x in 0..tw {
            if patch.support[y * tw + x] {
                image.set(top + y, left + x, patch.rgb[y * tw + x]);
                mask.set(top + y, left + x, true);
            }
        }
    }
    let mut sources = Vec::new();
    sources.extend(normal.id.clone());
    sources.extend(donor.id.clone());
    let transform = EmbedTransform { position: Some((top, left)), ..*transform };
    Ok(PseudoAnomalySample {
        image,
        mask,
        provenance: Provenance {
            kind: SampleKind::RealEmbed,
            seed: 0,
            beta: None,
            scale: None,
            transform: Some(transform),
            sources,
        },
    })
}

/// Pastes the donor's defect with a seeded rotation, flip, scale in
/// `[0.7, 1.3]` and position.
pub fn embed_real_anomaly(
    normal: &ImageTensor,
    donor: &ImageTensor,
    donor_mask: &Mask,
    seed: u64,
) -> Result<PseudoAnomalySample> {
    let (y0, x0, y1, x1) = donor_mask.bounding_box().ok_or(Error::EmptyDonorMask)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let quarter_turns = rng.random_range(0..4u8);
    let flip_horizontal = rng.random::<bool>();
    let flip_vertical = rng.random::<bool>();
    let scale = rng.random_range(0.7..=1.3);
    let (mut ph, mut pw) = (y1 - y0, x1 - x0);
    if quarter_turns % 2 == 1 {
        std::mem::swap(&mut ph, &mut pw);
    }
    let th = ((ph as f64 * scale).round() as usize).clamp(1, normal.height());
    let tw = ((pw as f64 * scale).round() as usize).clamp(1, normal.width());
    let top = rng.random_range(0..=normal.height() - th);
    let left = rng.random_range(0..=normal.width() - tw);
    let t = EmbedTransform { quarter_turns, flip_horizontal, flip_vertical, scale, position: Some((top, left)) };
    let mut sample = embed_with(normal, donor, donor_mask, &t)?;
    sample.provenance.seed = seed;
    Ok(sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};

    fn random_image(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(h, w, (0..h * w * 3).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn lattice_points_are_exact_zeros() {
        for (h, w, s) in [(64, 64, 4), (56, 56, 8), (56, 40, 32), (17, 23, 2)] {
            let f = perlin_noise(h, w, s, 9).unwrap();
            let (py, px) = f.period();
            for y in (0..h).step_by(py) {
                for x in (0..w).step_by(px) {
                    assert_eq!(f.get(y, x), 0.0, "{h}x{w}@{s} ({y},{x})");
                }
            }
        }
    }

    #[test]
    fn deterministic_and_bounded() {
        let a = perlin_noise(64, 64, 8, 3).unwrap();
        assert_eq!(a, perlin_noise(64, 64, 8, 3).unwrap());
        assert_ne!(a.values, perlin_noise(64, 64, 8, 4).unwrap().values);
        for s in [2, 4, 8, 16, 32] {
            let f = perlin_noise(64, 64, s, s as u64).unwrap();
            assert!(f.values.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        assert!(perlin_noise(0, 4, 2, 0).is_err());
    }

    #[test]
    fn smoothstep_matches_polynomial() {
        for t in [0.0f64, 0.25, 0.5, 0.9, 1.0] {
            let want: f64 = 6.0 * t.powi(5) - 15.0 * t.powi(4) + 10.0 * t.powi(3);
            assert!((fade(t) - want).abs() < 1e-14);
        }
    }

    #[test]
    fn threshold_cases() {
        let f = perlin_noise(32, 32, 4, 1).unwrap();
        let all = threshold_mask(&f, -2.0);
        assert_eq!(all.count(), 32 * 32);
        let sampler = MaskSampler { threshold: -2.0, max_area: 1.0, ..MaskSampler::default() };
        assert!(sampler.accepts(&all));
        let none = MaskSampler { threshold: 2.0, budget: 0, ..MaskSampler::default() };
        assert!(matches!(
            none.sample(32, 32, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::MaskBudgetExhausted(0))
        ));
        let high = MaskSampler { threshold: 2.0, budget: 5, ..MaskSampler::default() };
        assert!(high.sample(32, 32, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let m = threshold_mask(&f, 0.5);
        let count = f.values.iter().filter(|&&v| v > 0.5).count();
        assert_eq!(m.count(), count);
        assert!((m.area_fraction() - count as f64 / 1024.0).abs() < 1e-15);
    }

    #[test]
    fn blend_cases() {
        let img = random_image(8, 8, 1);
        let tex = random_image(8, 8, 2);
        let s = synthesize_pseudo_anomaly(&img, &tex, &Mask::empty(8, 8), 0.7).unwrap();
        assert_eq!(s.image.pixels(), img.pixels());
        let full = Mask::new(8, 8, vec![true; 64]);
        let s = synthesize_pseudo_anomaly(&img, &tex, &full, 1.0).unwrap();
        assert!(s.image.pixels().iter().zip(tex.pixels()).all(|(a, b)| (a - b).abs() < 1e-15));
        let mask = Mask::new(8, 8, (0..64).map(|i| i % 3 == 0).collect());
        let s = synthesize_pseudo_anomaly(&img, &tex, &mask, 0.4).unwrap();
        for i in 0..64 {
            for c in 0..3 {
                let (a, t) = (img.pixels()[i * 3 + c], tex.pixels()[i * 3 + c]);
                let want = if i % 3 == 0 { 0.6 * a + 0.4 * t } else { a };
                assert!((s.image.pixels()[i * 3 + c] - want).abs() < 1e-15);
            }
        }
        assert!(synthesize_pseudo_anomaly(&img, &random_image(4, 8, 0), &mask, 0.4).is_err());
        assert!(synthesize_pseudo_anomaly(&img, &tex, &mask, 1.5).is_err());
    }

    #[test]
    fn identity_embed_restores_donor_pixels() {
        let normal = random_image(16, 16, 3);
        let mut donor = normal.clone();
        let mut mask = Mask::empty(16, 16);
        for (y, x) in [(4, 5), (4, 6), (5, 5), (6, 7), (7, 7)] {
            donor.set(y, x, [1.0, 0.0, 0.0]);
            mask.set(y, x, true);
        }
        let s = embed_with(&normal, &donor, &mask, &EmbedTransform::IDENTITY).unwrap();
        assert_eq!(s.mask, mask);
        assert_eq!(s.image.pixels(), donor.pixels());
        assert!(matches!(
            embed_with(&normal, &donor, &Mask::empty(16, 16), &EmbedTransform::IDENTITY),
            Err(Error::EmptyDonorMask)
        ));
    }

    #[test]
    fn rotation_and_flip_preserve_area() {
        let normal = random_image(20, 20, 4);
        let donor = random_image(20, 20, 5);
        let mut mask = Mask::empty(20, 20);
        for y in 2..5 {
            for x in 3..9 {
                if (x + y) % 2 == 0 {
                    mask.set(y, x, true);
                }
            }
        }
        for turns in 0..4 {
            let t = EmbedTransform { quarter_turns: turns, flip_horizontal: true, position: Some((10, 10)), ..EmbedTransform::IDENTITY };
            let s = embed_with(&normal, &donor, &mask, &t).unwrap();
            assert_eq!(s.mask.count(), mask.count());
        }
    }

    #[test]
    fn oversized_patch_is_refit() {
        let normal = random_image(10, 10, 6);
        let donor = random_image(10, 10, 7);
        let mask = Mask::new(10, 10, vec![true; 100]);
        let t = EmbedTransform { scale: 1.3, ..EmbedTransform::IDENTITY };
        let s = embed_with(&normal, &donor, &mask, &t).unwrap();
        assert_eq!(s.mask.count(), 100);
    }

    #[test]
    fn perlin_recipe_is_reproducible() {
        let img = random_image(32, 32, 8);
        let r = PerlinRecipe::default();
        let a = r.generate(&img, &TextureSource::Procedural, 11).unwrap();
        let b = r.generate(&img, &TextureSource::Procedural, 11).unwrap();
        assert_eq!(a, b);
        let beta = a.provenance.beta.unwrap();
        assert!((0.15..=1.0).contains(&beta));
    }

    #[test]
    fn dump_writes_three_files() {
        let dir = tempfile::tempdir().unwrap();
        let img = random_image(16, 16, 9);
        let s = PerlinRecipe::default().generate(&img, &TextureSource::Procedural, 2).unwrap();
        s.dump(dir.path(), "s0").unwrap();
        for f in ["s0.png", "s0_mask.png", "s0.json"] {
            assert!(dir.path().join(f).exists());
        }
        let back = Mask::load(&dir.path().join("s0_mask.png")).unwrap();
        assert_eq!(back, s.mask);
    }

    fn changed_within_mask(a: &ImageTensor, s: &PseudoAnomalySample) -> bool {
        (0..a.height()).all(|y| (0..a.width()).all(|x| s.mask.get(y, x) || a.get(y, x) == s.image.get(y, x)))
    }

    proptest! {
        #[test]
        fn perlin_changes_stay_in_mask(seed in 0u64..10_000, h in 8usize..48, w in 8usize..48) {
            let img = random_image(h, w, seed ^ 0xabc);
            let r = PerlinRecipe::default();
            if let Ok(s) = r.generate(&img, &TextureSource::Procedural, seed) {
                prop_assert!(changed_within_mask(&img, &s));
                let a = s.mask.area_fraction();
                prop_assert!((r.mask.min_area..=r.mask.max_area).contains(&a));
            }
        }

        #[test]
        fn embed_changes_stay_in_mask(seed in 0u64..10_000) {
            let img = random_image(24, 24, seed);
            let donor = random_image(24, 24, seed + 1);
            let mut mask = Mask::empty(24, 24);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..20 {
                mask.set(rng.random_range(5..15), rng.random_range(5..15), true);
            }
            let s = embed_real_anomaly(&img, &donor, &mask, seed).unwrap();
            prop_assert!(changed_within_mask(&img, &s));
            prop_assert!(!s.mask.is_empty());
        }
    }
}
