//! RGB image tensors, binary masks, and the pixel-level transforms used by
//! data loading, augmentation and anomaly synthesis.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// `H x W x 3` image with channel-interleaved values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
    /// Dataset-relative identifier, used to look up precomputed features.
    pub id: Option<String>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{height}x{width}x3 image needs {} values, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        Ok(Self { height, width, pixels, id: None })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let pixels = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, pixels, id: None }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = Some(id.into());
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        for c in 0..3 {
            self.pixels[i + c] = rgb[c].clamp(0.0, 1.0);
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let pixels = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
        Ok(Self { height: h as usize, width: w as usize, pixels, id: None })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let raw: Vec<u8> = self
            .pixels
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        let buf: ImageBuffer<Rgb<u8>, _> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, raw)
                .expect("buffer size matches dimensions");
        buf.save(path)?;
        Ok(())
    }

    /// Channel-first `[3, H, W]` copy.
    pub fn to_chw(&self) -> Tensor {
        let n = self.height * self.width;
        let mut out = vec![0.0; 3 * n];
        for p in 0..n {
            for c in 0..3 {
                out[c * n + p] = self.pixels[p * 3 + c];
            }
        }
        Tensor::new(vec![3, self.height, self.width], out)
    }

    pub fn from_chw(t: &Tensor) -> Self {
        let s = t.shape();
        let (h, w) = (s[1], s[2]);
        let n = h * w;
        let mut pixels = vec![0.0; 3 * n];
        for p in 0..n {
            for c in 0..3 {
                pixels[p * 3 + c] = t.data()[c * n + p].clamp(0.0, 1.0);
            }
        }
        Self { height: h, width: w, pixels, id: None }
    }

    pub fn resize(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let out = Self::from_chw(&tensor::bilinear_resize(&self.to_chw(), height, width));
        Self { id: self.id.clone(), ..out }
    }

    pub fn center_crop(&self, height: usize, width: usize) -> Self {
        let y0 = (self.height - height) / 2;
        let x0 = (self.width - width) / 2;
        self.crop(y0, x0, height, width)
    }

    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Self {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for y in y0..y0 + height {
            let start = (y * self.width + x0) * 3;
            pixels.extend_from_slice(&self.pixels[start..start + width * 3]);
        }
        Self { height, width, pixels, id: self.id.clone() }
    }

    /// Resize so both sides equal `resize`, then center-crop to `crop`.
    pub fn resize_center_crop(&self, resize: usize, crop: usize) -> Self {
        self.resize(resize, resize).center_crop(crop, crop)
    }

    pub fn rotate90(&self, quarter_turns: u8) -> Self {
        self.remap_square(|y, x, n| rotate_coords(y, x, n, quarter_turns))
    }

    pub fn flip(&self, horizontal: bool, vertical: bool) -> Self {
        let (h, w) = (self.height, self.width);
        let mut out = self.clone();
        for y in 0..h {
            for x in 0..w {
                let sy = if vertical { h - 1 - y } else { y };
                let sx = if horizontal { w - 1 - x } else { x };
                out.set(y, x, self.get(sy, sx));
            }
        }
        out
    }

    /// Integer shift with edge replication.
    pub fn translate(&self, dy: i32, dx: i32) -> Self {
        let (h, w) = (self.height as i32, self.width as i32);
        let mut out = self.clone();
        for y in 0..h {
            for x in 0..w {
                let sy = (y - dy).clamp(0, h - 1) as usize;
                let sx = (x - dx).clamp(0, w - 1) as usize;
                out.set(y as usize, x as usize, self.get(sy, sx));
            }
        }
        out
    }

    fn remap_square(&self, src: impl Fn(usize, usize, usize) -> (usize, usize)) -> Self {
        assert_eq!(self.height, self.width, "rotation needs a square image");
        let n = self.height;
        let mut out = self.clone();
        for y in 0..n {
            for x in 0..n {
                let (sy, sx) = src(y, x, n);
                out.set(y, x, self.get(sy, sx));
            }
        }
        out
    }
}

/// Source coordinates for an output pixel under a counter-clockwise rotation.
fn rotate_coords(y: usize, x: usize, n: usize, quarter_turns: u8) -> (usize, usize) {
    match quarter_turns % 4 {
        0 => (y, x),
        1 => (x, n - 1 - y),
        2 => (n - 1 - y, n - 1 - x),
        _ => (n - 1 - x, y),
    }
}

/// Binary `H x W` mask.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), height * width);
        Self { height, width, bits }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![false; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn area_fraction(&self) -> f64 {
        self.count() as f64 / self.bits.len() as f64
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// Tight bounding box `(y0, x0, y1, x1)`, exclusive upper bounds.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    bb = Some(match bb {
                        None => (y, x, y + 1, x + 1),
                        Some((a, b, c, d)) => (a.min(y), b.min(x), c.max(y + 1), d.max(x + 1)),
                    });
                }
            }
        }
        bb
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = img.dimensions();
        let bits = img.into_raw().into_iter().map(|v| v >= 128).collect();
        Ok(Self::new(h as usize, w as usize, bits))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let raw: Vec<u8> = self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        let buf: ImageBuffer<Luma<u8>, _> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, raw)
                .expect("buffer size matches dimensions");
        buf.save(path)?;
        Ok(())
    }

    /// Bilinear resize of the 0/1 field, re-binarized at 0.5.
    pub fn resize(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let t = Tensor::new(vec![1, self.height, self.width], self.as_f64());
        let r = tensor::bilinear_resize(&t, height, width);
        Self::new(height, width, r.data().iter().map(|&v| v > 0.5).collect())
    }

    pub fn center_crop(&self, height: usize, width: usize) -> Self {
        let y0 = (self.height - height) / 2;
        let x0 = (self.width - width) / 2;
        let mut bits = Vec::with_capacity(height * width);
        for y in y0..y0 + height {
            bits.extend_from_slice(&self.bits[y * self.width + x0..y * self.width + x0 + width]);
        }
        Self::new(height, width, bits)
    }

    pub fn resize_center_crop(&self, resize: usize, crop: usize) -> Self {
        self.resize(resize, resize).center_crop(crop, crop)
    }
}

/// Writes a nonnegative field as a 16-bit grayscale PNG, scaled so that
/// `max_value` maps to 65535.
pub fn save_gray16(path: &Path, height: usize, width: usize, values: &[f64], max_value: f64) -> Result<()> {
    let scale = if max_value > 0.0 { 65535.0 / max_value } else { 0.0 };
    let raw: Vec<u16> = values
        .iter()
        .map(|v| (v * scale).round().clamp(0.0, 65535.0) as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, _> = ImageBuffer::from_raw(width as u32, height as u32, raw)
        .expect("buffer size matches dimensions");
    buf.save(path)?;
    Ok(())
}
