//! Browser bindings: pseudo-anomaly preview, mining-weight curves and the
//! attention cost table.

use inpformer::decoder::cost_report;
use inpformer::imaging::{ImageTensor, Mask};
use inpformer::objectives::{mining_weights, DifficultyField};
use inpformer::synthesis::{procedural_texture, MaskSampler, PerlinRecipe, TextureSource};
use wasm_bindgen::prelude::*;

/// One synthesized sample: normal, mask and anomalous images side by side
/// as RGBA bytes, `3 * size` wide and `size` tall.
#[wasm_bindgen]
pub struct Preview {
    size: usize,
    rgba: Vec<u8>,
    beta: f64,
    area: f64,
}

#[wasm_bindgen]
impl Preview {
    pub fn width(&self) -> usize {
        3 * self.size
    }

    pub fn height(&self) -> usize {
        self.size
    }

    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn area(&self) -> f64 {
        self.area
    }
}

fn byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn panel_pixel(img: &ImageTensor, y: usize, x: usize) -> [u8; 4] {
    let [r, g, b] = img.get(y, x);
    [byte(r), byte(g), byte(b), 255]
}

fn compose(normal: &ImageTensor, mask: &Mask, anomalous: &ImageTensor) -> Vec<u8> {
    let s = normal.height();
    let mut out = Vec::with_capacity(3 * s * s * 4);
    for y in 0..s {
        for x in 0..s {
            out.extend(panel_pixel(normal, y, x));
        }
        for x in 0..s {
            let v = if mask.get(y, x) { 255 } else { 0 };
            out.extend([v, v, v, 255]);
        }
        for x in 0..s {
            out.extend(panel_pixel(anomalous, y, x));
        }
    }
    out
}

/// Synthesizes a Perlin pseudo anomaly on a procedural normal image.
#[wasm_bindgen]
pub fn synthesize(size: usize, seed: u64, min_scale: usize, max_scale: usize, threshold: f64) -> Result<Preview, JsError> {
    let recipe = PerlinRecipe {
        mask: MaskSampler { min_scale, max_scale, threshold, ..MaskSampler::default() },
        ..PerlinRecipe::default()
    };
    let normal = procedural_texture(size, size, seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let s = recipe.generate(&normal, &TextureSource::Procedural, seed).map_err(|e| JsError::new(&e.to_string()))?;
    Ok(Preview {
        size,
        rgba: compose(&normal, &s.mask, &s.image),
        beta: s.provenance.beta.unwrap_or(f64::NAN),
        area: s.mask.area_fraction(),
    })
}

/// Mining weights for `n` difficulties spread evenly over `(0, 3u]`, with
/// mean difficulty `u = 1`.
#[wasm_bindgen]
pub fn mining_curve(gamma: f64, n: usize) -> Vec<f64> {
    let m: Vec<f64> = (1..=n).map(|i| 3.0 * i as f64 / n as f64).collect();
    let field = DifficultyField { m_cos: m, m_mse: Vec::new(), u_cos: 1.0, u_mse: 0.0 };
    mining_weights(&field, gamma.max(0.0)).w_cos
}

/// Operation counts and memory for full self-attention against prototype
/// attention, as a fixed-width text table.
#[wasm_bindgen]
pub fn attention_costs(tokens: u32, prototypes: u32, channels: u32) -> String {
    cost_report(tokens.into(), prototypes.into(), channels.into())
}
