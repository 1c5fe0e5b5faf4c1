//! Anomaly maps: reconstruction error, fusion with the segmentation output,
//! and the top-1% image score.

use serde::{Deserialize, Serialize};

use crate::autograd::COS_EPS;
use crate::encoder::TokenGrid;
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Resolution {
    Grid,
    Image,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    pub resolution: Resolution,
}

impl AnomalyMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>, resolution: Resolution) -> Self {
        assert_eq!(values.len(), height * width, "map size mismatch");
        Self { height, width, values, resolution }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Bilinear upsampling to image resolution.
    pub fn upsample(&self, height: usize, width: usize) -> AnomalyMap {
        let t = Tensor::new(vec![1, self.height, self.width], self.values.clone());
        let up = tensor::bilinear_resize(&t, height, width);
        AnomalyMap::new(height, width, up.into_data(), Resolution::Image)
    }
}

fn check_groups(enc: &[TokenGrid], dec: &[TokenGrid]) -> Result<()> {
    if enc.len() != dec.len() || enc.is_empty() {
        return Err(Error::Shape(format!("{} encoder vs {} decoder groups", enc.len(), dec.len())));
    }
    if let Some((a, _)) = enc.iter().zip(dec).find(|(a, b)| !a.same_shape(b)) {
        return Err(Error::Shape(format!("group grids differ from {}x{}x{}", a.h, a.w, a.dim())));
    }
    Ok(())
}

/// Per-cell `mean_l 0.5 * [(1 - cos) + ||f_enc - f_dec||_2]`.
pub fn recon_error_map(enc: &[TokenGrid], dec: &[TokenGrid]) -> Result<AnomalyMap> {
    check_groups(enc, dec)?;
    let (h, w) = (enc[0].h, enc[0].w);
    let l = enc.len() as f64;
    let mut values = vec![0.0; h * w];
    for (e, d) in enc.iter().zip(dec) {
        for (i, v) in values.iter_mut().enumerate() {
            let (a, b) = (e.tokens.row(i), d.tokens.row(i));
            let dist = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            *v += 0.5 * ((1.0 - tensor::cosine(a, b, COS_EPS)) + dist) / l;
        }
    }
    Ok(AnomalyMap::new(h, w, values, Resolution::Grid))
}

/// `(upsample(A_rec) + M_pred) / 2`, or just `upsample(A_rec)` without a
/// segmentation prediction.
pub fn fuse_anomaly_map(rec: &AnomalyMap, pred: Option<&AnomalyMap>, height: usize, width: usize) -> AnomalyMap {
    let up = rec.upsample(height, width);
    match pred {
        None => up,
        Some(p) => {
            assert_eq!((p.height, p.width), (height, width), "prediction must be image resolution");
            let values = up.values.iter().zip(&p.values).map(|(a, b)| 0.5 * (a + b)).collect();
            AnomalyMap::new(height, width, values, Resolution::Image)
        }
    }
}

/// Mean of the `ceil(1%)` largest values.
pub fn image_score(map: &AnomalyMap) -> f64 {
    top_fraction_mean(&map.values, 0.01)
}

pub fn top_fraction_mean(values: &[f64], fraction: f64) -> f64 {
    assert!(!values.is_empty(), "empty map");
    let k = ((fraction * values.len() as f64).ceil() as usize).clamp(1, values.len());
    let mut v = values.to_vec();
    v.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
    v[..k].iter().sum::<f64>() / k as f64
}
