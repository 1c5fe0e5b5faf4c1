//! Residual learning: feature residuals between encoder and decoder, a small
//! segmentation head on top, and Dice loss.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var, COS_EPS};
use crate::error::{Error, Result};
use crate::imaging::Mask;
use crate::params::{normal_tensor, ParamId, ParamStore};
use crate::tensor::{self, Tensor};

fn check_pairs(enc: &[Tensor], dec: &[&Tensor]) -> Result<()> {
    if enc.is_empty() || enc.len() != dec.len() {
        return Err(Error::Shape(format!("{} encoder vs {} decoder groups", enc.len(), dec.len())));
    }
    if let Some((a, b)) = enc.iter().zip(dec).find(|(a, b)| a.shape() != b.shape()) {
        return Err(Error::Shape(format!("encoder group {:?} vs decoder {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `(1/L) sum_l (1 - cos(f_Q, f_D)) |f_Q - f_D|` per cell, as `[N, C]`.
pub fn feature_residual(enc: &[Tensor], dec: &[Tensor]) -> Result<Tensor> {
    let refs: Vec<&Tensor> = dec.iter().collect();
    check_pairs(enc, &refs)?;
    let l = enc.len() as f64;
    let mut out = Tensor::zeros(enc[0].shape());
    for (e, d) in enc.iter().zip(dec) {
        for i in 0..e.rows() {
            let k = (1.0 - tensor::cosine(e.row(i), d.row(i), COS_EPS)).max(0.0) / l;
            for ((o, a), b) in out.row_mut(i).iter_mut().zip(e.row(i)).zip(d.row(i)) {
                *o += k * (a - b).abs();
            }
        }
    }
    Ok(out)
}

/// Graph form of [`feature_residual`]. With `stop_gradient` the result is
/// detached, so nothing upstream of the decoder sees the segmentation loss.
pub fn feature_residual_graph(g: &mut Graph, enc: &[Tensor], dec: &[Var], stop_gradient: bool) -> Result<Var> {
    let dec_vals: Vec<&Tensor> = dec.iter().map(|&v| g.value(v)).collect();
    check_pairs(enc, &dec_vals)?;
    let scale = 1.0 / enc.len() as f64;
    let mut acc: Option<Var> = None;
    for (e, &d) in enc.iter().zip(dec) {
        let e = g.constant(e.clone());
        let cos = g.row_cosine(e, d);
        let dist = g.rsub(1.0, cos);
        let diff = g.sub(e, d);
        let abs = g.abs(diff);
        let term = g.row_scale(abs, dist);
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term),
        });
    }
    let res = g.scale(acc.expect("at least one group"), scale);
    Ok(if stop_gradient { g.detach(res) } else { res })
}

/// Two stride-2 transposed convolutions, a 3x3 convolution, bilinear
/// upsampling to image size and a sigmoid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegHead {
    pub up1_w: ParamId,
    pub up1_b: ParamId,
    pub up2_w: ParamId,
    pub up2_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

impl SegHead {
    /// Channel plan `dim -> dim/2 -> dim/4 -> 1`.
    pub fn register(store: &mut ParamStore, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if dim < 4 || dim % 4 != 0 {
            return Err(Error::InvalidArgument(format!("segmentation head needs channels divisible by 4, got {dim}")));
        }
        let (c1, c2) = (dim / 2, dim / 4);
        Ok(Self {
            up1_w: store.add("head.up1.w", normal_tensor(rng, &[dim, c1, 2, 2], (2.0 / dim as f64).sqrt())),
            up1_b: store.add("head.up1.b", Tensor::zeros(&[c1])),
            up2_w: store.add("head.up2.w", normal_tensor(rng, &[c1, c2, 2, 2], (2.0 / c1 as f64).sqrt())),
            up2_b: store.add("head.up2.b", Tensor::zeros(&[c2])),
            out_w: store.add("head.out.w", normal_tensor(rng, &[1, c2, 3, 3], (1.0 / (9 * c2) as f64).sqrt())),
            out_b: store.add("head.out.b", Tensor::zeros(&[1])),
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.up1_w, self.up1_b, self.up2_w, self.up2_b, self.out_w, self.out_b]
    }

    /// `residual` is `[h*w, C]` in row-major cell order; returns `[1, H, W]`
    /// probabilities.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        residual: Var,
        grid: (usize, usize),
        out: (usize, usize),
    ) -> Result<Var> {
        let (h, w) = grid;
        let shape = g.value(residual).shape().to_vec();
        let dim = store.get(self.up1_w).shape()[0];
        if shape != [h * w, dim] {
            return Err(Error::Shape(format!("head expects [{}, {dim}], got {shape:?}", h * w)));
        }
        let t = g.transpose(residual);
        let x = g.reshape(t, &[dim, h, w]);
        let (w1, b1) = (g.param(store, self.up1_w), g.param(store, self.up1_b));
        let x = g.conv_transpose2d(x, w1, b1, 2);
        let x = g.relu(x);
        let (w2, b2) = (g.param(store, self.up2_w), g.param(store, self.up2_b));
        let x = g.conv_transpose2d(x, w2, b2, 2);
        let x = g.relu(x);
        let (w3, b3) = (g.param(store, self.out_w), g.param(store, self.out_b));
        let x = g.conv2d(x, w3, b3, 1);
        let x = g.resize(x, out.0, out.1);
        Ok(g.sigmoid(x))
    }
}

fn dice_from_sums(inter: f64, psq: f64, gsq: f64) -> f64 {
    if psq == 0.0 && gsq == 0.0 {
        1.0 - (2.0 * inter + 1.0) / (psq + gsq + 1.0)
    } else {
        1.0 - 2.0 * inter / (psq + gsq)
    }
}

/// `1 - 2 sum(p g) / (sum p^2 + sum g^2)`; 0 when both are empty.
pub fn dice_loss(pred: &[f64], gt: &[f64]) -> f64 {
    assert_eq!(pred.len(), gt.len(), "dice inputs differ in length");
    let inter = pred.iter().zip(gt).map(|(p, g)| p * g).sum();
    let psq = pred.iter().map(|p| p * p).sum();
    let gsq = gt.iter().map(|g| g * g).sum();
    dice_from_sums(inter, psq, gsq)
}

/// Dice over a whole batch, with all pixels of all images pooled into one
/// overlap ratio.
pub fn dice_loss_graph(g: &mut Graph, preds: &[Var], gts: &[Mask]) -> Result<Var> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(Error::Shape(format!("{} predictions vs {} masks", preds.len(), gts.len())));
    }
    let mut inter: Option<Var> = None;
    let mut psq: Option<Var> = None;
    let mut gsq = 0.0;
    for (&p, m) in preds.iter().zip(gts) {
        if g.value(p).len() != m.bits().len() {
            return Err(Error::Shape(format!("prediction has {} pixels, mask {}", g.value(p).len(), m.bits().len())));
        }
        let gt = g.constant(Tensor::new(g.value(p).shape().to_vec(), m.as_f64()));
        let pg = g.mul(p, gt);
        let i = g.sum(pg);
        let pp = g.mul(p, p);
        let s = g.sum(pp);
        inter = Some(inter.map_or(i, |a| g.add(a, i)));
        psq = Some(psq.map_or(s, |a| g.add(a, s)));
        gsq += m.count() as f64;
    }
    let (inter, psq) = (inter.expect("nonempty"), psq.expect("nonempty"));
    let smooth = if g.value(psq).item() == 0.0 && gsq == 0.0 { 1.0 } else { 0.0 };
    let num = g.scale(inter, 2.0);
    let num = g.offset(num, smooth);
    let den = g.offset(psq, gsq + smooth);
    let ratio = g.div(num, den);
    Ok(g.rsub(1.0, ratio))
}
