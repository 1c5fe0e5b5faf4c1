//! Dense row-major `f64` tensors and the numeric kernels shared by the
//! autograd graph and the frozen feature extractor.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from row slices.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Trailing extent when viewed as a `rows x cols` matrix.
    pub fn cols(&self) -> usize {
        self.data.len() / self.shape[0].max(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.data.len(), other.data.len(), "zip_map length mismatch");
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|x| x * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(vec![c, r], out)
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `a (m x k) * b (k x n)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a (m x k) * b^T` where `b` is `n x k`.
pub fn matmul_bt(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols(), b.cols(), "matmul_bt inner dims {} vs {}", a.cols(), b.cols());
    matmul(a, &b.transpose())
}

/// `a^T * b` where `a` is `k x m` and `b` is `k x n`.
pub fn matmul_at(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, m) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    assert_eq!(k, k2, "matmul_at inner dims {k} vs {k2}");
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a.data[p * m..(p + 1) * m];
        let brow = &b.data[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn add_row_bias(x: &Tensor, bias: &Tensor) -> Tensor {
    let c = x.cols();
    assert_eq!(bias.len(), c, "bias length");
    let mut out = x.clone();
    for row in out.data.chunks_mut(c) {
        for (v, b) in row.iter_mut().zip(&bias.data) {
            *v += b;
        }
    }
    out
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = x.clone();
    for row in out.data.chunks_mut(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through one `expm1`, several times cheaper than the libm call and
/// within a few ulps of it.
pub fn fast_tanh(u: f64) -> f64 {
    if u.abs() > 19.0 {
        return u.signum();
    }
    let e = (2.0 * u).exp_m1();
    e / (e + 2.0)
}

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + fast_tanh(GELU_K * (x + GELU_A * x * x * x)))
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_A * x * x * x);
    let t = fast_tanh(u);
    let du = GELU_K * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Affine-free layer normalization over each row.
pub fn layer_norm_rows(x: &Tensor, eps: f64) -> Tensor {
    let c = x.cols();
    let mut out = x.clone();
    for row in out.data.chunks_mut(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    out
}

/// Cosine similarity with each norm clamped below at `eps`.
pub fn cosine(a: &[f64], b: &[f64], eps: f64) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(eps);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(eps);
    dot / (na * nb)
}

/// 2-D convolution, stride 1, zero padding `pad`.
///
/// `x`: `[cin, h, w]`, `weight`: `[cout, cin, kh, kw]`, `bias`: `[cout]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, pad: usize) -> Tensor {
    let (cin, h, w) = dims3(x);
    let ws = weight.shape();
    let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
    assert_eq!(ws[1], cin, "conv2d channel mismatch");
    let oh = h + 2 * pad + 1 - kh;
    let ow = w + 2 * pad + 1 - kw;
    let mut out = vec![0.0; cout * oh * ow];
    for co in 0..cout {
        let plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
        plane.iter_mut().for_each(|v| *v = bias.data[co]);
        for ci in 0..cin {
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = weight.data[((co * cin + ci) * kh + ky) * kw + kx];
                    for oy in 0..oh {
                        let iy = oy + ky;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        let iy = iy - pad;
                        for ox in 0..ow {
                            let ix = ox + kx;
                            if ix < pad || ix - pad >= w {
                                continue;
                            }
                            plane[oy * ow + ox] += wv * x.data[(ci * h + iy) * w + ix - pad];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![cout, oh, ow], out)
}

/// Returns `(dx, dweight, dbias)` for [`conv2d`].
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    pad: usize,
    grad: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (cin, h, w) = dims3(x);
    let ws = weight.shape();
    let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
    let (_, oh, ow) = dims3(grad);
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; weight.len()];
    let mut db = vec![0.0; cout];
    for co in 0..cout {
        let g = &grad.data[co * oh * ow..(co + 1) * oh * ow];
        db[co] = g.iter().sum();
        for ci in 0..cin {
            for ky in 0..kh {
                for kx in 0..kw {
                    let widx = ((co * cin + ci) * kh + ky) * kw + kx;
                    let wv = weight.data[widx];
                    let mut acc = 0.0;
                    for oy in 0..oh {
                        let iy = oy + ky;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        let iy = iy - pad;
                        for ox in 0..ow {
                            let ix = ox + kx;
                            if ix < pad || ix - pad >= w {
                                continue;
                            }
                            let xi = (ci * h + iy) * w + ix - pad;
                            let gv = g[oy * ow + ox];
                            acc += gv * x.data[xi];
                            dx[xi] += gv * wv;
                        }
                    }
                    dw[widx] += acc;
                }
            }
        }
    }
    (
        Tensor::new(x.shape.clone(), dx),
        Tensor::new(weight.shape.clone(), dw),
        Tensor::new(vec![cout], db),
    )
}

/// Transposed 2-D convolution without padding.
///
/// `x`: `[cin, h, w]`, `weight`: `[cin, cout, kh, kw]`, `bias`: `[cout]`.
/// Output extent is `(h - 1) * stride + kh`.
pub fn conv_transpose2d(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize) -> Tensor {
    let (cin, h, w) = dims3(x);
    let ws = weight.shape();
    let (cout, kh, kw) = (ws[1], ws[2], ws[3]);
    assert_eq!(ws[0], cin, "conv_transpose2d channel mismatch");
    let oh = (h - 1) * stride + kh;
    let ow = (w - 1) * stride + kw;
    let mut out = vec![0.0; cout * oh * ow];
    for co in 0..cout {
        out[co * oh * ow..(co + 1) * oh * ow]
            .iter_mut()
            .for_each(|v| *v = bias.data[co]);
    }
    for ci in 0..cin {
        for iy in 0..h {
            for ix in 0..w {
                let xv = x.data[(ci * h + iy) * w + ix];
                if xv == 0.0 {
                    continue;
                }
                for co in 0..cout {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = weight.data[((ci * cout + co) * kh + ky) * kw + kx];
                            let oy = iy * stride + ky;
                            let ox = ix * stride + kx;
                            out[(co * oh + oy) * ow + ox] += xv * wv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![cout, oh, ow], out)
}

/// Returns `(dx, dweight, dbias)` for [`conv_transpose2d`].
pub fn conv_transpose2d_backward(
    x: &Tensor,
    weight: &Tensor,
    stride: usize,
    grad: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (cin, h, w) = dims3(x);
    let ws = weight.shape();
    let (cout, kh, kw) = (ws[1], ws[2], ws[3]);
    let (_, oh, ow) = dims3(grad);
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; weight.len()];
    let db: Vec<f64> = (0..cout)
        .map(|co| grad.data[co * oh * ow..(co + 1) * oh * ow].iter().sum())
        .collect();
    for ci in 0..cin {
        for iy in 0..h {
            for ix in 0..w {
                let xi = (ci * h + iy) * w + ix;
                let xv = x.data[xi];
                let mut acc = 0.0;
                for co in 0..cout {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let widx = ((ci * cout + co) * kh + ky) * kw + kx;
                            let oy = iy * stride + ky;
                            let ox = ix * stride + kx;
                            let gv = grad.data[(co * oh + oy) * ow + ox];
                            acc += gv * weight.data[widx];
                            dw[widx] += gv * xv;
                        }
                    }
                }
                dx[xi] = acc;
            }
        }
    }
    (
        Tensor::new(x.shape.clone(), dx),
        Tensor::new(weight.shape.clone(), dw),
        Tensor::new(vec![cout], db),
    )
}

/// Source taps for one output axis of half-pixel-centred bilinear resampling
/// (the `align_corners = false` convention).
pub fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = src - i0 as f64;
            (i0, i1, frac)
        })
        .collect()
}

/// Bilinear resize of every plane of a `[c, h, w]` tensor.
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (c, h, w) = dims3(x);
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        let plane = &x.data[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out[(ch * out_h + oy) * out_w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// Adjoint of [`bilinear_resize`]: scatters `grad` back onto the input grid.
pub fn bilinear_resize_backward(in_h: usize, in_w: usize, grad: &Tensor) -> Tensor {
    let (c, out_h, out_w) = dims3(grad);
    let ty = bilinear_taps(in_h, out_h);
    let tx = bilinear_taps(in_w, out_w);
    let mut dx = vec![0.0; c * in_h * in_w];
    for ch in 0..c {
        let plane = &mut dx[ch * in_h * in_w..(ch + 1) * in_h * in_w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let g = grad.data[(ch * out_h + oy) * out_w + ox];
                plane[y0 * in_w + x0] += g * (1.0 - fy) * (1.0 - fx);
                plane[y0 * in_w + x1] += g * (1.0 - fy) * fx;
                plane[y1 * in_w + x0] += g * fy * (1.0 - fx);
                plane[y1 * in_w + x1] += g * fy * fx;
            }
        }
    }
    Tensor::new(vec![c, in_h, in_w], dx)
}

fn dims3(x: &Tensor) -> (usize, usize, usize) {
    let s = x.shape();
    assert_eq!(s.len(), 3, "expected a [c, h, w] tensor, got {s:?}");
    (s[0], s[1], s[2])
}
