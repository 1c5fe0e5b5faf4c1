//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation eagerly. Leaves are either untracked
//! constants, tracked inputs, or parameters bound from a [`ParamStore`].
//! [`Graph::backward`] walks the tape in reverse from a scalar root.
//!
//! Two operations exist for gradient surgery: [`Graph::detach`] severs the
//! backward path, and [`Graph::grad_rescale`] is the identity on the forward
//! pass but multiplies the incoming gradient of each row by a constant weight.

use std::collections::HashMap;

use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{self, Tensor};

/// Norm floor used by every cosine-type operation.
pub const COS_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Abs(Var),
    Sqrt(Var),
    SoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    CosineFlat(Var, Var),
    RowCosine(Var, Var),
    NormalizeRows(Var),
    RowMax(Var, Vec<usize>),
    RowScale(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv2d { x: Var, w: Var, b: Var, pad: usize },
    ConvT2d { x: Var, w: Var, b: Var, stride: usize },
    Resize(Var),
    GradRescale(Var, Tensor),
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Grads {
    node: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.node[v.0].as_ref()
    }

    /// Gradient on every bound parameter that received one.
    pub fn params(&self, n_params: usize) -> Gradients {
        let mut out = Gradients::with_len(n_params);
        for &(id, v) in &self.params {
            if let Some(g) = &self.node[v.0] {
                out.accumulate(id, g);
            }
        }
        out
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn unary(&mut self, a: Var, value: Tensor, op: Op) -> Var {
        let t = self.tracked(a);
        self.push(value, op, t)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, op, t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.tracked(v)
    }

    /// Untracked leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Tracked leaf whose gradient can be read from [`Grads::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a parameter; repeated binds of the same id share one leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.bound.insert(id, v);
        v
    }

    /// Copy of `a` with no backward path.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.constant(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = tensor::matmul(self.value(a), self.value(b));
        self.binary(a, b, v, Op::MatMul(a, b))
    }

    /// `a * b^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = tensor::matmul_bt(self.value(a), self.value(b));
        self.binary(a, b, v, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.binary(a, b, v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.binary(a, b, v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.binary(a, b, v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.binary(a, b, v, Op::Div(a, b))
    }

    /// Adds a length-`cols` bias to every row.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let v = tensor::add_row_bias(self.value(x), self.value(b));
        self.binary(x, b, v, Op::AddBias(x, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.unary(a, v, Op::Scale(a, s))
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.unary(a, v, Op::Offset(a))
    }

    /// `c - a` for a constant `c`.
    pub fn rsub(&mut self, c: f64, a: Var) -> Var {
        let n = self.scale(a, -1.0);
        self.offset(n, c)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.unary(a, v, Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(tensor::gelu);
        self.unary(a, v, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(tensor::sigmoid);
        self.unary(a, v, Op::Sigmoid(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        self.unary(a, v, Op::Abs(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        self.unary(a, v, Op::Sqrt(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = tensor::softmax_rows(self.value(a));
        self.unary(a, v, Op::SoftmaxRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.unary(a, v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        self.unary(a, v, Op::Mean(a))
    }

    /// Cosine similarity of the two tensors flattened to vectors.
    pub fn cosine_flat(&mut self, a: Var, b: Var) -> Var {
        let v = Tensor::scalar(tensor::cosine(
            self.value(a).data(),
            self.value(b).data(),
            COS_EPS,
        ));
        self.binary(a, b, v, Op::CosineFlat(a, b))
    }

    /// Row-wise cosine similarity, shape `[rows]`.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "row_cosine shape mismatch");
        let v: Vec<f64> = (0..ta.rows())
            .map(|i| tensor::cosine(ta.row(i), tb.row(i), COS_EPS))
            .collect();
        let n = v.len();
        self.binary(a, b, Tensor::new(vec![n], v), Op::RowCosine(a, b))
    }

    /// Divides each row by its norm, floored at [`COS_EPS`].
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            let r = v.row_mut(i);
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt().max(COS_EPS);
            r.iter_mut().for_each(|x| *x /= n);
        }
        self.unary(a, v, Op::NormalizeRows(a))
    }

    /// Row maxima, shape `[rows]`; ties resolve to the lowest column.
    pub fn row_max(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut arg = Vec::with_capacity(t.rows());
        let mut v = Vec::with_capacity(t.rows());
        for i in 0..t.rows() {
            let (j, m) = argmax_first(t.row(i));
            arg.push(j);
            v.push(m);
        }
        let n = v.len();
        self.unary(a, Tensor::new(vec![n], v), Op::RowMax(a, arg))
    }

    /// Multiplies row `i` of `a` by `s[i]`.
    pub fn row_scale(&mut self, a: Var, s: Var) -> Var {
        let (ta, ts) = (self.value(a), self.value(s));
        assert_eq!(ta.rows(), ts.len(), "row_scale length mismatch");
        let mut v = ta.clone();
        for i in 0..v.rows() {
            let k = ts.data()[i];
            v.row_mut(i).iter_mut().for_each(|x| *x *= k);
        }
        self.binary(a, s, v, Op::RowScale(a, s))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.unary(a, v, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).clone().reshape(shape.to_vec());
        self.unary(a, v, Op::Reshape(a))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Var {
        let v = tensor::conv2d(self.value(x), self.value(w), self.value(b), pad);
        let t = self.tracked(x) || self.tracked(w) || self.tracked(b);
        self.push(v, Op::Conv2d { x, w, b, pad }, t)
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        let v = tensor::conv_transpose2d(self.value(x), self.value(w), self.value(b), stride);
        let t = self.tracked(x) || self.tracked(w) || self.tracked(b);
        self.push(v, Op::ConvT2d { x, w, b, stride }, t)
    }

    /// Bilinear resize of a `[c, h, w]` value.
    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let v = tensor::bilinear_resize(self.value(x), out_h, out_w);
        self.unary(x, v, Op::Resize(x))
    }

    /// Identity forward; backward multiplies the gradient of row `i` by
    /// `weights[i]`. The weights are constants.
    pub fn grad_rescale(&mut self, a: Var, weights: Tensor) -> Var {
        assert_eq!(
            self.value(a).rows(),
            weights.len(),
            "one weight per row expected"
        );
        let v = self.value(a).clone();
        self.unary(a, v, Op::GradRescale(a, weights))
    }

    /// Reverse pass from the scalar `root`, seeded with gradient 1.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self.bound.iter().map(|(&id, &v)| (id, v)).collect();
        Grads { node: grads, params }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.tracked(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[i].value;
        let val = |v: Var| &self.nodes[v.0].value;
        match &self.nodes[i].op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                if self.tracked(a) {
                    self.accumulate(grads, a, tensor::matmul_bt(g, val(b)));
                }
                if self.tracked(b) {
                    self.accumulate(grads, b, tensor::matmul_at(val(a), g));
                }
            }
            Op::MatMulBt(a, b) => {
                let (a, b) = (*a, *b);
                if self.tracked(a) {
                    self.accumulate(grads, a, tensor::matmul(g, val(b)));
                }
                if self.tracked(b) {
                    self.accumulate(grads, b, tensor::matmul_at(g, val(a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(grads, a, g.zip_map(val(b), |x, y| x * y));
                self.accumulate(grads, b, g.zip_map(val(a), |x, y| x * y));
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(grads, a, g.zip_map(val(b), |x, y| x / y));
                let db = g.zip_map(out, |x, q| x * q).zip_map(val(b), |x, y| -x / y);
                self.accumulate(grads, b, db);
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.tracked(*b) {
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for r in g.data().chunks(c) {
                        db.iter_mut().zip(r).for_each(|(d, v)| *d += v);
                    }
                    let shape = val(*b).shape().to_vec();
                    self.accumulate(grads, *b, Tensor::new(shape, db));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::Offset(a) => self.accumulate(grads, *a, g.clone()),
            Op::Relu(a) => {
                let d = g.zip_map(val(*a), |x, v| if v > 0.0 { x } else { 0.0 });
                self.accumulate(grads, *a, d);
            }
            Op::Gelu(a) => {
                let d = g.zip_map(val(*a), |x, v| x * tensor::gelu_grad(v));
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = g.zip_map(out, |x, y| x * y * (1.0 - y));
                self.accumulate(grads, *a, d);
            }
            Op::Abs(a) => {
                let d = g.zip_map(val(*a), |x, v| {
                    if v > 0.0 {
                        x
                    } else if v < 0.0 {
                        -x
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *a, d);
            }
            Op::Sqrt(a) => {
                let d = g.zip_map(out, |x, y| if y > 0.0 { 0.5 * x / y } else { 0.0 });
                self.accumulate(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let mut d = out.clone();
                for r in 0..d.rows() {
                    let gr = g.row(r);
                    let yr = out.row(r);
                    let s: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    for (j, dv) in d.row_mut(r).iter_mut().enumerate() {
                        *dv = yr[j] * (gr[j] - s);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let d = Tensor::full(val(*a).shape(), g.item());
                self.accumulate(grads, *a, d);
            }
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                let d = Tensor::full(val(*a).shape(), g.item() / n);
                self.accumulate(grads, *a, d);
            }
            Op::CosineFlat(a, b) => {
                let (a, b) = (*a, *b);
                let (da, db) = cosine_grads(val(a).data(), val(b).data(), g.item());
                let sa = val(a).shape().to_vec();
                let sb = val(b).shape().to_vec();
                self.accumulate(grads, a, Tensor::new(sa, da));
                self.accumulate(grads, b, Tensor::new(sb, db));
            }
            Op::RowCosine(a, b) => {
                let (a, b) = (*a, *b);
                let (ta, tb) = (val(a), val(b));
                let mut da = Vec::with_capacity(ta.len());
                let mut db = Vec::with_capacity(tb.len());
                for r in 0..ta.rows() {
                    let (x, y) = cosine_grads(ta.row(r), tb.row(r), g.data()[r]);
                    da.extend(x);
                    db.extend(y);
                }
                self.accumulate(grads, a, Tensor::new(ta.shape().to_vec(), da));
                self.accumulate(grads, b, Tensor::new(tb.shape().to_vec(), db));
            }
            Op::NormalizeRows(a) => {
                let ta = val(*a);
                let mut d = ta.clone();
                for r in 0..ta.rows() {
                    let x = ta.row(r);
                    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let gr = g.row(r);
                    let dr = d.row_mut(r);
                    if n > COS_EPS {
                        let y: Vec<f64> = x.iter().map(|v| v / n).collect();
                        let yg: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..dr.len() {
                            dr[j] = (gr[j] - y[j] * yg) / n;
                        }
                    } else {
                        for j in 0..dr.len() {
                            dr[j] = gr[j] / COS_EPS;
                        }
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::RowMax(a, arg) => {
                let mut d = Tensor::zeros(val(*a).shape());
                let c = d.cols();
                for (r, &j) in arg.iter().enumerate() {
                    d.data_mut()[r * c + j] = g.data()[r];
                }
                self.accumulate(grads, *a, d);
            }
            Op::RowScale(a, s) => {
                let (a, s) = (*a, *s);
                let (ta, ts) = (val(a), val(s));
                if self.tracked(a) {
                    let mut d = g.clone();
                    for r in 0..d.rows() {
                        let k = ts.data()[r];
                        d.row_mut(r).iter_mut().for_each(|x| *x *= k);
                    }
                    self.accumulate(grads, a, d);
                }
                if self.tracked(s) {
                    let ds: Vec<f64> = (0..ta.rows())
                        .map(|r| ta.row(r).iter().zip(g.row(r)).map(|(x, y)| x * y).sum())
                        .collect();
                    self.accumulate(grads, s, Tensor::new(ts.shape().to_vec(), ds));
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Reshape(a) => {
                let shape = val(*a).shape().to_vec();
                self.accumulate(grads, *a, g.clone().reshape(shape));
            }
            Op::Conv2d { x, w, b, pad } => {
                let (dx, dw, db) = tensor::conv2d_backward(val(*x), val(*w), *pad, g);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                self.accumulate(grads, *b, db.reshape(val(*b).shape().to_vec()));
            }
            Op::ConvT2d { x, w, b, stride } => {
                let (dx, dw, db) =
                    tensor::conv_transpose2d_backward(val(*x), val(*w), *stride, g);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                self.accumulate(grads, *b, db.reshape(val(*b).shape().to_vec()));
            }
            Op::Resize(x) => {
                let s = val(*x).shape();
                let d = tensor::bilinear_resize_backward(s[1], s[2], g);
                self.accumulate(grads, *x, d);
            }
            Op::GradRescale(a, w) => {
                let mut d = g.clone();
                for r in 0..d.rows() {
                    let k = w.data()[r];
                    d.row_mut(r).iter_mut().for_each(|x| *x *= k);
                }
                self.accumulate(grads, *a, d);
            }
        }
    }
}

/// First index of the maximum.
pub(crate) fn argmax_first(xs: &[f64]) -> (usize, f64) {
    let mut best = (0, xs[0]);
    for (j, &x) in xs.iter().enumerate().skip(1) {
        if x > best.1 {
            best = (j, x);
        }
    }
    best
}

/// Gradients of `g * cos(a, b)` with each norm floored at [`COS_EPS`].
fn cosine_grads(a: &[f64], b: &[f64], g: f64) -> (Vec<f64>, Vec<f64>) {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na_raw = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb_raw = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let na = na_raw.max(COS_EPS);
    let nb = nb_raw.max(COS_EPS);
    let cos = dot / (na * nb);
    let ka = if na_raw > COS_EPS { cos / (na * na) } else { 0.0 };
    let kb = if nb_raw > COS_EPS { cos / (nb * nb) } else { 0.0 };
    let da = a
        .iter()
        .zip(b)
        .map(|(x, y)| g * (y / (na * nb) - ka * x))
        .collect();
    let db = a
        .iter()
        .zip(b)
        .map(|(x, y)| g * (x / (na * nb) - kb * y))
        .collect();
    (da, db)
}

/// Central finite-difference gradient of a scalar function.
pub fn numeric_grad(x: &Tensor, step: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut g = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        g.data_mut()[i] = (up - down) / (2.0 * step);
    }
    g
}

/// `max |a - b| / max(max |a|, max |b|, floor)`.
pub fn relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    let scale = a
        .data()
        .iter()
        .chain(b.data())
        .fold(floor, |m, v| m.max(v.abs()));
    a.max_abs_diff(b) / scale
}
