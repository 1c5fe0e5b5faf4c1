//! Soft-mining reconstruction loss and the combined normal-pattern objective.
//!
//! Hard regions get larger gradients without changing the loss value: the
//! decoder output passes through an identity node whose backward pass scales
//! each cell by `(M / u)^gamma`, where `M` is a per-cell difficulty and `u` its
//! batch mean.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var, COS_EPS};
use crate::encoder::TokenGrid;
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Per-cell difficulties over a batch of token grids, cells concatenated
/// image-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DifficultyField {
    pub m_cos: Vec<f64>,
    pub m_mse: Vec<f64>,
    pub u_cos: f64,
    pub u_mse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiningWeights {
    pub w_cos: Vec<f64>,
    pub w_mse: Vec<f64>,
    pub gamma: f64,
}

/// Scalar loss values for one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub sm_cos: f64,
    pub sm_mse: f64,
    pub sm: f64,
    pub sc: f64,
    pub npm: f64,
    pub lambda: f64,
}

fn cell_difficulty(a: &[f64], b: &[f64]) -> (f64, f64) {
    let cos = 1.0 - tensor::cosine(a, b, COS_EPS);
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    (cos, mse)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn tensors_difficulty(pairs: &[(&Tensor, &Tensor)]) -> DifficultyField {
    let mut m_cos = Vec::new();
    let mut m_mse = Vec::new();
    for (e, d) in pairs {
        for i in 0..e.rows() {
            let (c, m) = cell_difficulty(e.row(i), d.row(i));
            m_cos.push(c.max(0.0));
            m_mse.push(m);
        }
    }
    let (u_cos, u_mse) = (mean(&m_cos), mean(&m_mse));
    DifficultyField { m_cos, m_mse, u_cos, u_mse }
}

/// Difficulty fields of one encoder/decoder group pair.
pub fn difficulty_fields(enc: &TokenGrid, dec: &TokenGrid) -> Result<DifficultyField> {
    difficulty_fields_batch(&[(enc, dec)])
}

/// Difficulty fields of one group across a mini-batch; `u` is averaged over
/// every cell of every image.
pub fn difficulty_fields_batch(pairs: &[(&TokenGrid, &TokenGrid)]) -> Result<DifficultyField> {
    if let Some((a, _)) = pairs.iter().find(|(a, b)| !a.same_shape(b)) {
        return Err(Error::Shape(format!("decoder grid differs from encoder {}x{}x{}", a.h, a.w, a.dim())));
    }
    let t: Vec<_> = pairs.iter().map(|(a, b)| (&a.tokens, &b.tokens)).collect();
    Ok(tensors_difficulty(&t))
}

fn weights_for(m: &[f64], u: f64, gamma: f64) -> Vec<f64> {
    if u > 0.0 {
        m.iter().map(|&x| (x / u).powf(gamma)).collect()
    } else {
        vec![1.0; m.len()]
    }
}

/// `w = (M / u)^gamma`; all ones when `u = 0`.
pub fn mining_weights(field: &DifficultyField, gamma: f64) -> MiningWeights {
    assert!(gamma >= 0.0, "gamma must be nonnegative");
    MiningWeights {
        w_cos: weights_for(&field.m_cos, field.u_cos, gamma),
        w_mse: weights_for(&field.m_mse, field.u_mse, gamma),
        gamma,
    }
}

/// Identity forward; backward multiplies each row's gradient by its weight.
pub fn grad_rescale(g: &mut Graph, dec: Var, weights: &[f64]) -> Var {
    let n = weights.len();
    g.grad_rescale(dec, Tensor::new(vec![n], weights.to_vec()))
}

/// Graph nodes of the soft-mining loss.
pub struct SoftMiningVars {
    pub cos: Var,
    pub mse: Var,
    pub total: Var,
}

/// Soft-mining loss over a batch.
///
/// `enc[b][l]` are frozen encoder group features of image `b`, `dec[b][l]` the
/// matching decoder outputs. The cosine term is `1 - cos(vec enc, vec dec)`
/// per image and group; the squared-error term is averaged over images,
/// groups, cells and channels.
pub fn soft_mining_loss(g: &mut Graph, enc: &[Vec<Tensor>], dec: &[Vec<Var>], gamma: f64) -> Result<SoftMiningVars> {
    if enc.is_empty() || enc.len() != dec.len() {
        return Err(Error::Shape(format!("{} encoder vs {} decoder images", enc.len(), dec.len())));
    }
    let groups = enc[0].len();
    if groups == 0 || enc.iter().zip(dec).any(|(e, d)| e.len() != groups || d.len() != groups) {
        return Err(Error::Shape("group counts differ between encoder and decoder".into()));
    }
    for (e, d) in enc.iter().zip(dec) {
        for (et, dv) in e.iter().zip(d) {
            if et.shape() != g.value(*dv).shape() {
                return Err(Error::Shape(format!(
                    "encoder group {:?} vs decoder {:?}",
                    et.shape(),
                    g.value(*dv).shape()
                )));
            }
        }
    }
    let batch = enc.len();
    let mut cos_terms = Vec::with_capacity(batch * groups);
    let mut mse_terms = Vec::with_capacity(batch * groups);
    for l in 0..groups {
        let pairs: Vec<(&Tensor, &Tensor)> = (0..batch).map(|b| (&enc[b][l], g.value(dec[b][l]))).collect();
        let field = tensors_difficulty(&pairs);
        let weights = mining_weights(&field, gamma);
        let n = enc[0][l].rows();
        for b in 0..batch {
            let cells = b * n..(b + 1) * n;
            let e = g.constant(enc[b][l].clone());
            let dc = grad_rescale(g, dec[b][l], &weights.w_cos[cells.clone()]);
            let cos = g.cosine_flat(e, dc);
            cos_terms.push(g.rsub(1.0, cos));
            let dm = grad_rescale(g, dec[b][l], &weights.w_mse[cells]);
            let diff = g.sub(e, dm);
            let sq = g.mul(diff, diff);
            mse_terms.push(g.mean(sq));
        }
    }
    let cos = mean_of(g, &cos_terms);
    let mse = mean_of(g, &mse_terms);
    let total = g.add(cos, mse);
    Ok(SoftMiningVars { cos, mse, total })
}

fn mean_of(g: &mut Graph, terms: &[Var]) -> Var {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    g.scale(acc, 1.0 / terms.len() as f64)
}

/// `L_npm = L_sm + lambda * L_sc`.
pub fn npm_loss(g: &mut Graph, sm: Var, sc: Var, lambda: f64) -> Var {
    let weighted = g.scale(sc, lambda);
    g.add(sm, weighted)
}

impl LossBundle {
    pub fn from_graph(g: &Graph, sm: &SoftMiningVars, sc: Var, npm: Var, lambda: f64) -> Self {
        Self {
            sm_cos: g.value(sm.cos).item(),
            sm_mse: g.value(sm.mse).item(),
            sm: g.value(sm.total).item(),
            sc: g.value(sc).item(),
            npm: g.value(npm).item(),
            lambda,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{numeric_grad, relative_error};
    use crate::params::normal_tensor;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(t: Tensor, h: usize, w: usize) -> TokenGrid {
        TokenGrid::new(h, w, t).unwrap()
    }

    #[test]
    fn identical_groups_have_zero_difficulty() {
        let t = normal_tensor(&mut ChaCha8Rng::seed_from_u64(1), &[4, 3], 1.0);
        let f = difficulty_fields(&grid(t.clone(), 2, 2), &grid(t, 2, 2)).unwrap();
        assert!(f.m_cos.iter().chain(&f.m_mse).all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn antipodal_cell() {
        let e = Tensor::from_rows(&[&[1.0, 2.0], &[0.5, 0.5]]);
        let d = Tensor::from_rows(&[&[-1.0, -2.0], &[0.5, 0.5]]);
        let f = difficulty_fields(&grid(e, 1, 2), &grid(d, 1, 2)).unwrap();
        assert!((f.m_cos[0] - 2.0).abs() < 1e-12);
        assert!((f.m_mse[0] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn seeded_fields_match_cell_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e = normal_tensor(&mut rng, &[4, 3], 1.0);
        let d = normal_tensor(&mut rng, &[4, 3], 1.0);
        let f = difficulty_fields(&grid(e.clone(), 2, 2), &grid(d.clone(), 2, 2)).unwrap();
        let mut sum = 0.0;
        for i in 0..4 {
            let (a, b) = (e.row(i), d.row(i));
            let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
            let na = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
            let nb = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
            assert!((f.m_cos[i] - (1.0 - dot / (na * nb))).abs() < 1e-12);
            let mse = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)) / 3.0;
            assert!((f.m_mse[i] - mse).abs() < 1e-12);
            sum += f.m_cos[i];
        }
        assert!((f.u_cos - sum / 4.0).abs() < 1e-12);
    }

    #[test]
    fn weight_examples() {
        let field = DifficultyField { m_cos: vec![1.0, 3.0], m_mse: vec![2.0, 2.0], u_cos: 2.0, u_mse: 2.0 };
        let w = mining_weights(&field, 3.0);
        assert_eq!(w.w_cos, vec![0.125, 3.375]);
        assert_eq!(w.w_mse, vec![1.0, 1.0]);
        assert!(mining_weights(&field, 0.0).w_cos.iter().all(|&v| v == 1.0));
        let zero = DifficultyField { m_cos: vec![0.0; 3], m_mse: vec![0.0; 3], u_cos: 0.0, u_mse: 0.0 };
        assert!(mining_weights(&zero, 3.0).w_cos.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn scalar_rescale_example() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, 1], vec![1.0]));
        let y = grad_rescale(&mut g, x, &[3.0]);
        let sq = g.mul(y, y);
        let loss = g.sum(sq);
        assert_eq!(g.value(y).data(), &[1.0]);
        assert_eq!(g.backward(loss).wrt(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn rescaled_backward_is_weighted_plain_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = normal_tensor(&mut rng, &[6, 4], 1.0);
        let w: Vec<f64> = (0..6).map(|i| 0.5 + i as f64).collect();
        let grad = |weights: Option<&[f64]>| {
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let y = match weights {
                Some(w) => grad_rescale(&mut g, xv, w),
                None => xv,
            };
            let sq = g.mul(y, y);
            let loss = g.sum(sq);
            g.backward(loss).wrt(xv).unwrap().clone()
        };
        let (plain, scaled) = (grad(None), grad(Some(&w)));
        for i in 0..6 {
            for c in 0..4 {
                assert!((scaled.at(i, c) - w[i] * plain.at(i, c)).abs() < 1e-12);
            }
        }
    }

    fn batch(seed: u64, b: usize, groups: usize) -> (Vec<Vec<Tensor>>, Vec<Vec<Tensor>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = (0..b).map(|_| (0..groups).map(|_| normal_tensor(&mut rng, &[4, 3], 1.0)).collect()).collect();
        let dec = (0..b).map(|_| (0..groups).map(|_| normal_tensor(&mut rng, &[4, 3], 1.0)).collect()).collect();
        (enc, dec)
    }

    fn run(enc: &[Vec<Tensor>], dec: &[Vec<Tensor>], gamma: f64) -> (f64, f64, Vec<Vec<Tensor>>) {
        let mut g = Graph::new();
        let dv: Vec<Vec<Var>> = dec.iter().map(|d| d.iter().map(|t| g.input(t.clone())).collect()).collect();
        let sm = soft_mining_loss(&mut g, enc, &dv, gamma).unwrap();
        let grads = g.backward(sm.total);
        let gd = dv.iter().map(|d| d.iter().map(|&v| grads.wrt(v).unwrap().clone()).collect()).collect();
        (g.value(sm.cos).item(), g.value(sm.mse).item(), gd)
    }

    #[test]
    fn equal_inputs_give_zero_loss_and_gradient() {
        let (enc, _) = batch(3, 2, 2);
        let (c, m, gd) = run(&enc, &enc, 3.0);
        assert!(c.abs() < 1e-12 && m.abs() < 1e-12);
        assert!(gd.iter().flatten().all(|t| t.data().iter().all(|v| v.abs() < 1e-9)));
    }

    #[test]
    fn gamma_zero_matches_plain_objective() {
        let (enc, dec) = batch(5, 2, 2);
        let (c, m, gd) = run(&enc, &dec, 0.0);
        let plain = |dec: &[Vec<Tensor>]| {
            let mut cos = 0.0;
            let mut mse = 0.0;
            for b in 0..2 {
                for l in 0..2 {
                    let (e, d) = (&enc[b][l], &dec[b][l]);
                    cos += 1.0 - e.dot(d) / (e.norm() * d.norm());
                    mse += e.zip_map(d, |x, y| (x - y).powi(2)).mean();
                }
            }
            (cos / 4.0, mse / 4.0)
        };
        let (pc, pm) = plain(&dec);
        assert!((c - pc).abs() < 1e-12 && (m - pm).abs() < 1e-12);
        for b in 0..2 {
            for l in 0..2 {
                let numeric = numeric_grad(&dec[b][l], 1e-5, |t| {
                    let mut d = dec.clone();
                    d[b][l] = t.clone();
                    let (c, m) = plain(&d);
                    c + m
                });
                assert!(relative_error(&gd[b][l], &numeric, 1e-6) < 1e-3);
            }
        }
    }

    #[test]
    fn value_is_independent_of_gamma() {
        let (enc, dec) = batch(7, 3, 2);
        let (c0, m0, g0) = run(&enc, &dec, 0.0);
        for gamma in [1.0, 3.0] {
            let (c, m, gg) = run(&enc, &dec, gamma);
            assert!((c - c0).abs() < 1e-12 && (m - m0).abs() < 1e-12);
            let diff: f64 = g0.iter().flatten().zip(gg.iter().flatten()).map(|(a, b)| a.max_abs_diff(b)).fold(0.0, f64::max);
            assert!(diff > 1e-6);
        }
    }

    #[test]
    fn mismatched_groups_rejected() {
        let (enc, dec) = batch(1, 2, 2);
        let mut g = Graph::new();
        let dv: Vec<Vec<Var>> = dec.iter().map(|d| vec![g.input(d[0].clone())]).collect();
        assert!(soft_mining_loss(&mut g, &enc, &dv, 3.0).is_err());
    }

    #[test]
    fn npm_combination() {
        let mut g = Graph::new();
        let sm = g.input(Tensor::scalar(0.4));
        let sc = g.input(Tensor::scalar(0.5));
        let npm = npm_loss(&mut g, sm, sc, 0.2);
        assert!((g.value(npm).item() - 0.5).abs() < 1e-15);
        let zero = npm_loss(&mut g, sm, sc, 0.0);
        assert_eq!(g.value(zero).item(), 0.4);
        let grads = g.backward(npm);
        assert_eq!(grads.wrt(sm).unwrap().item(), 1.0);
        assert!((grads.wrt(sc).unwrap().item() - 0.2).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn losses_bounded(seed in 0u64..500, gamma in 0.0f64..4.0) {
            let (enc, dec) = batch(seed, 2, 2);
            let (c, m, _) = run(&enc, &dec, gamma);
            prop_assert!((0.0..=2.0).contains(&c));
            prop_assert!(m >= 0.0);
        }
    }
}
