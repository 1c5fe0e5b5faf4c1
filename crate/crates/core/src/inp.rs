//! Intrinsic normal prototype extraction and the coherence objectives that
//! keep prototypes aligned with the normal tokens of the same image.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{argmax_first, Graph, Var, COS_EPS};
use crate::encoder::TokenGrid;
use crate::error::{Error, Result};
use crate::nn::Ffn;
use crate::params::{normal_tensor, ParamId, ParamStore};
use crate::scoring::{AnomalyMap, Resolution};
use crate::tensor::{self, Tensor};

/// Cross-attention block mapping `M` learnable seed tokens onto `M`
/// prototypes of the aggregated encoder features:
///
/// `T' = softmax(T Wq (F Wk)^T / sqrt(C)) F Wv + T`, `P = FFN(T') + T'`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InpExtractor {
    pub tokens: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub ffn: Ffn,
}

/// Output of one extraction: prototypes plus the attention used to form them.
pub struct Extraction {
    pub prototypes: Var,
    /// `M x N` attention of each seed token over the feature tokens.
    pub attention: Var,
}

impl InpExtractor {
    pub fn register(store: &mut ParamStore, m: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let s = (1.0 / dim as f64).sqrt();
        Self {
            tokens: store.add("tokens", normal_tensor(rng, &[m, dim], 0.02)),
            wq: store.add("extractor.wq", normal_tensor(rng, &[dim, dim], s)),
            wk: store.add("extractor.wk", normal_tensor(rng, &[dim, dim], s)),
            wv: store.add("extractor.wv", normal_tensor(rng, &[dim, dim], s)),
            ffn: Ffn::register(store, "extractor.ffn", dim, 4 * dim, rng, 0.1 * s),
        }
    }

    pub fn num_prototypes(&self, store: &ParamStore) -> usize {
        store.get(self.tokens).rows()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, features: Var) -> Result<Extraction> {
        let t = g.param(store, self.tokens);
        let (m, c) = (g.value(t).rows(), g.value(t).cols());
        let fdim = g.value(features).cols();
        if fdim != c || store.get(self.wq).shape() != [c, c] {
            return Err(Error::Shape(format!(
                "seed tokens {m}x{c} vs features with {fdim} channels"
            )));
        }
        let wq = g.param(store, self.wq);
        let wk = g.param(store, self.wk);
        let wv = g.param(store, self.wv);
        let q = g.matmul(t, wq);
        let k = g.matmul(features, wk);
        let v = g.matmul(features, wv);
        let scores = g.matmul_bt(q, k);
        let scores = g.scale(scores, 1.0 / (c as f64).sqrt());
        let attention = g.softmax_rows(scores);
        let mixed = g.matmul(attention, v);
        let t1 = g.add(mixed, t);
        let f = self.ffn.forward(g, store, t1);
        let prototypes = g.add(f, t1);
        Ok(Extraction { prototypes, attention })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.tokens, self.wq, self.wk, self.wv];
        v.extend(self.ffn.ids());
        v
    }
}

/// Value-level extraction of `M x C` prototypes from an aggregate.
pub fn extract_inps(grid: &TokenGrid, extractor: &InpExtractor, store: &ParamStore) -> Result<Tensor> {
    let mut g = Graph::new();
    let f = g.constant(grid.tokens.clone());
    let e = extractor.forward(&mut g, store, f)?;
    Ok(g.value(e.prototypes).clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoherenceMode {
    Hard,
    Soft,
}

#[derive(Clone, Debug)]
pub struct CoherenceResult {
    pub loss: f64,
    /// Hard mode: nearest-prototype cosine distance per token.
    pub distances: Option<Vec<f64>>,
    /// Soft mode: `N x M` softmax weights.
    pub weights: Option<Tensor>,
    /// Tokens or prototypes whose norm fell below the cosine floor.
    pub degenerate: usize,
}

/// Graph nodes of a coherence loss.
pub struct CoherenceVars {
    pub loss: Var,
    /// `N x M` cosine similarities.
    pub similarity: Var,
    /// `N x M` soft weights (soft mode only).
    pub weights: Option<Var>,
    /// `N x C` weighted prototype reconstruction (soft mode only).
    pub reconstruction: Option<Var>,
}

fn similarity(g: &mut Graph, features: Var, prototypes: Var) -> Var {
    let fnorm = g.normalize_rows(features);
    let pnorm = g.normalize_rows(prototypes);
    g.matmul_bt(fnorm, pnorm)
}

/// `mean_i min_m (1 - cos(F_i, p_m))`.
pub fn coherence_hard_graph(g: &mut Graph, features: Var, prototypes: Var) -> CoherenceVars {
    let s = similarity(g, features, prototypes);
    let best = g.row_max(s);
    let mean = g.mean(best);
    let loss = g.rsub(1.0, mean);
    CoherenceVars { loss, similarity: s, weights: None, reconstruction: None }
}

/// `1 - cos(vec F, vec F_hat)` with `F_hat_i = sum_m softmax_m(cos(F_i, p_m)) p_m`.
pub fn coherence_soft_graph(g: &mut Graph, features: Var, prototypes: Var) -> CoherenceVars {
    let s = similarity(g, features, prototypes);
    let w = g.softmax_rows(s);
    let recon = g.matmul(w, prototypes);
    let cos = g.cosine_flat(features, recon);
    let loss = g.rsub(1.0, cos);
    CoherenceVars { loss, similarity: s, weights: Some(w), reconstruction: Some(recon) }
}

fn count_degenerate(features: &Tensor, prototypes: &Tensor) -> usize {
    let small = |t: &Tensor| {
        (0..t.rows())
            .filter(|&i| t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt() < COS_EPS)
            .count()
    };
    small(features) + small(prototypes)
}

fn check_dims(features: &TokenGrid, prototypes: &Tensor) -> Result<()> {
    if features.dim() != prototypes.cols() {
        return Err(Error::Shape(format!(
            "features have {} channels, prototypes {}",
            features.dim(),
            prototypes.cols()
        )));
    }
    Ok(())
}

pub fn coherence_loss_hard(features: &TokenGrid, prototypes: &Tensor) -> Result<CoherenceResult> {
    check_dims(features, prototypes)?;
    let mut g = Graph::new();
    let f = g.constant(features.tokens.clone());
    let p = g.constant(prototypes.clone());
    let v = coherence_hard_graph(&mut g, f, p);
    let distances = g.value(v.similarity).data().chunks(prototypes.rows())
        .map(|row| 1.0 - argmax_first(row).1)
        .collect();
    Ok(CoherenceResult {
        loss: g.value(v.loss).item(),
        distances: Some(distances),
        weights: None,
        degenerate: count_degenerate(&features.tokens, prototypes),
    })
}

pub fn coherence_loss_soft(features: &TokenGrid, prototypes: &Tensor) -> Result<CoherenceResult> {
    check_dims(features, prototypes)?;
    let mut g = Graph::new();
    let f = g.constant(features.tokens.clone());
    let p = g.constant(prototypes.clone());
    let v = coherence_soft_graph(&mut g, f, p);
    Ok(CoherenceResult {
        loss: g.value(v.loss).item(),
        distances: None,
        weights: v.weights.map(|w| g.value(w).clone()),
        degenerate: count_degenerate(&features.tokens, prototypes),
    })
}

/// Per-token distance to the prototypes, laid out on the token grid.
pub fn inp_distance_map(features: &TokenGrid, prototypes: &Tensor, mode: CoherenceMode) -> Result<AnomalyMap> {
    check_dims(features, prototypes)?;
    let values = match mode {
        CoherenceMode::Hard => coherence_loss_hard(features, prototypes)?.distances.unwrap(),
        CoherenceMode::Soft => {
            let mut g = Graph::new();
            let f = g.constant(features.tokens.clone());
            let p = g.constant(prototypes.clone());
            let v = coherence_soft_graph(&mut g, f, p);
            let recon = g.value(v.reconstruction.unwrap());
            (0..features.n())
                .map(|i| 1.0 - tensor::cosine(features.tokens.row(i), recon.row(i), COS_EPS))
                .collect()
        }
    };
    Ok(AnomalyMap::new(features.h, features.w, values, Resolution::Grid))
}

/// Nearest prototype per token (highest cosine, lowest index on ties).
pub fn assign_tokens(features: &TokenGrid, prototypes: &Tensor) -> Result<Vec<usize>> {
    check_dims(features, prototypes)?;
    Ok((0..features.n())
        .map(|i| {
            let sims: Vec<f64> = (0..prototypes.rows())
                .map(|m| tensor::cosine(features.tokens.row(i), prototypes.row(m), COS_EPS))
                .collect();
            argmax_first(&sims).0
        })
        .collect())
}

/// Fraction of tokens assigned to the most popular prototype; 1.0 means
/// every token collapsed onto a single prototype.
pub fn shortcut_collapse(assignment: &[usize], num_prototypes: usize) -> f64 {
    let mut counts = vec![0usize; num_prototypes.max(1)];
    for &a in assignment {
        counts[a] += 1;
    }
    *counts.iter().max().unwrap() as f64 / assignment.len().max(1) as f64
}
