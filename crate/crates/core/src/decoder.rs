//! Prototype-guided decoder and its closed-form attention cost accounting.
//!
//! Each layer attends from the previous layer's tokens to the prototypes:
//! `A = ReLU(f W_q (P W_k)^T)`, `f' = A (P W_v)`, `out = FFN(f') + f'`.
//! There is no softmax, no score scaling, and no residual from `f` itself, so
//! before the FFN every output row is a nonnegative combination of the
//! projected prototypes.

use std::fmt::Write as _;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::Ffn;
use crate::params::{normal_tensor, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderLayerParams {
    /// 1-based layer number.
    pub index: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub ffn: Ffn,
}

impl DecoderLayerParams {
    pub fn register(store: &mut ParamStore, index: usize, dim: usize, prototypes: usize, rng: &mut ChaCha8Rng) -> Self {
        let c = dim as f64;
        let prefix = format!("decoder.{index}");
        Self {
            index,
            wq: store.add(format!("{prefix}.wq"), normal_tensor(rng, &[dim, dim], 1.0 / c)),
            wk: store.add(format!("{prefix}.wk"), normal_tensor(rng, &[dim, dim], 1.0 / c)),
            wv: store.add(
                format!("{prefix}.wv"),
                normal_tensor(rng, &[dim, dim], 1.0 / (c.sqrt() * prototypes as f64)),
            ),
            ffn: Ffn::register(store, &format!("{prefix}.ffn"), dim, 4 * dim, rng, 0.1 / c.sqrt()),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.wq, self.wk, self.wv];
        v.extend(self.ffn.ids());
        v
    }
}

/// Outputs of one decoder layer.
pub struct LayerOutput {
    pub output: Var,
    /// `N x M` ReLU attention map.
    pub attention: Var,
    /// Attention-mixed values before the FFN.
    pub mixed: Var,
}

pub fn decoder_layer(
    g: &mut Graph,
    store: &ParamStore,
    params: &DecoderLayerParams,
    previous: Var,
    prototypes: Var,
) -> Result<LayerOutput> {
    let c = store.get(params.wq).rows();
    let (fc, pc) = (g.value(previous).cols(), g.value(prototypes).cols());
    if fc != c || pc != c {
        return Err(Error::Shape(format!(
            "decoder layer {} expects {c} channels, got tokens {fc} and prototypes {pc}",
            params.index
        )));
    }
    let wq = g.param(store, params.wq);
    let wk = g.param(store, params.wk);
    let wv = g.param(store, params.wv);
    let q = g.matmul(previous, wq);
    let k = g.matmul(prototypes, wk);
    let v = g.matmul(prototypes, wv);
    let scores = g.matmul_bt(q, k);
    let attention = g.relu(scores);
    let mixed = g.matmul(attention, v);
    let f = params.ffn.forward(g, store, mixed);
    let output = g.add(f, mixed);
    Ok(LayerOutput { output, attention, mixed })
}

/// Runs every layer from the fused bottleneck output and returns, for each
/// decoder group, the sum of that group's layer outputs.
pub fn decode(
    g: &mut Graph,
    store: &ParamStore,
    layers: &[DecoderLayerParams],
    fused: Var,
    prototypes: Var,
    groups: &[Vec<usize>],
) -> Result<Vec<Var>> {
    for grp in groups {
        if grp.is_empty() {
            return Err(Error::EmptyGroup);
        }
        if let Some(&i) = grp.iter().find(|&&i| i == 0 || i > layers.len()) {
            return Err(Error::LayerOutOfRange { index: i, layers: layers.len() });
        }
    }
    let mut outputs = Vec::with_capacity(layers.len());
    let mut x = fused;
    for layer in layers {
        x = decoder_layer(g, store, layer, x, prototypes)?.output;
        outputs.push(x);
    }
    Ok(groups
        .iter()
        .map(|grp| {
            let mut acc = outputs[grp[0] - 1];
            for &i in &grp[1..] {
                acc = g.add(acc, outputs[i - 1]);
            }
            acc
        })
        .collect())
}

/// Closed-form cost of one attention pass of `n` queries over `keys` keys
/// with `dim` channels, counting each dot product of length `d` as `d`
/// multiplications plus `d - 1` additions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperationCount {
    /// `Q K^T`: `n * keys * (2 dim - 1)`.
    pub scores: u64,
    /// `A V`: `n * dim * (2 keys - 1)`.
    pub mixing: u64,
    pub q_bytes: u64,
    pub k_bytes: u64,
    pub v_bytes: u64,
    pub a_bytes: u64,
}

/// Bytes per stored element (32-bit reals).
pub const ELEMENT_BYTES: u64 = 4;

pub fn attention_cost(n: u64, keys: u64, dim: u64) -> OperationCount {
    assert!(n > 0 && keys > 0 && dim > 0, "attention sizes must be positive");
    OperationCount {
        scores: n * keys * (2 * dim - 1),
        mixing: n * dim * (2 * keys - 1),
        q_bytes: n * dim * ELEMENT_BYTES,
        k_bytes: keys * dim * ELEMENT_BYTES,
        v_bytes: keys * dim * ELEMENT_BYTES,
        a_bytes: n * keys * ELEMENT_BYTES,
    }
}

/// Bytes to MiB (`/ 1024^2`).
pub fn mib(bytes: u64) -> f64 {
    bytes as f64 / (1024.0 * 1024.0)
}

fn grouped(v: u64) -> String {
    let s = v.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(' ');
        }
        out.push(ch);
    }
    out
}

/// Plain-text comparison of self-attention (`n` keys) against
/// prototype-guided attention (`m` keys).
pub fn cost_report(n: u64, m: u64, dim: u64) -> String {
    let full = attention_cost(n, n, dim);
    let inp = attention_cost(n, m, dim);
    let mem = |c: &OperationCount| {
        format!(
            "{:.2}/{:.2}/{:.2}/{:.2}",
            mib(c.q_bytes),
            mib(c.k_bytes),
            mib(c.v_bytes),
            mib(c.a_bytes)
        )
    };
    let mem3 = |c: &OperationCount| {
        format!(
            "{:.2}/{:.3}/{:.3}/{:.3}",
            mib(c.q_bytes),
            mib(c.k_bytes),
            mib(c.v_bytes),
            mib(c.a_bytes)
        )
    };
    let mut out = String::new();
    let _ = writeln!(out, "attention cost  N={n} M={m} C={dim}");
    let _ = writeln!(out, "{:<14}{:>24}{:>24}", "", "self-attention", "prototype-guided");
    let _ = writeln!(out, "{:<14}{:>24}{:>24}", "A=QK^T", grouped(full.scores), grouped(inp.scores));
    let _ = writeln!(out, "{:<14}{:>24}{:>24}", "f'=AV", grouped(full.mixing), grouped(inp.mixing));
    let _ = writeln!(out, "{:<14}{:>24}{:>24}", "Q/K/V/A (MB)", mem(&full), mem3(&inp));
    let _ = writeln!(
        out,
        "{:<14}{:>24}{:>24}",
        "reduction",
        "",
        format!("{:.2}%", 100.0 * (1.0 - inp.scores as f64 / full.scores as f64))
    );
    out
}
