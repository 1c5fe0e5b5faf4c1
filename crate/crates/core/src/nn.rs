//! Small parameterized building blocks shared by several components.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::params::{normal_tensor, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Two-layer perceptron `gelu(x W1 + b1) W2 + b2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ffn {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Ffn {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
        out_std: f64,
    ) -> Self {
        Self {
            w1: store.add(
                format!("{prefix}.w1"),
                normal_tensor(rng, &[dim, hidden], (1.0 / dim as f64).sqrt()),
            ),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[hidden])),
            w2: store.add(format!("{prefix}.w2"), normal_tensor(rng, &[hidden, dim], out_std)),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w1 = g.param(store, self.w1);
        let b1 = g.param(store, self.b1);
        let w2 = g.param(store, self.w2);
        let b2 = g.param(store, self.b2);
        let h = g.matmul(x, w1);
        let h = g.add_bias(h, b1);
        let h = g.gelu(h);
        let o = g.matmul(h, w2);
        g.add_bias(o, b2)
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}
