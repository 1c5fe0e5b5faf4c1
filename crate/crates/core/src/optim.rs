//! AdamW with per-tensor update clipping.
//!
//! Each tensor's step size is divided by `max(1, sqrt(mean(g^2 / v_hat)))`,
//! which caps updates when the second-moment estimate lags behind a sudden
//! gradient spike.

use serde::{Deserialize, Serialize};

use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { lr: 5e-4, weight_decay: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Moments {
    m: Tensor,
    v: Tensor,
    steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StableAdamW {
    pub config: OptimizerConfig,
    state: Vec<Option<Moments>>,
}

impl StableAdamW {
    pub fn new(config: OptimizerConfig) -> Self {
        Self { config, state: Vec::new() }
    }

    /// Updates the parameters in `ids` that have a gradient. Parameters
    /// without one keep both their value and their moment state.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, ids: &[ParamId], lr: f64) {
        let c = &self.config;
        if self.state.len() < store.len() {
            self.state.resize(store.len(), None);
        }
        for &id in ids {
            let Some(g) = grads.get(id) else { continue };
            let st = self.state[id.index()].get_or_insert_with(|| Moments {
                m: Tensor::zeros(g.shape()),
                v: Tensor::zeros(g.shape()),
                steps: 0,
            });
            st.steps += 1;
            let t = st.steps as i32;
            let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
            let mut ratio = 0.0;
            for ((m, v), &gi) in st.m.data_mut().iter_mut().zip(st.v.data_mut()).zip(g.data()) {
                *m = c.beta1 * *m + (1.0 - c.beta1) * gi;
                *v = c.beta2 * *v + (1.0 - c.beta2) * gi * gi;
                ratio += gi * gi / (*v / bc2).max(c.eps * c.eps);
            }
            let rms = (ratio / g.len() as f64).sqrt();
            let lr_t = lr / rms.max(1.0);
            let p = store.get_mut(id);
            for ((x, m), v) in p.data_mut().iter_mut().zip(st.m.data()).zip(st.v.data()) {
                let update = (m / bc1) / ((v / bc2).sqrt() + c.eps);
                *x -= lr_t * (update + c.weight_decay * *x);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: Vec<f64>) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let n = v.len();
        let id = s.add("x", Tensor::new(vec![n], v));
        (s, id)
    }

    #[test]
    fn first_step_moves_by_lr_in_sign_direction() {
        let (mut s, id) = one_param(vec![1.0, -2.0]);
        let mut g = Gradients::with_len(1);
        g.accumulate(id, &Tensor::new(vec![2], vec![0.3, -5.0]));
        let mut opt = StableAdamW::new(OptimizerConfig { weight_decay: 0.0, ..Default::default() });
        opt.step(&mut s, &g, &[id], 0.1);
        // m_hat = g, v_hat = g^2, ratio = 1 so no clipping
        let x = s.get(id).data();
        assert!((x[0] - 0.9).abs() < 1e-6 && (x[1] + 1.9).abs() < 1e-6, "{x:?}");
    }

    #[test]
    fn spike_is_clipped() {
        let (mut s, id) = one_param(vec![0.0]);
        let mut opt = StableAdamW::new(OptimizerConfig { weight_decay: 0.0, ..Default::default() });
        for _ in 0..50 {
            let mut g = Gradients::with_len(1);
            g.accumulate(id, &Tensor::new(vec![1], vec![1e-3]));
            opt.step(&mut s, &g, &[id], 0.01);
        }
        let before = s.get(id).data()[0];
        let mut g = Gradients::with_len(1);
        g.accumulate(id, &Tensor::new(vec![1], vec![1e3]));
        opt.step(&mut s, &g, &[id], 0.01);
        let moved = (s.get(id).data()[0] - before).abs();
        assert!(moved <= 0.01 + 1e-12, "{moved}");
    }

    #[test]
    fn missing_gradient_leaves_parameter_alone() {
        let (mut s, id) = one_param(vec![1.0]);
        let other = s.add("y", Tensor::new(vec![1], vec![2.0]));
        let mut g = Gradients::with_len(2);
        g.accumulate(id, &Tensor::new(vec![1], vec![1.0]));
        let mut opt = StableAdamW::new(OptimizerConfig::default());
        opt.step(&mut s, &g, &[id, other], 0.1);
        assert_eq!(s.get(other).data(), &[2.0]);
        assert_ne!(s.get(id).data(), &[1.0]);
    }

    #[test]
    fn weight_decay_shrinks_at_zero_gradient() {
        let (mut s, id) = one_param(vec![1.0]);
        let mut g = Gradients::with_len(1);
        g.accumulate(id, &Tensor::new(vec![1], vec![0.0]));
        let mut opt = StableAdamW::new(OptimizerConfig { weight_decay: 0.5, ..Default::default() });
        opt.step(&mut s, &g, &[id], 0.1);
        assert!((s.get(id).data()[0] - 0.95).abs() < 1e-12);
    }
}
