//! Named trainable parameter storage.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Flat registry of every trainable array, addressed by [`ParamId`].
///
/// Names are dotted paths (`decoder.3.wq`, `head.conv.bias`); the first
/// segment identifies the component the array belongs to.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param { name, value });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(self.params[id.0].value.shape(), value.shape());
        self.params[id.0].value = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Ids whose component (first name segment) equals `component`.
    pub fn component_ids(&self, component: &str) -> Vec<ParamId> {
        self.ids()
            .filter(|&id| self.name(id).split('.').next() == Some(component))
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// SHA-256 over names, shapes and the exact bit patterns of the values
    /// of the selected parameters.
    pub fn checksum_of(&self, ids: &[ParamId]) -> String {
        let mut h = Sha256::new();
        for &id in ids {
            let p = &self.params[id.0];
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn checksum(&self) -> String {
        let ids: Vec<_> = self.ids().collect();
        self.checksum_of(&ids)
    }
}

/// Gradients keyed by parameter; `None` means no gradient reached it.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn with_len(n: usize) -> Self {
        Self { grads: vec![None; n] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(g),
            slot => *slot = Some(g.clone()),
        }
    }

    pub fn remove(&mut self, id: ParamId) {
        if let Some(slot) = self.grads.get_mut(id.0) {
            *slot = None;
        }
    }

    /// True when the parameter received no gradient or an all-zero one.
    pub fn is_zero(&self, id: ParamId) -> bool {
        self.get(id).is_none_or(|g| g.data().iter().all(|&v| v == 0.0))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(|(_, g)| g.all_finite())
    }
}

pub fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    if std == 0.0 {
        return Tensor::zeros(shape);
    }
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}

pub fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-bound..=bound)).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn checksum_tracks_bits() {
        let mut s = ParamStore::new();
        let a = s.add("a.w", Tensor::scalar(1.0));
        let before = s.checksum();
        s.set(a, Tensor::scalar(1.0 + f64::EPSILON));
        assert_ne!(before, s.checksum());
        s.set(a, Tensor::scalar(1.0));
        assert_eq!(before, s.checksum());
    }

    #[test]
    fn components_split_on_first_segment() {
        let mut s = ParamStore::new();
        s.add("head.conv.weight", Tensor::scalar(0.0));
        s.add("headroom", Tensor::scalar(0.0));
        s.add("decoder.0.wq", Tensor::scalar(0.0));
        assert_eq!(s.component_ids("head").len(), 1);
        assert_eq!(s.component_ids("decoder").len(), 1);
    }

    #[test]
    fn seeded_init_repeats() {
        let a = normal_tensor(&mut ChaCha8Rng::seed_from_u64(3), &[4, 4], 0.02);
        let b = normal_tensor(&mut ChaCha8Rng::seed_from_u64(3), &[4, 4], 0.02);
        assert_eq!(a, b);
    }
}
