//! Named parameters with gradient slots, trainability flags and layer tags.

use std::collections::BTreeSet;

use sha2::{Digest, Sha256};

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter<F: Real = f64> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
    pub trainable: bool,
    /// Transformer block this parameter belongs to; `None` for embeddings and the head.
    pub layer_id: Option<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<F: Real = f64> {
    params: Vec<Parameter<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<F>, layer_id: Option<usize>, trainable: bool) -> ParamId {
        let grad = Tensor::zeros(value.shape().to_vec());
        self.params.push(Parameter { name: name.into(), value, grad, trainable, layer_id });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<F> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<F>> {
        self.params.iter_mut()
    }

    /// Distinct layer tags present in the store.
    pub fn layer_ids(&self) -> BTreeSet<usize> {
        self.params.iter().filter_map(|p| p.layer_id).collect()
    }

    /// Set `trainable = flag` on every parameter tagged with one of `layer_ids`.
    pub fn set_trainable(&mut self, layer_ids: &BTreeSet<usize>, flag: bool) -> Result<()> {
        let known = self.layer_ids();
        if let Some(&bad) = layer_ids.iter().find(|id| !known.contains(id)) {
            return Err(Error::UnknownLayer(bad));
        }
        for p in &mut self.params {
            if p.layer_id.is_some_and(|l| layer_ids.contains(&l)) {
                p.trainable = flag;
            }
        }
        Ok(())
    }

    pub fn set_all_trainable(&mut self, flag: bool) {
        self.params.iter_mut().for_each(|p| p.trainable = flag);
    }

    pub fn trainable_flags(&self) -> Vec<bool> {
        self.params.iter().map(|p| p.trainable).collect()
    }

    pub fn restore_trainable_flags(&mut self, flags: &[bool]) {
        assert_eq!(flags.len(), self.params.len());
        for (p, &f) in self.params.iter_mut().zip(flags) {
            p.trainable = f;
        }
    }

    /// `grad += g` for every trainable parameter reached by the graph.
    pub fn accumulate(&mut self, grads: &Gradients<F>) {
        for (id, g) in grads.params() {
            let p = &mut self.params[id.0];
            if p.trainable {
                p.grad.add_assign(g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad.fill(F::zero()));
    }

    /// Exact number of scalar entries with `trainable == true`.
    pub fn count_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    /// SHA-256 over names, shapes and little-endian values of every parameter.
    pub fn digest(&self) -> String {
        self.digest_where(|_| true)
    }

    pub fn digest_where(&self, keep: impl Fn(&Parameter<F>) -> bool) -> String {
        let mut hasher = Sha256::new();
        let mut buf = Vec::new();
        for p in self.params.iter().filter(|p| keep(p)) {
            hasher.update(p.name.as_bytes());
            for &d in p.value.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            buf.clear();
            for &x in p.value.data() {
                x.write_le(&mut buf);
            }
            hasher.update(&buf);
        }
        hex::encode(hasher.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(layers: usize) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.push("emb", Tensor::zeros([4, 2]), None, false);
        for l in 0..layers {
            s.push(format!("l{l}.w"), Tensor::zeros([2, 2]), Some(l), false);
            s.push(format!("l{l}.g"), Tensor::zeros([2]), Some(l), false);
        }
        s
    }

    #[test]
    fn all_ids_make_everything_layered_trainable() {
        let mut s = store(3);
        s.set_trainable(&(0..3).collect(), true).unwrap();
        assert!(s.iter().filter(|(_, p)| p.layer_id.is_some()).all(|(_, p)| p.trainable));
        assert!(!s.get(ParamId(0)).trainable);
    }

    #[test]
    fn first_chunk_of_24_layers() {
        let mut s = store(24);
        s.set_trainable(&(0..8).collect(), true).unwrap();
        let trainable_layers: BTreeSet<_> = s.iter().filter(|(_, p)| p.trainable).filter_map(|(_, p)| p.layer_id).collect();
        assert_eq!(trainable_layers, (0..8).collect());
        let frozen_layers: BTreeSet<_> = s.iter().filter(|(_, p)| !p.trainable).filter_map(|(_, p)| p.layer_id).collect();
        assert_eq!(frozen_layers.len(), 16);
        assert_eq!(s.count_trainable(), 8 * 6);
    }

    #[test]
    fn toggle_restores_frozen_state() {
        let mut s = store(4);
        let before = s.trainable_flags();
        let ids = (0..4).collect();
        s.set_trainable(&ids, true).unwrap();
        s.set_trainable(&ids, false).unwrap();
        assert_eq!(s.trainable_flags(), before);
    }

    #[test]
    fn unknown_layer_rejected() {
        let mut s = store(2);
        assert!(matches!(s.set_trainable(&[5].into(), true), Err(Error::UnknownLayer(5))));
    }
}
