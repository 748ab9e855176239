use crate::autodiff::{Gradients, Graph};
use crate::tensor::Tensor;
use rand::Rng;
use std::collections::HashMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of model parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a trainable tensor. Panics on duplicate names (a construction bug).
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    /// Uniform `±1/sqrt(fan_in)` initialization.
    pub fn add_uniform(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound));
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn count(&self) -> usize {
        self.tensors.iter().filter(|t| t.requires_grad).map(Tensor::numel).sum()
    }

    /// Parameter counts grouped by the first `depth` dot-separated name
    /// segments, in first-appearance order.
    pub fn breakdown(&self, depth: usize) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for (name, t) in self.iter() {
            let key = name.split('.').take(depth).collect::<Vec<_>>().join(".");
            match out.iter_mut().find(|(k, _)| *k == key) {
                Some((_, n)) => *n += t.numel(),
                None => out.push((key, t.numel())),
            }
        }
        out
    }

    /// Copies gradients of the bound leaves of `graph` into the store.
    pub fn collect_grads(&mut self, graph: &Graph, grads: &mut Gradients) {
        for (t, &v) in self.tensors.iter_mut().zip(graph.param_vars()) {
            t.grad = if t.requires_grad {
                Some(grads.take(v).unwrap_or_else(|| vec![0.0; t.numel()]))
            } else {
                None
            };
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_breakdown() {
        let mut s = ParamStore::new();
        s.add("enc.conv.weight", Tensor::zeros(&[16, 16, 1, 1]));
        s.add("enc.conv.bias", Tensor::zeros(&[16]));
        s.add("dec.dw.weight", Tensor::zeros(&[16, 1, 3, 3]));
        s.add("dec.dw.bias", Tensor::zeros(&[16]));
        assert_eq!(s.count(), 272 + 160);
        assert_eq!(s.breakdown(1), vec![("enc".to_string(), 272), ("dec".to_string(), 160)]);
        assert_eq!(s.id("dec.dw.bias").map(|i| s.name(i)), Some("dec.dw.bias"));
    }
}
