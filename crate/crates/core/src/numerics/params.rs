//! Named parameter storage and the graph that binds parameters onto a tape.

use std::collections::{BTreeMap, HashMap};

use sha2::{Digest, Sha256};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named parameter tensors, ordered by name.
///
/// Names are dotted paths (`enc.t.layer0.attn.wq.w`); a parameter group is
/// a name prefix.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a Tensor)> + 'a {
        self.tensors
            .iter()
            .filter(move |(name, _)| has_prefix(name, prefix))
    }

    /// Removes every parameter under `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.tensors.retain(|name, _| !has_prefix(name, prefix));
    }

    /// SHA-256 over names, shapes and exact bit patterns of every parameter
    /// under `prefix`.
    pub fn digest(&self, prefix: &str) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in self.with_prefix(prefix) {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }
}

/// `true` if `name` equals `prefix` or lies under it as a dotted path.
pub fn has_prefix(name: &str, prefix: &str) -> bool {
    prefix.is_empty()
        || name == prefix
        || (name.starts_with(prefix) && name.as_bytes().get(prefix.len()) == Some(&b'.'))
}

/// Which parameters receive gradients during a forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Trainable {
    None,
    All,
    Prefixes(Vec<String>),
}

impl Trainable {
    pub fn includes(&self, name: &str) -> bool {
        match self {
            Trainable::None => false,
            Trainable::All => true,
            Trainable::Prefixes(ps) => ps.iter().any(|p| has_prefix(name, p)),
        }
    }
}

/// One forward pass: a tape plus the binding from parameter names to tape
/// leaves.
///
/// Each parameter is bound at most once per graph, so a layer applied to
/// several inputs accumulates all of its gradient contributions.
pub struct Graph<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    trainable: Trainable,
    bound: HashMap<String, Var>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore, trainable: Trainable) -> Self {
        Self {
            tape: Tape::new(),
            store,
            trainable,
            bound: HashMap::new(),
        }
    }

    /// Inference-only graph: every parameter is a constant.
    pub fn frozen(store: &'s ParamStore) -> Self {
        Self::new(store, Trainable::None)
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let t = self.store.get(name)?.clone();
        let v = self.tape.leaf(t, self.trainable.includes(name));
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Trainable parameters bound in this graph, sorted by name.
    pub fn trainable_bindings(&self) -> Vec<(String, Var)> {
        let mut out: Vec<(String, Var)> = self
            .bound
            .iter()
            .filter(|(name, _)| self.trainable.includes(name))
            .map(|(n, v)| (n.clone(), *v))
            .collect();
        out.sort();
        out
    }

    /// Runs backward from `loss` and returns `(name, gradient)` for every
    /// trainable parameter bound in this graph.
    pub fn param_grads(&self, loss: Var) -> Result<Vec<(String, Tensor)>> {
        let grads: Gradients = self.tape.backward(loss)?;
        Ok(self
            .trainable_bindings()
            .into_iter()
            .map(|(name, v)| (name, grads.get_or_zero(v)))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefix_matching_respects_path_boundaries() {
        assert!(has_prefix("enc.t.w", "enc.t"));
        assert!(has_prefix("enc.t", "enc.t"));
        assert!(!has_prefix("enc.tx.w", "enc.t"));
        assert!(has_prefix("anything", ""));
    }

    #[test]
    fn digest_changes_with_any_bit() {
        let mut s = ParamStore::new();
        s.insert("a.w", Tensor::vector(vec![1.0, 2.0]).unwrap());
        s.insert("b.w", Tensor::vector(vec![3.0]).unwrap());
        let d0 = s.digest("a");
        let db = s.digest("b");
        s.get_mut("b.w").unwrap().data_mut()[0] = 3.5;
        assert_eq!(s.digest("a"), d0);
        assert_ne!(s.digest("b"), db);
        s.get_mut("a.w").unwrap().data_mut()[1] = f64::from_bits(2f64.to_bits() + 1);
        assert_ne!(s.digest("a"), d0);
    }

    #[test]
    fn graph_binds_each_param_once() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(vec![2.0]).unwrap());
        let mut g = Graph::new(&s, Trainable::All);
        let a = g.param("w").unwrap();
        let b = g.param("w").unwrap();
        assert_eq!(a, b);
        let p = g.tape.mul(a, b).unwrap();
        let l = g.tape.sum(p).unwrap();
        let grads = g.param_grads(l).unwrap();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[0].1.data(), &[4.0]);
    }

    #[test]
    fn frozen_graph_reports_no_trainables() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(vec![2.0]).unwrap());
        let mut g = Graph::frozen(&s);
        let w = g.param("w").unwrap();
        let l = g.tape.sum(w).unwrap();
        assert!(g.param_grads(l).unwrap().is_empty());
    }
}
