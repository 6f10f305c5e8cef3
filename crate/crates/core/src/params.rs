//! Named learnable tensors and their binding onto a per-pass tape.

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;

/// Ordered collection of named parameters. Insertion order is the
/// canonical order used for checkpoints and optimizer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "S: Serialize", deserialize = "S: Deserialize<'de>"))]
pub struct ParamStore<S = f64> {
    params: IndexMap<String, Tensor<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        ParamStore {
            params: IndexMap::new(),
        }
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<S>) {
        self.params.insert(name.into(), t);
    }

    /// Uniform initialisation in `[-bound, bound]` from the parameter's own
    /// seed stream, so a parameter's initial value depends only on
    /// `(seed, name, shape)` and not on which other parameters exist.
    pub fn insert_uniform(&mut self, seed: u64, name: &str, shape: &[usize], bound: f64) {
        let mut r = rng::stream(seed, &format!("init/{name}"));
        let n = shape.iter().product();
        let data = (0..n).map(|_| S::of(r.gen_range(-bound..=bound))).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("positive shape"));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.params.get_mut(name)
    }

    pub fn expect(&self, name: &str) -> Result<&Tensor<S>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<S>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalars across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// `(name, shape)` for every parameter, in canonical order.
    pub fn census(&self) -> Vec<(String, Vec<usize>)> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), v.shape().to_vec()))
            .collect()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// Gradients keyed by parameter name, in the store's canonical order.
pub type Grads<S = f64> = IndexMap<String, Tensor<S>>;

/// One forward pass: a fresh tape plus lazily bound parameter leaves.
pub struct Graph<'p, S: Scalar = f64> {
    pub tape: Tape<S>,
    store: &'p ParamStore<S>,
    bound: IndexMap<&'p str, Var>,
}

impl<'p, S: Scalar> Graph<'p, S> {
    pub fn new(store: &'p ParamStore<S>) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            bound: IndexMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore<S> {
        self.store
    }

    /// Leaf for parameter `name`, created on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let (key, t) = self
            .store
            .params
            .get_key_value(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
        if let Some(&v) = self.bound.get(key.as_str()) {
            return Ok(v);
        }
        let v = self.tape.leaf(t.clone());
        self.bound.insert(key.as_str(), v);
        Ok(v)
    }

    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.tape.constant(t)
    }

    pub fn zeros(&mut self, n: usize) -> Var {
        self.tape.constant(Tensor::zeros(&[n]))
    }

    /// Gradients of every bound parameter after `backward`; parameters that
    /// were not touched by this pass are absent.
    pub fn grads(&self) -> Grads<S> {
        self.bound
            .iter()
            .filter_map(|(k, &v)| self.tape.grad(v).map(|g| ((*k).to_owned(), g.clone())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_depends_only_on_seed_and_name() {
        let mut a = ParamStore::<f64>::new();
        a.insert_uniform(9, "x", &[3, 2], 0.5);
        a.insert_uniform(9, "y", &[4], 0.5);
        let mut b = ParamStore::<f64>::new();
        b.insert_uniform(9, "y", &[4], 0.5);
        assert_eq!(a.get("y"), b.get("y"));
        assert!(a.get("x").unwrap().data().iter().all(|v| v.abs() <= 0.5));
        assert_eq!(a.num_scalars(), 10);
    }

    #[test]
    fn binding_is_shared_within_a_pass() {
        let mut s = ParamStore::<f64>::new();
        s.insert("w", Tensor::scalar(2.0));
        let mut g = Graph::new(&s);
        let w1 = g.param("w").unwrap();
        let w2 = g.param("w").unwrap();
        assert_eq!(w1, w2);
        let y = g.tape.mul(w1, w2).unwrap();
        g.tape.backward(y).unwrap();
        assert_eq!(g.grads()["w"].item(), 4.0);
        assert!(g.param("missing").is_err());
    }
}
