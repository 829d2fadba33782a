use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named tensors in a fixed (lexicographic) order.
///
/// Used both for learnable weights and for their gradients; iteration order
/// is deterministic so accumulation and serialization are reproducible.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    map: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Params::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing tensor `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.map.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn zeros_like(&self) -> Params {
        Params {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), v.zeros_like()))
                .collect(),
        }
    }

    /// Adds `g` into the gradient slot `name`, creating it when absent.
    pub fn accumulate(&mut self, name: &str, g: &Tensor) {
        match self.map.get_mut(name) {
            Some(t) => t.add_assign(g),
            None => {
                self.map.insert(name.to_string(), g.clone());
            }
        }
    }

    /// Adds every tensor of `other` into `self`.
    pub fn accumulate_all(&mut self, other: &Params) {
        for (k, v) in &other.map {
            self.accumulate(k, v);
        }
    }

    pub fn scale_all(&mut self, alpha: f64) {
        for t in self.map.values_mut() {
            for v in t.data_mut() {
                *v *= alpha;
            }
        }
    }

    /// Subset of tensors whose names start with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> Params {
        Params {
            map: self
                .map
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.map {
            h.update(k.as_bytes());
            for &d in v.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &x in v.data() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

type StoreBackwardFn = dyn Fn(&Tensor, &mut Params) -> Vec<Tensor> + Send + Sync;

/// Forward output of a composite block whose weights live in a [`Params`]
/// store. The backward accumulates weight gradients into the supplied store
/// (under the same names) and returns gradients for the block's explicit
/// inputs.
pub struct StorePass {
    pub output: Tensor,
    backward: Box<StoreBackwardFn>,
}

impl StorePass {
    pub fn new(
        output: Tensor,
        backward: impl Fn(&Tensor, &mut Params) -> Vec<Tensor> + Send + Sync + 'static,
    ) -> Self {
        StorePass {
            output,
            backward: Box::new(backward),
        }
    }

    pub fn backward(&self, upstream: &Tensor, grads: &mut Params) -> Vec<Tensor> {
        (self.backward)(upstream, grads)
    }
}

impl std::fmt::Debug for StorePass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StorePass")
            .field("output", &self.output)
            .finish_non_exhaustive()
    }
}
