//! Named parameter storage and its binding onto a tape.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Parameters keyed by canonical dotted names (`encoder.tok_emb`, `fusion.w_c`, ...).
/// Iteration order is the lexicographic name order everywhere.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Overwrites one scalar entry in place.
    pub fn set_entry(&mut self, name: &str, index: usize, value: f64) -> Result<()> {
        let t = self.get_mut(name)?;
        let slot = t
            .values_mut()
            .get_mut(index)
            .ok_or_else(|| Error::Contract(format!("{name}[{index}] out of range")))?;
        *slot = value;
        Ok(())
    }

    /// Places every parameter on `tape`. Those for which `trainable` returns
    /// true are tracked for gradients; the rest enter as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone(), trainable(name))))
            .collect();
        BoundParams { vars }
    }
}

/// Tape handles for a [`ParamStore`] bound by [`ParamStore::bind`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    /// Collects gradients after a backward pass; parameters that received no
    /// gradient (frozen or unused) get zeros.
    pub fn gradients(&self, tape: &Tape) -> Gradients {
        let map = self
            .vars
            .iter()
            .map(|(name, &v)| {
                let g = tape
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()));
                (name.clone(), g)
            })
            .collect();
        Gradients { map }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    map: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamStore) -> Self {
        let map = params
            .iter()
            .map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape())))
            .collect();
        Gradients { map }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// `self += other * weight`.
    pub fn add_scaled(&mut self, other: &Gradients, weight: f64) {
        for (name, g) in self.map.iter_mut() {
            if let Some(o) = other.map.get(name) {
                for (a, b) in g.values_mut().iter_mut().zip(o.values()) {
                    *a += b * weight;
                }
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.map.values().all(Tensor::is_finite)
    }
}
