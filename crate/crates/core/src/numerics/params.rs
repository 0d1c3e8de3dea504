//! Named parameter store. Names are dotted paths; iteration order is the
//! BTreeMap order, so checkpoints and hashes are reproducible.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

#[derive(Clone)]
pub struct Parameter {
    pub tensor: Tensor,
    pub trainable: bool,
    pub grad: Option<Tensor>,
}

#[derive(Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Parameter>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    /// Registers a tensor under a unique name.
    pub fn insert(&mut self, name: &str, tensor: Tensor, trainable: bool) {
        let prev = self.params.insert(
            name.to_string(),
            Parameter { tensor, trainable, grad: None },
        );
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn tensor(&self, name: &str) -> &Tensor {
        &self.params.get(name).unwrap_or_else(|| panic!("unknown parameter {name}")).tensor
    }

    pub fn set_tensor(&mut self, name: &str, t: Tensor) {
        let p = self.params.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(p.tensor.shape(), t.shape(), "shape change for {name}");
        p.tensor = t;
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) {
        self.params.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}")).trainable =
            trainable;
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value_count(&self) -> usize {
        self.params.values().map(|p| p.tensor.len()).sum()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    pub fn accumulate_grad(&mut self, name: &str, g: &Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if p.tensor.shape() != g.shape() {
            return Err(Error::ShapeMismatch(format!(
                "grad for {name}: {:?} vs {:?}",
                g.shape(),
                p.tensor.shape()
            )));
        }
        match &mut p.grad {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
        Ok(())
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).and_then(|p| p.grad.as_ref())
    }

    /// SHA-256 over one parameter's raw little-endian bytes.
    pub fn hash_of(&self, name: &str) -> String {
        let mut h = Sha256::new();
        for v in self.tensor(name).data() {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// SHA-256 over every parameter in name order (names included), so any
    /// value or layout change alters the digest.
    pub fn hash_all(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in &self.params {
            h.update(name.as_bytes());
            h.update([0u8]);
            for &d in p.tensor.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Hashes of a subset of parameters, keyed by name.
    pub fn hashes(&self, names: &[String]) -> BTreeMap<String, String> {
        names.iter().map(|n| (n.clone(), self.hash_of(n))).collect()
    }
}
