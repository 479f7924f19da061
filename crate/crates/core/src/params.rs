//! Named parameter storage split into a frozen partition (Θ) and a trainable one (Φ).

use std::sync::Arc;

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Param {
    pub value: Arc<Tensor>,
    pub frozen: bool,
}

/// Parameters in registration order. That order is the canonical flattening order
/// used by Jacobians and checkpoints.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: impl Into<String>, value: Tensor, frozen: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Contract(format!(
                "parameter `{name}` registered twice"
            )));
        }
        self.entries.insert(
            name,
            Param {
                value: Arc::new(value),
                frozen,
            },
        );
        Ok(())
    }

    pub fn insert_frozen(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        self.insert(name, value, true)
    }

    pub fn insert_trainable(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        self.insert(name, value, false)
    }

    /// Moves every entry of `other` into `self`, keeping each entry's partition.
    pub fn extend(&mut self, other: ParamStore) -> Result<()> {
        for (name, p) in other.entries {
            let frozen = p.frozen;
            self.insert(name, Arc::unwrap_or_clone(p.value), frozen)?;
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| p.value.as_ref())
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    /// Mutable access for optimisers; frozen entries are refused.
    pub fn trainable_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.entries.get_mut(name) {
            Some(p) if !p.frozen => Ok(Arc::make_mut(&mut p.value)),
            Some(_) => Err(Error::Contract(format!("parameter `{name}` is frozen"))),
            None => Err(Error::Contract(format!("unknown parameter `{name}`"))),
        }
    }

    /// Overwrites a trainable tensor, keeping its shape.
    pub fn set_trainable(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self.trainable_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::dim("set_trainable", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(k, p)| (k, p.value.as_ref()))
    }

    pub fn frozen(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.iter()
            .filter(|(_, p)| p.frozen)
            .map(|(k, p)| (k, p.value.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.trainable().map(|(_, t)| t.len()).sum()
    }

    /// SHA-256 over names, shapes and little-endian payloads of the frozen partition.
    pub fn frozen_hash(&self) -> String {
        hash_entries(self.frozen())
    }

    pub fn trainable_hash(&self) -> String {
        hash_entries(self.trainable())
    }
}

fn hash_entries<'a>(entries: impl Iterator<Item = (&'a str, &'a Tensor)>) -> String {
    let mut h = Sha256::new();
    for (name, t) in entries {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((t.ndim() as u64).to_le_bytes());
        for &e in t.shape() {
            h.update((e as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partitions_are_disjoint_and_ordered() {
        let mut s = ParamStore::new();
        s.insert_frozen("a", Tensor::zeros(&[2])).unwrap();
        s.insert_trainable("b", Tensor::zeros(&[3])).unwrap();
        s.insert_frozen("c", Tensor::zeros(&[1])).unwrap();
        assert!(s.insert_trainable("a", Tensor::zeros(&[1])).is_err());
        let frozen: Vec<_> = s.frozen().map(|(n, _)| n).collect();
        let trainable: Vec<_> = s.trainable().map(|(n, _)| n).collect();
        assert_eq!(frozen, ["a", "c"]);
        assert_eq!(trainable, ["b"]);
        assert_eq!(s.num_trainable_scalars(), 3);
    }

    #[test]
    fn frozen_entries_cannot_be_mutated() {
        let mut s = ParamStore::new();
        s.insert_frozen("w", Tensor::ones(&[2])).unwrap();
        let before = s.frozen_hash();
        assert!(s.trainable_mut("w").is_err());
        assert_eq!(before, s.frozen_hash());
    }

    #[test]
    fn hash_tracks_content() {
        let mut s = ParamStore::new();
        s.insert_trainable("w", Tensor::ones(&[2])).unwrap();
        let h0 = s.trainable_hash();
        s.trainable_mut("w").unwrap().data_mut()[0] = 2.0;
        assert_ne!(h0, s.trainable_hash());
    }
}
