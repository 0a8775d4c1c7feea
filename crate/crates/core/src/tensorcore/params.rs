use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use super::{Tensor, TensorError};

/// A named tensor with its trainable flag.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub tensor: Tensor<f32>,
    pub trainable: bool,
}

/// Registry of named parameters, iterated in lexicographic name order.
///
/// Every mutation bumps `version`, which lets callers cache derived state
/// (digests, cast copies) safely.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
    version: u64,
}

/// Equal when the entries match; `version` is ignored.
impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor<f32>,
        trainable: bool,
    ) -> Result<(), TensorError> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        self.entries.insert(name, Param { tensor, trainable });
        self.version += 1;
        Ok(())
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        let p = self.entries.remove(name);
        if p.is_some() {
            self.version += 1;
        }
        p
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<f32>, TensorError> {
        self.entries
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<f32>, TensorError> {
        self.version += 1;
        self.entries
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    /// Overwrites the data of an existing entry, keeping its shape.
    pub fn set_data(&mut self, name: &str, data: &[f32]) -> Result<(), TensorError> {
        let t = self.tensor_mut(name)?;
        if t.numel() != data.len() {
            return Err(TensorError::Dimension {
                op: "set_data",
                lhs: t.shape().to_vec(),
                rhs: vec![data.len()],
            });
        }
        t.data_mut().copy_from_slice(data);
        Ok(())
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|p| p.trainable)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<(), TensorError> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        p.trainable = trainable;
        self.version += 1;
        Ok(())
    }

    /// Sets the trainable flag of every entry to `pred(name)`.
    pub fn set_trainable_where(&mut self, pred: impl Fn(&str) -> bool) {
        for (name, p) in &mut self.entries {
            p.trainable = pred(name);
        }
        self.version += 1;
    }

    pub fn freeze_all(&mut self) {
        self.set_trainable_where(|_| false);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.version += 1;
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total scalar count across all entries.
    pub fn num_params(&self) -> usize {
        self.entries.values().map(|p| p.tensor.numel()).sum()
    }

    pub fn num_trainable(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn clear_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.tensor.clear_grad();
        }
    }

    /// SHA-256 of each tensor's shape and raw little-endian bytes.
    pub fn tensor_digests(&self) -> BTreeMap<String, [u8; 32]> {
        self.entries
            .iter()
            .map(|(k, p)| (k.clone(), tensor_digest(&p.tensor)))
            .collect()
    }

    /// Digest over names and bytes of entries selected by `filter`.
    pub fn digest_where(&self, filter: impl Fn(&str) -> bool) -> [u8; 32] {
        let mut h = Sha256::new();
        for (k, p) in &self.entries {
            if !filter(k) {
                continue;
            }
            h.update((k.len() as u64).to_le_bytes());
            h.update(k.as_bytes());
            h.update(tensor_digest(&p.tensor));
        }
        h.finalize().into()
    }

    pub fn digest(&self) -> [u8; 32] {
        self.digest_where(|_| true)
    }

    /// Moves every entry of `other` into `self`; names must not collide.
    pub fn merge(&mut self, other: ParamStore) -> Result<(), TensorError> {
        for (k, p) in other.entries {
            self.insert(k, p.tensor, p.trainable)?;
        }
        Ok(())
    }

    /// Entries whose name starts with `prefix`, as a new store.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (k, p) in &self.entries {
            if k.starts_with(prefix) {
                out.entries.insert(k.clone(), p.clone());
            }
        }
        out.version = 1;
        out
    }

    /// Names present in exactly one of the two stores: `(missing from self, extra in self)`.
    pub fn name_diff(&self, expected: &ParamStore) -> (Vec<String>, Vec<String>) {
        let missing = expected
            .names()
            .filter(|n| !self.contains(n))
            .map(str::to_string)
            .collect();
        let extra = self
            .names()
            .filter(|n| !expected.contains(n))
            .map(str::to_string)
            .collect();
        (missing, extra)
    }
}

fn tensor_digest(t: &Tensor<f32>) -> [u8; 32] {
    let mut h = Sha256::new();
    for d in t.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    h.update(t.to_le_bytes());
    h.finalize().into()
}
