use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Suffixes of non-trainable buffers (batch-norm running statistics).
const BUFFER_SUFFIXES: [&str; 2] = [".running_mean", ".running_var"];

/// Named tensors keyed by dot-separated path, iterated lexicographically.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
    grads: BTreeMap<String, Tensor<T>>,
    buffers: BTreeSet<String>,
    version: u64,
}

/// One record of `manifest.json`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: usize,
    pub byte_len: usize,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            grads: BTreeMap::new(),
            buffers: BTreeSet::new(),
            version: 0,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name.split('.').any(str::is_empty) {
            return Err(Error::Contract(format!("invalid parameter name `{name}`")));
        }
        if self.params.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        if BUFFER_SUFFIXES.iter().any(|s| name.ends_with(s)) {
            self.buffers.insert(name.clone());
        }
        self.params.insert(name, t);
        Ok(())
    }

    /// Replaces the value of an existing entry, keeping its shape.
    pub fn set(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))?;
        if slot.shape() != t.shape() {
            return Err(Error::shape("ParamStore::set", slot.shape(), t.shape()));
        }
        *slot = t;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.params.contains_key(name) && !self.buffers.contains(name)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .keys()
            .filter(|k| !self.buffers.contains(*k))
            .cloned()
            .collect()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn bump_version(&mut self) {
        self.version += 1;
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    pub(crate) fn ensure_grads(&mut self) {
        for (name, t) in &self.params {
            if !self.buffers.contains(name) && !self.grads.contains_key(name) {
                self.grads.insert(name.clone(), Tensor::zeros(t.shape()));
            }
        }
    }

    pub(crate) fn accumulate_grad(&mut self, name: &str, g: &[T]) -> Result<()> {
        let shape = self
            .params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter `{name}`")))?
            .shape()
            .to_vec();
        let slot = self.grads.entry(name.to_string()).or_insert_with(|| Tensor::zeros(&shape));
        for (s, &v) in slot.data_mut().iter_mut().zip(g) {
            *s += v;
        }
        Ok(())
    }

    /// Copies every entry whose name starts with `prefix` into a new store.
    pub fn subset(&self, prefix: &str) -> Self {
        let mut out = Self::new();
        for (k, v) in &self.params {
            if k.starts_with(prefix) {
                out.insert(k.clone(), v.clone()).expect("names already valid");
            }
        }
        out
    }

    /// Copies all entries of `other` into `self`, failing on collisions.
    pub fn merge(&mut self, other: &Self) -> Result<()> {
        for (k, v) in &other.params {
            self.insert(k.clone(), v.clone())?;
        }
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (k, v) in &self.params {
            out.insert(k.clone(), v.cast()).expect("names already valid");
        }
        out
    }

    /// Writes `manifest.json` and `weights.bin` into `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut bytes = Vec::with_capacity(self.num_elements() * T::BYTES);
        let mut manifest = Vec::with_capacity(self.params.len());
        for (name, t) in &self.params {
            let offset = bytes.len();
            for &v in t.data() {
                v.write_le(&mut bytes);
            }
            manifest.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: T::DTYPE.to_string(),
                byte_offset: offset,
                byte_len: bytes.len() - offset,
            });
        }
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        fs::write(dir.join("weights.bin"), bytes)?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let manifest: Vec<ManifestEntry> = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        let bytes = fs::read(dir.join("weights.bin"))?;
        let mut store = Self::new();
        for e in manifest {
            if e.dtype != T::DTYPE {
                return Err(Error::Format(format!(
                    "parameter `{}` stored as {} but loading as {}",
                    e.name,
                    e.dtype,
                    T::DTYPE
                )));
            }
            let numel: usize = e.shape.iter().product();
            if e.byte_len != numel * T::BYTES || e.byte_offset + e.byte_len > bytes.len() {
                return Err(Error::Format(format!("bad byte range for `{}`", e.name)));
            }
            let data = bytes[e.byte_offset..e.byte_offset + e.byte_len]
                .chunks_exact(T::BYTES)
                .map(T::read_le)
                .collect();
            store.insert(e.name, Tensor::new(e.shape, data)?)?;
        }
        Ok(store)
    }
}
