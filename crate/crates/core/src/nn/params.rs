//! Named parameters, Adam moments and the on-disk weight format.
//!
//! On disk a store is a JSON manifest (`name -> shape, dtype, byte offset`)
//! next to a raw little-endian `f32` blob.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::array::{Array, Real};
use super::graph::{Gradients, Graph, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    value: Array<T>,
    m: Array<T>,
    v: Array<T>,
    trainable: bool,
}

#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    index: HashMap<String, usize>,
    pub seed: u64,
    step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Parameters bound into one graph, so gradients can be collected by name.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: Vec<Option<Var>>,
    by_name: HashMap<String, Var>,
}

impl Bound {
    /// Bindings from explicit handles, e.g. gradient-check leaves.
    pub fn from_named(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self { vars: Vec::new(), by_name: vars.into_iter().collect() }
    }

    /// Trainable leaf of store entry `idx`.
    pub fn get(&self, idx: usize) -> Option<Var> {
        self.vars.get(idx).copied().flatten()
    }

    /// Handle for `name`; buffers are bound as constants.
    pub fn var(&self, name: &str) -> Result<Var> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct WeightEntry {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub trainable: bool,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct WeightManifest {
    pub seed: u64,
    pub tensors: BTreeMap<String, WeightEntry>,
}

impl<T: Real> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self { entries: Vec::new(), index: HashMap::new(), seed, step: 0 }
    }

    fn insert(&mut self, name: &str, value: Array<T>, trainable: bool) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let shape = value.shape().to_vec();
        self.entries.push(Entry {
            name: name.to_string(),
            m: Array::zeros(&shape),
            v: Array::zeros(&shape),
            value,
            trainable,
        });
        self.index.insert(name.to_string(), self.entries.len() - 1);
        Ok(self.entries.len() - 1)
    }

    /// Registers a learned parameter.
    pub fn add(&mut self, name: &str, value: Array<T>) -> Result<usize> {
        self.insert(name, value, true)
    }

    /// Registers a buffer that is saved with the weights but never updated by the optimiser.
    pub fn add_buffer(&mut self, name: &str, value: Array<T>) -> Result<usize> {
        self.insert(name, value, false)
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Array<T>> {
        self.id(name).map(|i| &self.entries[i].value)
    }

    pub fn value(&self, id: usize) -> &Array<T> {
        &self.entries[id].value
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Array<T> {
        &mut self.entries[id].value
    }

    pub fn set(&mut self, name: &str, value: Array<T>) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if self.entries[id].value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "{name}: {:?} vs {:?}",
                self.entries[id].value.shape(),
                value.shape()
            )));
        }
        self.entries[id].value = value;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_trainable(&self, id: usize) -> bool {
        self.entries[id].trainable
    }

    /// Total number of learned scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Copies every parameter into `g`: trainable ones as gradient-carrying
    /// leaves, buffers as constants.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        let mut by_name = HashMap::with_capacity(self.entries.len());
        let vars = self
            .entries
            .iter()
            .map(|e| {
                let v = if e.trainable { g.param(e.value.clone()) } else { g.constant(e.value.clone()) };
                by_name.insert(e.name.clone(), v);
                e.trainable.then_some(v)
            })
            .collect();
        Bound { vars, by_name }
    }

    /// Gradients of the bound parameters, in store order.
    pub fn collect(&self, bound: &Bound, grads: &mut Gradients<T>) -> Vec<Option<Array<T>>> {
        (0..self.entries.len())
            .map(|i| bound.get(i).and_then(|v| grads.take(v)))
            .collect()
    }

    /// One Adam update. L2 regularisation is added to the gradient before the
    /// moment updates; entries with no gradient are left untouched.
    pub fn adam_step(&mut self, grads: &[Option<Array<T>>], cfg: &AdamConfig) -> Result<()> {
        if grads.len() != self.entries.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.entries.len()
            )));
        }
        for (e, g) in self.entries.iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != e.value.shape() {
                    return Err(Error::Shape(format!(
                        "gradient for {} has shape {:?}, parameter {:?}",
                        e.name,
                        g.shape(),
                        e.value.shape()
                    )));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let lr = T::lit(cfg.lr);
        let eps = T::lit(cfg.eps);
        let wd = T::lit(cfg.weight_decay);
        for (e, g) in self.entries.iter_mut().zip(grads) {
            let Some(g) = g else { continue };
            if !e.trainable {
                continue;
            }
            let p = e.value.data_mut();
            let m = e.m.data_mut();
            let v = e.v.data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i] + wd * p[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Writes `<stem>.json` style manifest and weight blob.
    pub fn save(&self, manifest_path: &Path, blob_path: &Path) -> Result<()> {
        let (manifest, blob) = self.to_bytes();
        fs::write(manifest_path, serde_json::to_vec_pretty(&manifest)?)
            .map_err(|e| Error::io(manifest_path, e))?;
        fs::write(blob_path, blob).map_err(|e| Error::io(blob_path, e))
    }

    pub fn to_bytes(&self) -> (WeightManifest, Vec<u8>) {
        let mut blob = Vec::new();
        let mut tensors = BTreeMap::new();
        for e in &self.entries {
            tensors.insert(
                e.name.clone(),
                WeightEntry {
                    shape: e.value.shape().to_vec(),
                    dtype: "f32".into(),
                    offset: blob.len(),
                    trainable: e.trainable,
                },
            );
            for &x in e.value.data() {
                blob.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
            }
        }
        (WeightManifest { seed: self.seed, tensors }, blob)
    }

    /// Overwrites values of an already-shaped store from a manifest and blob.
    pub fn load_into(&mut self, manifest: &WeightManifest, blob: &[u8]) -> Result<()> {
        for e in &mut self.entries {
            let w = manifest
                .tensors
                .get(&e.name)
                .ok_or_else(|| Error::Config(format!("weights missing tensor {}", e.name)))?;
            if w.shape != e.value.shape() {
                return Err(Error::Shape(format!(
                    "{}: stored {:?}, model {:?}",
                    e.name,
                    w.shape,
                    e.value.shape()
                )));
            }
            let n = e.value.len();
            let bytes = blob
                .get(w.offset..w.offset + 4 * n)
                .ok_or_else(|| Error::Data(format!("weight blob truncated at {}", e.name)))?;
            for (dst, chunk) in e.value.data_mut().iter_mut().zip(bytes.chunks_exact(4)) {
                *dst = T::lit(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
            }
        }
        self.seed = manifest.seed;
        Ok(())
    }

    pub fn load(&mut self, manifest_path: &Path, blob_path: &Path) -> Result<()> {
        let text = fs::read(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let manifest: WeightManifest = serde_json::from_slice(&text)?;
        let blob = fs::read(blob_path).map_err(|e| Error::io(blob_path, e))?;
        self.load_into(&manifest, &blob)
    }

    /// Same names, shapes and values in another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    m: e.m.cast(),
                    v: e.v.cast(),
                    trainable: e.trainable,
                })
                .collect(),
            index: self.index.clone(),
            seed: self.seed,
            step: self.step,
        }
    }
}
