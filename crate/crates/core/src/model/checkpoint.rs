//! Trained model on disk: `manifest.json` plus a `weights.bin` blob.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::Network;
use super::{ModelConfig, ZScore};
use crate::error::{Error, Result};
use crate::nn::{Array, Graph, Mode, ParamStore, WeightManifest};
use crate::util::config_hash;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub config_hash: String,
    /// Sorted, unique.
    pub labels: Vec<String>,
    pub n_features: usize,
    pub frames: usize,
    pub zscore: ZScore,
    pub best_val_macro_f1: f64,
    pub seed: u64,
    pub store: ParamStore<f32>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    tool_version: String,
    config_hash: String,
    model: ModelConfig,
    labels: Vec<String>,
    n_features: usize,
    frames: usize,
    zscore: ZScore,
    best_val_macro_f1: f64,
    seed: u64,
    weights: WeightManifest,
}

pub fn model_hash(model: &ModelConfig) -> Result<String> {
    config_hash(model)
}

impl Checkpoint {
    pub fn network(&self) -> Result<Network<f32>> {
        Network::new(self.model.clone(), self.n_features, self.frames, self.labels.len())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (weights, blob) = self.store.to_bytes();
        let manifest = CheckpointManifest {
            tool_version: crate::VERSION.to_string(),
            config_hash: self.config_hash.clone(),
            model: self.model.clone(),
            labels: self.labels.clone(),
            n_features: self.n_features,
            frames: self.frames,
            zscore: self.zscore.clone(),
            best_val_macro_f1: self.best_val_macro_f1,
            seed: self.seed,
            weights,
        };
        let mp = dir.join(MANIFEST_FILE);
        std::fs::write(&mp, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&mp, e))?;
        let wp = dir.join(WEIGHTS_FILE);
        std::fs::write(&wp, blob).map_err(|e| Error::io(&wp, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mp = dir.join(MANIFEST_FILE);
        let text = std::fs::read(&mp).map_err(|e| Error::io(&mp, e))?;
        let m: CheckpointManifest = serde_json::from_slice(&text)?;
        if model_hash(&m.model)? != m.config_hash {
            return Err(Error::Config(format!("{}: model configuration does not match its hash", mp.display())));
        }
        if m.zscore.mean.len() != m.n_features || m.zscore.std.len() != m.n_features {
            return Err(Error::Config(format!("{}: normalisation does not cover every channel", mp.display())));
        }
        let wp = dir.join(WEIGHTS_FILE);
        let blob = std::fs::read(&wp).map_err(|e| Error::io(&wp, e))?;
        let net = Network::<f32>::new(m.model.clone(), m.n_features, m.frames, m.labels.len())?;
        let mut store = ParamStore::new(m.seed);
        net.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(m.seed))?;
        store.load_into(&m.weights, &blob)?;
        Ok(Self {
            model: m.model,
            config_hash: m.config_hash,
            labels: m.labels,
            n_features: m.n_features,
            frames: m.frames,
            zscore: m.zscore,
            best_val_macro_f1: m.best_val_macro_f1,
            seed: m.seed,
            store,
        })
    }

    /// Masks and standardises a raw `[n_features, frames]` sample in place.
    pub fn prepare(&self, sample: &mut [f32]) -> Result<()> {
        prepare_sample(&self.model, &self.zscore, self.n_features, sample)
    }

    /// Eval-mode logits for raw samples, in input order.
    pub fn logits(&self, samples: &[&[f32]], batch: usize) -> Result<Vec<Vec<f64>>> {
        let net = self.network()?;
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(batch.max(1)) {
            let mut data = Vec::with_capacity(chunk.len() * self.n_features * self.frames);
            for s in chunk {
                if s.len() != self.n_features * self.frames {
                    return Err(Error::Config(format!(
                        "sample has {} values; checkpoint expects {}x{}",
                        s.len(),
                        self.n_features,
                        self.frames
                    )));
                }
                let mut v = s.to_vec();
                self.prepare(&mut v)?;
                data.extend_from_slice(&v);
            }
            out.extend(eval_logits(&net, &self.store, data, chunk.len())?);
        }
        Ok(out)
    }
}

/// Zeroes rows outside the configured subset, then standardises.
pub(crate) fn prepare_sample(model: &ModelConfig, z: &ZScore, n_features: usize, sample: &mut [f32]) -> Result<()> {
    if !model.feature_subset.is_all() {
        if n_features != crate::dsp::N_CHANNELS {
            return Err(Error::Config("feature subsets need the full channel layout".into()));
        }
        let frames = sample.len() / n_features;
        for (r, keep) in model.feature_subset.row_mask().iter().enumerate() {
            if !keep {
                sample[r * frames..(r + 1) * frames].fill(0.0);
            }
        }
    }
    z.apply(sample)
}

pub(crate) fn eval_logits(net: &Network<f32>, store: &ParamStore<f32>, data: Vec<f32>, batch: usize) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::<f32>::new();
    let bound = store.bind(&mut g);
    let x = g.constant(Array::from_vec(&[batch, net.n_features, net.frames], data)?);
    let mut stats = net.running_stats(store)?;
    // eval mode never draws from the generator
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let logits = net.forward(&mut g, &bound, x, Mode::Eval, &mut rng, &mut stats)?;
    let v = g.value(logits).to_f64_vec();
    Ok(v.chunks(net.n_classes).map(|c| c.to_vec()).collect())
}
