//! CNN encoder, sequence cell and classification head, with the training
//! loop, z-score normalisation and checkpoints.

mod checkpoint;
mod network;
mod train;
mod zscore;

use serde::{Deserialize, Serialize};

use crate::cells::{CellKind, Discretization};
use crate::dsp::FeatureSubset;
use crate::error::{Error, Result};

pub use checkpoint::Checkpoint;
pub use network::Network;
pub use train::{predict_logits, train, Dataset, EpochRecord, TrainReport};
pub use zscore::ZScore;

/// LMU hyper-parameters other than the input and hidden widths, which the
/// network derives from the encoder and [`ModelConfig::r`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmuSettings {
    pub d: usize,
    pub q: usize,
    pub theta: f64,
    pub dt: f64,
    pub discretization: Discretization,
    pub nonlinearity_on_u: bool,
    pub learned_readout: bool,
}

impl Default for LmuSettings {
    fn default() -> Self {
        Self {
            d: 64,
            q: 1,
            theta: 1.0,
            dt: 0.015,
            discretization: Discretization::Zoh,
            nonlinearity_on_u: true,
            learned_readout: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_subset: FeatureSubset,
    /// Output channels of each conv block.
    pub filters: Vec<usize>,
    /// Kernel `[feature, time]` per block.
    pub kernels: Vec<[usize; 2]>,
    /// Max-pool window `[feature, time]` after each block.
    pub pool: [usize; 2],
    pub cell: CellKind,
    /// Hidden width of the cell.
    pub r: usize,
    pub lmu: LmuSettings,
    pub lstm_forget_bias: f64,
    /// Dropout before the head.
    pub dropout: f64,
    /// L2 coefficient added to every learned parameter's gradient.
    pub l2: f64,
    /// Inverse-frequency class weights in the loss.
    pub class_weights: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_subset: FeatureSubset::ALL,
            filters: vec![128, 64, 32],
            kernels: vec![[3, 3]; 3],
            pool: [2, 1],
            cell: CellKind::Lmu,
            r: 64,
            lmu: LmuSettings::default(),
            lstm_forget_bias: 1.0,
            dropout: 0.3,
            l2: 1e-4,
            class_weights: true,
        }
    }
}

impl ModelConfig {
    /// Same layout with different encoder widths.
    pub fn with_filters(mut self, filters: &[usize]) -> Self {
        self.filters = filters.to_vec();
        self.kernels = vec![[3, 3]; filters.len()];
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.filters.is_empty() || self.filters.contains(&0) {
            return Err(Error::Config("encoder needs at least one block with positive width".into()));
        }
        if self.kernels.len() != self.filters.len() {
            return Err(Error::Config(format!(
                "{} kernel sizes for {} encoder blocks",
                self.kernels.len(),
                self.filters.len()
            )));
        }
        if self.kernels.iter().flatten().any(|&k| k == 0) || self.pool.contains(&0) {
            return Err(Error::Config("kernel and pool sizes must be positive".into()));
        }
        if self.pool[1] != 1 {
            return Err(Error::Config("pooling along time would break the frame sequence".into()));
        }
        if self.r == 0 {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.l2 < 0.0 {
            return Err(Error::Config("l2 must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation macro-F1 gain before stopping.
    pub patience: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Batch size for evaluation passes.
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 8,
            max_epochs: 50,
            patience: 8,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            eval_batch_size: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) {
            return Err(Error::Config("learning rate must be non-negative".into()));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
