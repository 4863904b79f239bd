//! Infant-cry classification: acoustic feature extraction, Legendre-memory
//! and LSTM sequence classifiers on a small reverse-mode autodiff core,
//! leakage-safe splitting, and calibrated entropy-gated fusion of two
//! classifiers with partially overlapping label sets.

pub mod cells;
pub mod cli;
pub mod data;
pub mod dsp;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod util;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
