//! Minimal reverse-mode automatic differentiation over dense arrays.

mod array;
pub mod gradcheck;
mod graph;
mod params;

pub use array::{Array, Real};
pub use graph::{Conv2dSpec, Gradients, Graph, Mode, RunningStats, Var, BN_EPS, BN_MOMENTUM};
pub use params::{AdamConfig, Bound, ParamStore, WeightEntry, WeightManifest};
