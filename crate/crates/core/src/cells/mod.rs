//! Recurrent cells: the Legendre Memory Unit and an LSTM baseline.
//!
//! Both cells run over batch-first sequences `[B, T, p]` inside an autodiff
//! [`Graph`](crate::nn::Graph) and start from an all-zero state.

pub mod legendre;
mod lmu;
mod lstm;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{Bound, Graph, ParamStore, Real, Var};

pub use legendre::Discretization;
pub use lmu::{LmuCell, LmuConfig, LmuState, LmuWeights};
pub use lstm::{LstmCell, LstmConfig, LstmState, LstmWeights};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    #[default]
    Lmu,
    Lstm,
    None,
}

impl std::str::FromStr for CellKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lmu" => Ok(Self::Lmu),
            "lstm" => Ok(Self::Lstm),
            "none" | "cnn" => Ok(Self::None),
            other => Err(crate::Error::Config(format!("unknown cell '{other}'"))),
        }
    }
}

/// Learned recurrent parameter count of a built cell.
pub trait RecurrentParams {
    fn count_recurrent_params(&self) -> usize;
}

/// A cell chosen at run time.
#[derive(Clone, Debug)]
pub enum SeqCell<T: Real> {
    Lmu(LmuCell<T>),
    Lstm(LstmCell),
}

impl<T: Real> SeqCell<T> {
    pub fn hidden_dim(&self) -> usize {
        match self {
            Self::Lmu(c) => c.cfg.r,
            Self::Lstm(c) => c.cfg.r,
        }
    }

    pub fn init_params<R: Rng>(&self, store: &mut ParamStore<T>, prefix: &str, rng: &mut R) -> Result<()> {
        match self {
            Self::Lmu(c) => c.init_params(store, prefix, rng),
            Self::Lstm(c) => c.init_params(store, prefix, rng),
        }
    }

    /// Final hidden state `[B, r]` of a `[B, T, p]` sequence.
    pub fn forward_last(&self, g: &mut Graph<T>, bound: &Bound, prefix: &str, x: Var) -> Result<Var> {
        match self {
            Self::Lmu(c) => {
                let w = c.weights(g, bound, prefix)?;
                c.forward(g, &w, x, false)
            }
            Self::Lstm(c) => {
                let w = c.weights(bound, prefix)?;
                c.forward(g, &w, x, false)
            }
        }
    }
}

impl<T: Real> RecurrentParams for SeqCell<T> {
    fn count_recurrent_params(&self) -> usize {
        match self {
            Self::Lmu(c) => c.count_recurrent_params(),
            Self::Lstm(c) => c.count_recurrent_params(),
        }
    }
}

/// Input projection of a whole sequence in one matrix product:
/// `[B, T, p] x [k, p]^T -> [B, T, k]`.
pub(crate) fn project_sequence<T: Real>(g: &mut Graph<T>, x: Var, w: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(crate::Error::Shape(format!("sequence input must be [B, T, p], got {shape:?}")));
    }
    let (b, t, p) = (shape[0], shape[1], shape[2]);
    let k = g.shape(w)[0];
    let flat = g.reshape(x, &[b * t, p])?;
    let proj = g.matmul_nt(flat, w)?;
    g.reshape(proj, &[b, t, k])
}

/// Frame `t` of a `[B, T, k]` sequence as `[B, k]`.
pub(crate) fn frame<T: Real>(g: &mut Graph<T>, seq: Var, t: usize) -> Result<Var> {
    let shape = g.shape(seq).to_vec();
    let s = g.slice(seq, 1, t, 1)?;
    g.reshape(s, &[shape[0], shape[2]])
}

/// Stacks per-step `[B, r]` states into `[B, T, r]`.
pub(crate) fn stack_time<T: Real>(g: &mut Graph<T>, hs: &[Var]) -> Result<Var> {
    let shape = g.shape(hs[0]).to_vec();
    let parts = hs
        .iter()
        .map(|&h| g.reshape(h, &[shape[0], 1, shape[1]]))
        .collect::<Result<Vec<_>>>()?;
    g.concat(&parts, 1)
}
