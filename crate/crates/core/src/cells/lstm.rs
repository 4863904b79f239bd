//! LSTM baseline with stacked gate weights.
//!
//! Gate blocks are stored in the order input, forget, output, candidate:
//! `W` is `[4r, p]`, `U` is `[4r, r]` and `b` is `[4r]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{frame, project_sequence, stack_time, RecurrentParams};
use crate::error::{Error, Result};
use crate::nn::{Array, Bound, Graph, ParamStore, Real, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LstmConfig {
    pub p: usize,
    pub r: usize,
    pub forget_bias: f64,
}

impl Default for LstmConfig {
    fn default() -> Self {
        Self { p: 32, r: 64, forget_bias: 1.0 }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub c: Var,
    pub h: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmWeights {
    pub w: Var,
    pub u: Var,
    pub b: Var,
}

#[derive(Clone, Debug)]
pub struct LstmCell {
    pub cfg: LstmConfig,
}

impl LstmCell {
    pub fn new(cfg: LstmConfig) -> Result<Self> {
        if cfg.p == 0 || cfg.r == 0 {
            return Err(Error::Config("LSTM dimensions must be positive".into()));
        }
        Ok(Self { cfg })
    }

    pub fn init_params<T: Real, R: Rng>(&self, store: &mut ParamStore<T>, prefix: &str, rng: &mut R) -> Result<()> {
        let (p, r) = (self.cfg.p, self.cfg.r);
        store.add(&format!("{prefix}.w"), Array::uniform(&[4 * r, p], 1.0 / (p as f64).sqrt(), rng))?;
        store.add(&format!("{prefix}.u"), Array::uniform(&[4 * r, r], 1.0 / (r as f64).sqrt(), rng))?;
        let mut b = vec![0.0; 4 * r];
        b[r..2 * r].fill(self.cfg.forget_bias);
        store.add(&format!("{prefix}.b"), Array::from_f64(&[4 * r], &b)?)?;
        Ok(())
    }

    pub fn weights(&self, bound: &Bound, prefix: &str) -> Result<LstmWeights> {
        Ok(LstmWeights {
            w: bound.var(&format!("{prefix}.w"))?,
            u: bound.var(&format!("{prefix}.u"))?,
            b: bound.var(&format!("{prefix}.b"))?,
        })
    }

    fn step_projected<T: Real>(&self, g: &mut Graph<T>, w: &LstmWeights, state: Option<LstmState>, z: Var) -> Result<LstmState> {
        let r = self.cfg.r;
        let z = match state {
            None => z,
            Some(s) => {
                let uh = g.matmul_nt(s.h, w.u)?;
                g.add(z, uh)?
            }
        };
        let zi = g.slice(z, 1, 0, r)?;
        let zf = g.slice(z, 1, r, r)?;
        let zo = g.slice(z, 1, 2 * r, r)?;
        let zg = g.slice(z, 1, 3 * r, r)?;
        let i = g.sigmoid(zi)?;
        let o = g.sigmoid(zo)?;
        let cand = g.tanh(zg)?;
        let ig = g.mul(i, cand)?;
        let c = match state {
            None => ig,
            Some(s) => {
                let f = g.sigmoid(zf)?;
                let fc = g.mul(f, s.c)?;
                g.add(fc, ig)?
            }
        };
        let tc = g.tanh(c)?;
        let h = g.mul(o, tc)?;
        Ok(LstmState { c, h })
    }

    /// One step on raw input `[B, p]`.
    pub fn step<T: Real>(&self, g: &mut Graph<T>, w: &LstmWeights, state: Option<LstmState>, x: Var) -> Result<LstmState> {
        let z = g.matmul_nt(x, w.w)?;
        let z = g.add_row(z, w.b)?;
        self.step_projected(g, w, state, z)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, w: &LstmWeights, x: Var, all: bool) -> Result<Var> {
        let states = self.forward_states(g, w, x)?;
        if all {
            let hs: Vec<Var> = states.iter().map(|s| s.h).collect();
            stack_time(g, &hs)
        } else {
            Ok(states.last().expect("non-empty sequence").h)
        }
    }

    pub fn forward_states<T: Real>(&self, g: &mut Graph<T>, w: &LstmWeights, x: Var) -> Result<Vec<LstmState>> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[1] == 0 || shape[2] != self.cfg.p {
            return Err(Error::Shape(format!("LSTM expects [B, T>0, {}], got {shape:?}", self.cfg.p)));
        }
        let (b, t_len) = (shape[0], shape[1]);
        let z = project_sequence(g, x, w.w)?;
        let z = g.reshape(z, &[b * t_len, 4 * self.cfg.r])?;
        let z = g.add_row(z, w.b)?;
        let z = g.reshape(z, &[b, t_len, 4 * self.cfg.r])?;
        let mut state = None;
        let mut out = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let zt = frame(g, z, t)?;
            let s = self.step_projected(g, w, state, zt)?;
            out.push(s);
            state = Some(s);
        }
        Ok(out)
    }
}

impl RecurrentParams for LstmCell {
    fn count_recurrent_params(&self) -> usize {
        let (p, r) = (self.cfg.p, self.cfg.r);
        4 * (r * p + r * r + r)
    }
}
