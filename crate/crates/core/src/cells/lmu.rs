//! Legendre Memory Unit.
//!
//! ```text
//! u_t = phi(W_x x_t + W_h h_{t-1} + W_m m_{t-1})
//! m_t = A_bar m_{t-1} + B_bar u_t
//! h_t = C m_t + D u_t
//! ```

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::legendre::{discretize, legendre_readout, Discretization};
use super::{frame, project_sequence, stack_time, RecurrentParams};
use crate::error::{Error, Result};
use crate::nn::{Array, Bound, Graph, ParamStore, Real, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmuConfig {
    /// Input width.
    pub p: usize,
    /// Memory order (number of Legendre basis functions).
    pub d: usize,
    /// Hidden width.
    pub r: usize,
    /// Projection width of `u_t`.
    pub q: usize,
    /// Memory window in seconds.
    pub theta: f64,
    /// Frame period in seconds.
    pub dt: f64,
    pub discretization: Discretization,
    /// `tanh` on `u_t` when set, identity otherwise.
    pub nonlinearity_on_u: bool,
    /// Make `C` and `D` trainable, initialised from the fixed readout.
    pub learned_readout: bool,
}

impl Default for LmuConfig {
    fn default() -> Self {
        Self {
            p: 32,
            d: 64,
            r: 64,
            q: 1,
            theta: 1.0,
            dt: 0.015,
            discretization: Discretization::Zoh,
            nonlinearity_on_u: true,
            learned_readout: false,
        }
    }
}

impl LmuConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.d == 0 || self.r == 0 || self.q == 0 {
            return Err(Error::Config("LMU dimensions must be positive".into()));
        }
        if !(self.dt > 0.0 && self.dt < self.theta) {
            return Err(Error::Config(format!("need 0 < dt < theta, got dt={} theta={}", self.dt, self.theta)));
        }
        Ok(())
    }
}

/// Memory and hidden state, each `[B, d]` / `[B, r]`. `None` is the zero state.
#[derive(Clone, Copy, Debug)]
pub struct LmuState {
    pub m: Var,
    pub h: Var,
}

/// Graph handles for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LmuWeights {
    pub w_x: Var,
    pub w_h: Var,
    pub w_m: Var,
    pub a_bar: Var,
    pub b_bar: Var,
    pub c: Var,
    pub d: Var,
    /// `D` is the fixed zero matrix, so its term is skipped.
    pub d_is_zero: bool,
}

/// The cell's configuration and fixed state-space matrices.
#[derive(Clone, Debug)]
pub struct LmuCell<T: Real> {
    pub cfg: LmuConfig,
    /// `[d, d]`
    pub a_bar: Array<T>,
    /// `[d, q]`
    pub b_bar: Array<T>,
    /// `[r, d]`
    pub c: Array<T>,
    /// `[r, q]`
    pub d: Array<T>,
}

fn to_array<T: Real>(m: &DMatrix<f64>) -> Array<T> {
    let data: Vec<f64> = (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])).collect();
    Array::from_f64(&[m.nrows(), m.ncols()], &data).expect("matrix shape")
}

impl<T: Real> LmuCell<T> {
    pub fn new(cfg: LmuConfig) -> Result<Self> {
        cfg.validate()?;
        let (a_bar, b_bar) = discretize(cfg.d, cfg.q, cfg.theta, cfg.dt, cfg.discretization)?;
        let c = legendre_readout(cfg.r, cfg.d);
        Ok(Self {
            cfg,
            a_bar: to_array(&a_bar),
            b_bar: to_array(&b_bar),
            c: to_array(&c),
            d: Array::zeros(&[cfg.r, cfg.q]),
        })
    }

    pub fn init_params<R: Rng>(&self, store: &mut ParamStore<T>, prefix: &str, rng: &mut R) -> Result<()> {
        let c = &self.cfg;
        let lim = |fan: usize| 1.0 / (fan as f64).sqrt();
        store.add(&format!("{prefix}.w_x"), Array::uniform(&[c.q, c.p], lim(c.p), rng))?;
        store.add(&format!("{prefix}.w_h"), Array::uniform(&[c.q, c.r], lim(c.r), rng))?;
        store.add(&format!("{prefix}.w_m"), Array::uniform(&[c.q, c.d], lim(c.d), rng))?;
        if c.learned_readout {
            store.add(&format!("{prefix}.c"), self.c.clone())?;
            store.add(&format!("{prefix}.d"), self.d.clone())?;
        }
        Ok(())
    }

    /// Weights from a parameter store; fixed matrices enter as constants.
    pub fn weights(&self, g: &mut Graph<T>, bound: &Bound, prefix: &str) -> Result<LmuWeights> {
        let w_x = bound.var(&format!("{prefix}.w_x"))?;
        let w_h = bound.var(&format!("{prefix}.w_h"))?;
        let w_m = bound.var(&format!("{prefix}.w_m"))?;
        let (c, d) = if self.cfg.learned_readout {
            (bound.var(&format!("{prefix}.c"))?, bound.var(&format!("{prefix}.d"))?)
        } else {
            (g.constant(self.c.clone()), g.constant(self.d.clone()))
        };
        Ok(self.assemble(g, w_x, w_h, w_m, c, d))
    }

    /// Weights from explicit handles, with the fixed readout.
    pub fn weights_from(&self, g: &mut Graph<T>, w_x: Var, w_h: Var, w_m: Var) -> LmuWeights {
        let c = g.constant(self.c.clone());
        let d = g.constant(self.d.clone());
        self.assemble(g, w_x, w_h, w_m, c, d)
    }

    fn assemble(&self, g: &mut Graph<T>, w_x: Var, w_h: Var, w_m: Var, c: Var, d: Var) -> LmuWeights {
        LmuWeights {
            w_x,
            w_h,
            w_m,
            a_bar: g.constant(self.a_bar.clone()),
            b_bar: g.constant(self.b_bar.clone()),
            c,
            d,
            d_is_zero: !self.cfg.learned_readout,
        }
    }

    /// One step from an already projected input `W_x x_t` of shape `[B, q]`.
    fn step_projected(&self, g: &mut Graph<T>, w: &LmuWeights, state: Option<LmuState>, xp: Var) -> Result<LmuState> {
        let pre = match state {
            // W_h h + W_m m vanish on the zero state
            None => xp,
            Some(s) => {
                let hh = g.matmul_nt(s.h, w.w_h)?;
                let mm = g.matmul_nt(s.m, w.w_m)?;
                let a = g.add(xp, hh)?;
                g.add(a, mm)?
            }
        };
        let u = if self.cfg.nonlinearity_on_u { g.tanh(pre)? } else { pre };
        let bu = g.matmul_nt(u, w.b_bar)?;
        let m = match state {
            None => bu,
            Some(s) => {
                let am = g.matmul_nt(s.m, w.a_bar)?;
                g.add(am, bu)?
            }
        };
        let mut h = g.matmul_nt(m, w.c)?;
        if !w.d_is_zero {
            let du = g.matmul_nt(u, w.d)?;
            h = g.add(h, du)?;
        }
        Ok(LmuState { m, h })
    }

    /// One step on raw input `x_t` of shape `[B, p]`.
    pub fn step(&self, g: &mut Graph<T>, w: &LmuWeights, state: Option<LmuState>, x: Var) -> Result<LmuState> {
        let xp = g.matmul_nt(x, w.w_x)?;
        self.step_projected(g, w, state, xp)
    }

    /// Runs the sequence `[B, T, p]` from the zero state. Returns `h_T` as
    /// `[B, r]`, or the whole trajectory `[B, T, r]` when `all` is set.
    pub fn forward(&self, g: &mut Graph<T>, w: &LmuWeights, x: Var, all: bool) -> Result<Var> {
        self.forward_states(g, w, x).and_then(|states| {
            if all {
                let hs: Vec<Var> = states.iter().map(|s| s.h).collect();
                stack_time(g, &hs)
            } else {
                Ok(states.last().expect("non-empty sequence").h)
            }
        })
    }

    /// Every intermediate state of the scan.
    pub fn forward_states(&self, g: &mut Graph<T>, w: &LmuWeights, x: Var) -> Result<Vec<LmuState>> {
        let t_len = g.shape(x).get(1).copied().unwrap_or(0);
        if t_len == 0 {
            return Err(Error::Shape("LMU needs at least one frame".into()));
        }
        if g.shape(x)[2] != self.cfg.p {
            return Err(Error::Shape(format!("LMU expects {} inputs, got {:?}", self.cfg.p, g.shape(x))));
        }
        let xp = project_sequence(g, x, w.w_x)?;
        let mut state = None;
        let mut out = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let xt = frame(g, xp, t)?;
            let s = self.step_projected(g, w, state, xt)?;
            out.push(s);
            state = Some(s);
        }
        Ok(out)
    }
}

impl<T: Real> RecurrentParams for LmuCell<T> {
    fn count_recurrent_params(&self) -> usize {
        let c = &self.cfg;
        let readout = if c.learned_readout { c.r * c.d + c.r * c.q } else { 0 };
        c.q * (c.p + c.r + c.d) + readout
    }
}
