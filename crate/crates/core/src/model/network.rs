//! Encoder stem, sequence cell and dense head over one parameter store.
//!
//! Input `[B, F, T]` is treated as a one-channel image with features on the
//! vertical axis. Each block is conv (same padding) -> batch norm -> ReLU ->
//! max-pool along features only, so all `T` frames survive. The final map
//! `[B, C, F', T]` is flattened per frame into `[B, T, C * F']`.

use rand::Rng;

use crate::cells::{CellKind, LmuCell, LmuConfig, LstmCell, LstmConfig, SeqCell};
use crate::error::{Error, Result};
use crate::nn::{Array, Bound, Conv2dSpec, Graph, Mode, ParamStore, Real, RunningStats, Var};

use super::ModelConfig;

#[derive(Clone, Debug)]
pub struct Network<T: Real> {
    pub cfg: ModelConfig,
    pub n_features: usize,
    pub frames: usize,
    pub n_classes: usize,
    pub cell: Option<SeqCell<T>>,
}

fn block(i: usize, what: &str) -> String {
    format!("enc.{i}.{what}")
}

impl<T: Real> Network<T> {
    pub fn new(cfg: ModelConfig, n_features: usize, frames: usize, n_classes: usize) -> Result<Self> {
        cfg.validate()?;
        if n_features == 0 || frames == 0 {
            return Err(Error::Config("input must have at least one feature and one frame".into()));
        }
        if n_classes < 2 {
            return Err(Error::Config(format!("need at least two classes, got {n_classes}")));
        }
        let mut net = Self { cfg, n_features, frames, n_classes, cell: None };
        let p = net.feat_dim();
        net.cell = match net.cfg.cell {
            CellKind::None => None,
            CellKind::Lmu => {
                let s = net.cfg.lmu;
                Some(SeqCell::Lmu(LmuCell::new(LmuConfig {
                    p,
                    d: s.d,
                    r: net.cfg.r,
                    q: s.q,
                    theta: s.theta,
                    dt: s.dt,
                    discretization: s.discretization,
                    nonlinearity_on_u: s.nonlinearity_on_u,
                    learned_readout: s.learned_readout,
                })?))
            }
            CellKind::Lstm => Some(SeqCell::Lstm(LstmCell::new(LstmConfig {
                p,
                r: net.cfg.r,
                forget_bias: net.cfg.lstm_forget_bias,
            })?)),
        };
        Ok(net)
    }

    /// Feature rows left after all pools.
    pub fn pooled_features(&self) -> usize {
        self.cfg.filters.iter().fold(self.n_features, |h, _| h.div_ceil(self.cfg.pool[0]))
    }

    /// Per-frame width of the encoder output.
    pub fn feat_dim(&self) -> usize {
        self.cfg.filters.last().copied().unwrap_or(1) * self.pooled_features()
    }

    /// Width of the vector fed to the head.
    pub fn head_in(&self) -> usize {
        match &self.cell {
            Some(c) => c.hidden_dim(),
            None => self.feat_dim(),
        }
    }

    pub fn init_params<R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        let mut c_in = 1;
        for (i, (&c_out, k)) in self.cfg.filters.iter().zip(&self.cfg.kernels).enumerate() {
            let fan_in = c_in * k[0] * k[1];
            store.add(&block(i, "w"), Array::uniform(&[c_out, c_in, k[0], k[1]], 1.0 / (fan_in as f64).sqrt(), rng))?;
            store.add(&block(i, "gamma"), Array::full(&[c_out], T::one()))?;
            store.add(&block(i, "beta"), Array::zeros(&[c_out]))?;
            store.add_buffer(&block(i, "running_mean"), Array::zeros(&[c_out]))?;
            store.add_buffer(&block(i, "running_var"), Array::full(&[c_out], T::one()))?;
            c_in = c_out;
        }
        if let Some(cell) = &self.cell {
            cell.init_params(store, "cell", rng)?;
        }
        let h = self.head_in();
        let lim = 1.0 / (h as f64).sqrt();
        store.add("head.w", Array::uniform(&[self.n_classes, h], lim, rng))?;
        store.add("head.b", Array::uniform(&[self.n_classes], lim, rng))?;
        Ok(())
    }

    /// Batch-norm running statistics currently held in `store`.
    pub fn running_stats(&self, store: &ParamStore<T>) -> Result<Vec<RunningStats<T>>> {
        (0..self.cfg.filters.len())
            .map(|i| {
                let get = |n: &str| {
                    store.get(&block(i, n)).cloned().ok_or_else(|| Error::Config(format!("missing {}", block(i, n))))
                };
                Ok(RunningStats { mean: get("running_mean")?, var: get("running_var")? })
            })
            .collect()
    }

    pub fn store_running_stats(&self, store: &mut ParamStore<T>, stats: &[RunningStats<T>]) -> Result<()> {
        for (i, s) in stats.iter().enumerate() {
            store.set(&block(i, "running_mean"), s.mean.clone())?;
            store.set(&block(i, "running_var"), s.var.clone())?;
        }
        Ok(())
    }

    /// `[B, F, T]` -> `[B, T, feat_dim]`.
    pub fn encode(&self, g: &mut Graph<T>, bound: &Bound, x: Var, mode: Mode, stats: &mut [RunningStats<T>]) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[1] != self.n_features || s[2] != self.frames {
            return Err(Error::Shape(format!(
                "network expects [B, {}, {}], got {s:?}",
                self.n_features, self.frames
            )));
        }
        if stats.len() != self.cfg.filters.len() {
            return Err(Error::Config("one set of running statistics per block is required".into()));
        }
        let batch = s[0];
        let mut h = g.reshape(x, &[batch, 1, s[1], s[2]])?;
        for (i, st) in stats.iter_mut().enumerate() {
            let w = bound.var(&block(i, "w"))?;
            h = g.conv2d(h, w, None, Conv2dSpec::default())?;
            let gamma = bound.var(&block(i, "gamma"))?;
            let beta = bound.var(&block(i, "beta"))?;
            h = g.batchnorm(h, gamma, beta, st, mode)?;
            h = g.relu(h)?;
            h = g.maxpool(h, (self.cfg.pool[0], self.cfg.pool[1]))?;
        }
        let hs = g.shape(h).to_vec();
        let h = g.permute(h, &[0, 3, 1, 2])?;
        g.reshape(h, &[batch, hs[3], hs[1] * hs[2]])
    }

    /// Logits `[B, n_classes]`.
    pub fn forward<R: Rng>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        x: Var,
        mode: Mode,
        rng: &mut R,
        stats: &mut [RunningStats<T>],
    ) -> Result<Var> {
        let seq = self.encode(g, bound, x, mode, stats)?;
        let z = match &self.cell {
            Some(cell) => cell.forward_last(g, bound, "cell", seq)?,
            None => g.mean_axis(seq, 1)?,
        };
        let z = g.dropout(z, self.cfg.dropout, rng, mode)?;
        let w = bound.var("head.w")?;
        let b = bound.var("head.b")?;
        let logits = g.matmul_nt(z, w)?;
        g.add_row(logits, b)
    }
}
