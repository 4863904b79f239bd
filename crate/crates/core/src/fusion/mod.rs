//! Temperature calibration and entropy-gated fusion of classifiers trained on
//! different label sets.
//!
//! Each model's logits are turned into calibrated log-posteriors
//! `log softmax(z / T_m)`. Those, not the raw logits, are written into the
//! union label space: raw logits of independently trained models carry
//! arbitrary per-model offsets, log-posteriors do not. Classes seen by one
//! model are copied, classes seen by several are merged with a weighted
//! log-sum-exp (or summed, in product-of-experts mode), and a final softmax
//! over the union gives the fused posterior.

mod cases;
mod ensemble;
mod temperature;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use cases::{run_case_studies, CaseFixture, CaseOutcome, CaseReport, CaseStudies, BUNDLED_CASES};
pub use ensemble::{read_logit_table, write_logit_table, EnsembleDescriptor, EnsembleMember, LogitTable};
pub use temperature::{fit_temperature, nll_at, TemperatureFit, T_MAX, T_MIN};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Entropy-weighted log-sum-exp on shared classes.
    #[default]
    Lse,
    /// Sum of log-posteriors on shared classes.
    Poe,
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lse" | "entropy_lse" => Ok(Self::Lse),
            "poe" | "product_of_experts" => Ok(Self::Poe),
            other => Err(Error::Config(format!("unknown fusion mode '{other}' (lse|poe)"))),
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Lse => "lse",
            Self::Poe => "poe",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Sharpness of the entropy gate, in inverse nats.
    pub tau: f64,
    pub mode: FusionMode,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { tau: 1.0, mode: FusionMode::Lse }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.tau.is_finite() || self.tau < 0.0 {
            return Err(Error::Config(format!("tau must be finite and non-negative, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Per-model label lists and their projection into the sorted union.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelSpace {
    pub domains: Vec<Vec<String>>,
    pub union: Vec<String>,
    /// `maps[m][j]` is the union index of model `m`'s class `j`.
    pub maps: Vec<Vec<usize>>,
    /// Union indices covered by more than one model.
    pub shared: Vec<usize>,
}

impl LabelSpace {
    pub fn new(domains: Vec<Vec<String>>) -> Result<Self> {
        if domains.is_empty() {
            return Err(Error::Config("label space needs at least one model".into()));
        }
        for (m, labels) in domains.iter().enumerate() {
            if labels.is_empty() {
                return Err(Error::Config(format!("model {m} has no labels")));
            }
            let unique: BTreeSet<&String> = labels.iter().collect();
            if unique.len() != labels.len() {
                return Err(Error::Config(format!("model {m} lists a label twice")));
            }
        }
        let union: Vec<String> = domains.iter().flatten().cloned().collect::<BTreeSet<_>>().into_iter().collect();
        let maps: Vec<Vec<usize>> = domains
            .iter()
            .map(|labels| labels.iter().map(|l| union.binary_search(l).expect("label is in the union")).collect())
            .collect();
        let shared = (0..union.len())
            .filter(|&u| maps.iter().filter(|map| map.contains(&u)).count() > 1)
            .collect();
        Ok(Self { domains, union, maps, shared })
    }

    pub fn n_models(&self) -> usize {
        self.domains.len()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.union.binary_search_by(|l| l.as_str().cmp(label)).ok()
    }

    pub fn shared_labels(&self) -> Vec<&str> {
        self.shared.iter().map(|&u| self.union[u].as_str()).collect()
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::Config(format!("temperature must be positive and finite, got {t}")));
    }
    Ok(())
}

/// `log softmax(z / T)`, max-shifted.
pub fn log_posterior(logits: &[f64], t: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|&z| z / t).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return vec![-(logits.len() as f64).ln(); logits.len()];
    }
    let lse = max + scaled.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    scaled.into_iter().map(|z| z - lse).collect()
}

/// `softmax(z / T)`.
pub fn calibrate_posterior(logits: &[f64], t: f64) -> Vec<f64> {
    log_posterior(logits, t).into_iter().map(f64::exp).collect()
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// `w_m = exp(-tau H(p_m)) / sum_k exp(-tau H(p_k))`.
pub fn entropy_weights(posteriors: &[&[f64]], tau: f64) -> Vec<f64> {
    let logs: Vec<f64> = posteriors.iter().map(|p| -tau * entropy(p)).collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logs.iter().map(|&l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Result of fusing one sample.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Fused {
    /// Pre-softmax union scores.
    pub union_logits: Vec<f64>,
    pub posterior: Vec<f64>,
    /// Entropy gate of each model.
    pub weights: Vec<f64>,
    /// Calibrated posterior of each model over its own labels.
    pub model_posteriors: Vec<Vec<f64>>,
}

impl Fused {
    pub fn argmax(&self) -> usize {
        crate::metrics::argmax(&self.posterior)
    }
}

/// Fuses one sample's logits from every model in `space`.
pub fn fuse_union(logits: &[&[f64]], temps: &[f64], space: &LabelSpace, cfg: &FusionConfig) -> Result<Fused> {
    cfg.validate()?;
    let m = space.n_models();
    if logits.len() != m || temps.len() != m {
        return Err(Error::Config(format!(
            "{} logit vectors and {} temperatures for {m} models",
            logits.len(),
            temps.len()
        )));
    }
    let mut log_posts = Vec::with_capacity(m);
    for (k, (&z, &t)) in logits.iter().zip(temps).enumerate() {
        check_temperature(t)?;
        if z.len() != space.domains[k].len() {
            return Err(Error::Config(format!(
                "model {k} produced {} logits for {} labels",
                z.len(),
                space.domains[k].len()
            )));
        }
        if z.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::Numerical(format!("model {k} produced invalid logits")));
        }
        log_posts.push(log_posterior(z, t));
    }
    let posts: Vec<Vec<f64>> = log_posts.iter().map(|lp| lp.iter().map(|v| v.exp()).collect()).collect();
    let post_refs: Vec<&[f64]> = posts.iter().map(Vec::as_slice).collect();
    let weights = entropy_weights(&post_refs, cfg.tau);

    let n = space.union.len();
    let mut z = vec![f64::NEG_INFINITY; n];
    for u in 0..n {
        // (model, log-posterior) pairs covering this class
        let contrib: Vec<(usize, f64)> = (0..m)
            .filter_map(|k| space.maps[k].iter().position(|&x| x == u).map(|j| (k, log_posts[k][j])))
            .collect();
        z[u] = match contrib.len() {
            0 => f64::NEG_INFINITY,
            1 => contrib[0].1,
            _ => match cfg.mode {
                FusionMode::Poe => contrib.iter().map(|c| c.1).sum(),
                FusionMode::Lse => {
                    let wsum: f64 = contrib.iter().map(|c| weights[c.0]).sum();
                    logsumexp(contrib.iter().map(|&(k, lp)| (weights[k] / wsum).ln() + lp))
                }
            },
        };
    }
    let posterior = log_posterior(&z, 1.0).into_iter().map(f64::exp).collect();
    Ok(Fused { union_logits: z, posterior, weights, model_posteriors: posts })
}

/// Uncalibrated soft averaging: each model's `T = 1` posterior projected into
/// the union (zero outside its labels), averaged over models.
pub fn soft_average(logits: &[&[f64]], space: &LabelSpace) -> Result<Vec<f64>> {
    if logits.len() != space.n_models() {
        return Err(Error::Config("one logit vector per model required".into()));
    }
    let mut out = vec![0.0; space.union.len()];
    for (k, z) in logits.iter().enumerate() {
        if z.len() != space.domains[k].len() {
            return Err(Error::Config(format!("model {k}: logit count does not match its labels")));
        }
        for (j, p) in calibrate_posterior(z, 1.0).into_iter().enumerate() {
            out[space.maps[k][j]] += p / logits.len() as f64;
        }
    }
    Ok(out)
}
