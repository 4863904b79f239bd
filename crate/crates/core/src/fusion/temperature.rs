//! Post-hoc temperature scaling fitted by NLL minimisation.

use serde::{Deserialize, Serialize};

use super::log_posterior;
use crate::error::{Error, Result};

pub const T_MIN: f64 = 0.05;
pub const T_MAX: f64 = 20.0;
const LOG_TOL: f64 = 1e-4;
const MIN_SAMPLES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureFit {
    pub temperature: f64,
    pub nll_before: f64,
    pub nll_after: f64,
    /// The minimiser sat on the edge of the search bracket.
    pub at_bound: bool,
}

/// Mean negative log-likelihood of `labels` under `softmax(z / t)`.
pub fn nll_at(logits: &[Vec<f64>], labels: &[usize], t: f64) -> f64 {
    let total: f64 = logits.iter().zip(labels).map(|(z, &y)| -log_posterior(z, t)[y]).sum();
    total / logits.len() as f64
}

/// Golden-section search over `ln T` in `[ln T_MIN, ln T_MAX]`. The NLL is
/// treated as unimodal on that bracket. `T = 1` is returned instead when it
/// scores at least as well, so the fit never makes validation NLL worse.
pub fn fit_temperature(logits: &[Vec<f64>], labels: &[usize]) -> Result<TemperatureFit> {
    if logits.len() != labels.len() {
        return Err(Error::Calibration(format!("{} logit rows but {} labels", logits.len(), labels.len())));
    }
    if logits.len() < MIN_SAMPLES {
        return Err(Error::Calibration(format!("need at least {MIN_SAMPLES} validation samples, got {}", logits.len())));
    }
    let c = logits[0].len();
    if c < 2 || logits.iter().any(|z| z.len() != c) {
        return Err(Error::Calibration("logit rows must share a width of at least 2".into()));
    }
    if logits.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Calibration("non-finite logits".into()));
    }
    let mut seen = vec![false; c];
    for &y in labels {
        if y >= c {
            return Err(Error::Calibration(format!("label index {y} out of range for {c} classes")));
        }
        seen[y] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Calibration(format!("class {missing} never occurs in the validation labels")));
    }
    if logits.iter().all(|z| z.iter().all(|&v| v == z[0])) {
        return Err(Error::Calibration("every logit row is constant; temperature is unidentifiable".into()));
    }

    let f = |u: f64| nll_at(logits, labels, u.exp());
    let (lo, hi) = (T_MIN.ln(), T_MAX.ln());
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while b - a > LOG_TOL {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - inv_phi * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + inv_phi * (b - a);
            f2 = f(x2);
        }
    }
    let u = 0.5 * (a + b);
    let mut candidates = [(u, f(u)), (lo, f(lo)), (hi, f(hi))];
    candidates.sort_by(|p, q| p.1.total_cmp(&q.1));
    let (u_best, nll_fit) = candidates[0];
    let at_bound = u_best - lo < 10.0 * LOG_TOL || hi - u_best < 10.0 * LOG_TOL;
    if at_bound {
        log::warn!("fitted temperature {:.4} lies on the search bound [{T_MIN}, {T_MAX}]", u_best.exp());
    }
    let nll_before = f(0.0);
    let (temperature, nll_after) = if nll_fit <= nll_before { (u_best.exp(), nll_fit) } else { (1.0, nll_before) };
    Ok(TemperatureFit { temperature, nll_before, nll_after, at_bound })
}
