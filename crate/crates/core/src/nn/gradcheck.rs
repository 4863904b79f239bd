//! Central-difference gradient checking for graphs built in `f64`.

use super::array::Array;
use super::graph::{Graph, Var};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// (input index, flat element index) of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Relative error with a small absolute floor so entries whose true gradient
/// is zero do not divide by zero.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares backward-pass gradients of every input with central differences.
///
/// `f` builds the function from leaves bound to `inputs`; its output (any
/// shape) is reduced to a scalar by a fixed pseudo-random projection so every
/// output element contributes.
pub fn check<F>(inputs: &[Array<f64>], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Array<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|a| g.constant(a.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(project(g.value(out)))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|a| g.param(a.clone())).collect();
    let out = f(&mut g, &vars)?;
    let proj = projection(g.value(out).len());
    let w = g.constant(Array::from_vec(g.shape(out), proj)?);
    let prod = g.mul(out, w)?;
    let loss = g.sum_all(prod)?;
    let grads = g.backward(loss)?;

    let mut report = GradCheck { max_rel_err: 0.0, max_abs_err: 0.0, worst: (0, 0), checked: 0 };
    let mut work: Vec<Array<f64>> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let zeros = Array::zeros(inputs[i].shape());
        let analytic = grads.get(*v).unwrap_or(&zeros).data().to_vec();
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let abs = (analytic[j] - numeric).abs();
            let rel = rel_err(analytic[j], numeric);
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (i, j);
            }
        }
    }
    Ok(report)
}

fn projection(n: usize) -> Vec<f64> {
    // fixed, well-spread weights in [0.5, 1.5) with alternating sign
    (0..n)
        .map(|i| {
            let x = ((i as f64 + 1.0) * 0.618_033_988_749_895).fract();
            let s = if i % 2 == 0 { 1.0 } else { -1.0 };
            s * (0.5 + x)
        })
        .collect()
}

fn project(a: &Array<f64>) -> f64 {
    a.data().iter().zip(projection(a.len())).map(|(x, w)| x * w).sum()
}
