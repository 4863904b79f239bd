//! Legendre delay-network state space and its discretisation.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Discretization {
    #[default]
    Zoh,
    Euler,
}

/// Tolerance on the spectral radius of the discrete transition matrix.
pub const STABILITY_MARGIN: f64 = 1e-9;

/// Continuous `(A, B)` for memory order `d` and a single input, before the
/// `1/theta` scaling.
pub fn continuous_ab(d: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let a = DMatrix::from_fn(d, d, |i, j| {
        let s = if i < j { -1.0 } else if (i - j + 1) % 2 == 0 { 1.0 } else { -1.0 };
        (2 * i + 1) as f64 * s
    });
    let b = DMatrix::from_fn(d, 1, |i, _| (2 * i + 1) as f64 * if i % 2 == 0 { 1.0 } else { -1.0 });
    (a, b)
}

/// Shifted Legendre polynomial `P_i(2x - 1)` on `[0, 1]`.
pub fn shifted_legendre(i: usize, x: f64) -> f64 {
    let y = 2.0 * x - 1.0;
    let (mut p0, mut p1) = (1.0, y);
    match i {
        0 => p0,
        1 => p1,
        _ => {
            for n in 1..i {
                let n = n as f64;
                let p2 = ((2.0 * n + 1.0) * y * p1 - n * p0) / (n + 1.0);
                p0 = p1;
                p1 = p2;
            }
            p1
        }
    }
}

/// `r x d` readout whose row `j` evaluates the basis at relative delay
/// `j / (r - 1)` of the window (a single tap at the full delay when `r = 1`).
pub fn legendre_readout(r: usize, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, d, |j, i| {
        let x = if r == 1 { 1.0 } else { j as f64 / (r - 1) as f64 };
        shifted_legendre(i, x)
    })
}

const PADE6: [f64; 7] = [
    1.0,
    1.0 / 2.0,
    5.0 / 44.0,
    1.0 / 66.0,
    1.0 / 792.0,
    1.0 / 15840.0,
    1.0 / 665280.0,
];

/// Matrix exponential by scaling and squaring with a degree-6 Padé approximant.
pub fn expm(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(Error::Shape(format!("expm of a {}x{} matrix", n, m.ncols())));
    }
    let norm = m.column_iter().map(|c| c.abs().sum()).fold(0.0, f64::max);
    if !norm.is_finite() {
        return Err(Error::Numerical("expm argument is not finite".into()));
    }
    let s = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let a = m / 2f64.powi(s);
    let id = DMatrix::<f64>::identity(n, n);
    let mut num = &id * PADE6[0];
    let mut den = &id * PADE6[0];
    let mut pow = id.clone();
    for (k, &c) in PADE6.iter().enumerate().skip(1) {
        pow = &pow * &a;
        num += &pow * c;
        den += &pow * if k % 2 == 0 { c } else { -c };
    }
    let mut e = den
        .lu()
        .solve(&num)
        .ok_or_else(|| Error::Numerical("singular Padé denominator".into()))?;
    for _ in 0..s {
        e = &e * &e;
    }
    if e.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("expm produced non-finite entries".into()));
    }
    Ok(e)
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Discrete `(A_bar, B_bar)` for the scaled system `(A/theta, B/theta)`.
/// The input matrix is repeated across `q` projection channels.
pub fn discretize(d: usize, q: usize, theta: f64, dt: f64, mode: Discretization) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if d == 0 || q == 0 {
        return Err(Error::Config("memory order and projection width must be positive".into()));
    }
    if !(dt > 0.0 && dt < theta) {
        return Err(Error::Config(format!("need 0 < dt < theta, got dt={dt}, theta={theta}")));
    }
    let (a, b) = continuous_ab(d);
    let (a, b) = (a / theta, b / theta);
    let (a_bar, b1) = match mode {
        Discretization::Euler => (DMatrix::identity(d, d) + &a * dt, &b * dt),
        Discretization::Zoh => {
            let mut aug = DMatrix::zeros(d + 1, d + 1);
            aug.view_mut((0, 0), (d, d)).copy_from(&(&a * dt));
            aug.view_mut((0, d), (d, 1)).copy_from(&(&b * dt));
            let e = expm(&aug)?;
            (e.view((0, 0), (d, d)).into_owned(), e.view((0, d), (d, 1)).into_owned())
        }
    };
    if a_bar.iter().chain(b1.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("discretised LMU matrices are not finite".into()));
    }
    let rho = spectral_radius(&a_bar);
    if !(rho < 1.0 + STABILITY_MARGIN) {
        return Err(Error::Stability(rho));
    }
    let b_bar = DMatrix::from_fn(d, q, |i, _| b1[(i, 0)]);
    Ok((a_bar, b_bar))
}
