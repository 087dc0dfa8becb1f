//! Mean-value field of a periodic perturbation: the time average
//! `w_h(xi) = (1/T) int_0^T h(t, xi, 0) dt`, evaluated by Gauss-Legendre
//! quadrature with node doubling until the value stabilizes.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::ForceField;
use crate::error::{Error, Result};
use crate::manifold::ImplicitManifold;

/// Relative stabilization tolerance for node doubling.
const MEAN_TOL: f64 = 1e-12;
/// Starting node count.
const MEAN_MIN_NODES: usize = 32;
/// Node-count budget; exceeding it without stabilizing is an error.
const MEAN_MAX_NODES: usize = 1024;

/// Time average of a periodic field at zero velocity, as a position map.
///
/// The average keeps the width of the underlying field; callers wanting the
/// first block of an augmented map take the leading `m` components.
pub struct MeanField<'a> {
    man: &'a ImplicitManifold,
    field: &'a ForceField,
    period: f64,
    levels: Vec<(Vec<f64>, Vec<f64>)>,
}

impl<'a> MeanField<'a> {
    /// Wrap a periodic field. The field must declare its period and be
    /// expression backed; a lifted field contributes through its
    /// underlying first block.
    pub fn new(man: &'a ImplicitManifold, field: &'a ForceField) -> Result<Self> {
        let period = field.period().ok_or_else(|| {
            Error::invalid("mean-value field needs a field with a declared period")
        })?;
        let field = field.underlying();
        if field.m() != man.m() || field.s() != man.s() {
            return Err(Error::invalid(
                "mean-value field dimensions do not match the manifold",
            ));
        }
        let mut levels = Vec::new();
        let mut n = MEAN_MIN_NODES;
        while n <= MEAN_MAX_NODES {
            let (nodes, weights) = gauss_legendre(n);
            let scaled = nodes
                .iter()
                .map(|&x| 0.5 * period * (x + 1.0))
                .collect::<Vec<_>>();
            levels.push((scaled, weights.iter().map(|&w| 0.5 * w).collect()));
            n *= 2;
        }
        Ok(Self {
            man,
            field,
            period,
            levels,
        })
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn manifold(&self) -> &ImplicitManifold {
        self.man
    }

    /// Width of the averaged field.
    pub fn n_out(&self) -> usize {
        self.field.n_out()
    }

    /// `w_h(xi)`, doubling quadrature nodes until two consecutive levels
    /// agree to `1e-12` relative.
    pub fn eval(&self, xi: &DVector<f64>) -> Result<DVector<f64>> {
        let mut prev: Option<DVector<f64>> = None;
        let mut last_change = f64::INFINITY;
        for (nodes, weights) in &self.levels {
            let mut acc = DVector::zeros(self.n_out());
            for (&t, &w) in nodes.iter().zip(weights) {
                acc += self.field.frozen_value(self.man, t, xi)? * w;
            }
            if let Some(p) = prev {
                last_change = (&acc - &p).amax() / (1.0 + acc.amax());
                if last_change <= MEAN_TOL {
                    return Ok(acc);
                }
            }
            prev = Some(acc);
        }
        Err(Error::QuadratureNotConverged {
            nodes: MEAN_MAX_NODES,
            last_change,
        })
    }

    /// `w_h(xi)` and its position Jacobian, with the same doubling rule
    /// applied to value and Jacobian together.
    pub fn jacobian(&self, xi: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let mut prev: Option<(DVector<f64>, DMatrix<f64>)> = None;
        let mut last_change = f64::INFINITY;
        for (nodes, weights) in &self.levels {
            let mut val = DVector::zeros(self.n_out());
            let mut jac = DMatrix::zeros(self.n_out(), self.man.dim());
            for (&t, &w) in nodes.iter().zip(weights) {
                let (v, j) = self.field.frozen_jacobian(self.man, t, xi)?;
                val += v * w;
                jac += j * w;
            }
            if let Some((pv, pj)) = prev {
                let dv = (&val - &pv).amax() / (1.0 + val.amax());
                let dj = (&jac - &pj).amax() / (1.0 + jac.amax());
                last_change = dv.max(dj);
                if last_change <= MEAN_TOL {
                    return Ok((val, jac));
                }
            }
            prev = Some((val, jac));
        }
        Err(Error::QuadratureNotConverged {
            nodes: MEAN_MAX_NODES,
            last_change,
        })
    }
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
///
/// Roots of the Legendre polynomial `P_n` by Newton iteration from the
/// Chebyshev-like initial guesses, weights `2 / ((1 - x^2) P_n'(x)^2)`.
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let step = p / d;
            x -= step;
            if step.abs() <= 1e-16 * (1.0 + x.abs()) {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// `(P_n(x), P_n'(x))` by the three-term recurrence.
fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        for n in [2usize, 8, 32] {
            let (nodes, weights) = gauss_legendre(n);
            assert!((weights.iter().sum::<f64>() - 2.0).abs() < 1e-14);
            for degree in 0..2 * n {
                let quad: f64 = nodes
                    .iter()
                    .zip(&weights)
                    .map(|(&x, &w)| w * x.powi(degree as i32))
                    .sum();
                let exact = if degree % 2 == 0 {
                    2.0 / (degree as f64 + 1.0)
                } else {
                    0.0
                };
                assert!(
                    (quad - exact).abs() < 1e-13,
                    "n = {n}, degree {degree}: {quad} vs {exact}"
                );
            }
        }
    }

    #[test]
    fn gauss_legendre_handles_oscillatory_integrands() {
        let (nodes, weights) = gauss_legendre(32);
        let quad: f64 = nodes
            .iter()
            .zip(&weights)
            .map(|(&x, &w)| w * (10.0 * x).sin())
            .sum();
        assert!(quad.abs() < 1e-13);
        let quad: f64 = nodes
            .iter()
            .zip(&weights)
            .map(|(&x, &w)| w * (5.0 * x).cos())
            .sum();
        let exact = 2.0 * 5.0_f64.sin() / 5.0;
        assert!((quad - exact).abs() < 1e-13);
    }
}
