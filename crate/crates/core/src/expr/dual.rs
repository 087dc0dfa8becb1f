//! Second-order forward-mode values.
//!
//! A [`Dual2`] carries a value, a gradient of length `k` and the packed lower
//! triangle of a Hessian (`k(k+1)/2` entries), all propagated in a single
//! pass. Storing only one triangle makes the reconstructed Hessian symmetric
//! by construction, bit for bit.
//!
//! Storage is inline for up to 8 variables (enough for a period variable plus
//! the phase coordinates of every shipped example) and spills to the heap
//! beyond that.

use smallvec::SmallVec;

pub const INLINE_VARS: usize = 8;
pub const INLINE_HESS: usize = INLINE_VARS * (INLINE_VARS + 1) / 2;

type Grad = SmallVec<[f64; INLINE_VARS]>;
type Hess = SmallVec<[f64; INLINE_HESS]>;

/// Packed index of Hessian entry `(i, j)` with `i >= j`.
#[inline]
pub fn packed(i: usize, j: usize) -> usize {
    debug_assert!(i >= j);
    i * (i + 1) / 2 + j
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dual2 {
    pub val: f64,
    pub grad: Grad,
    pub hess: Hess,
}

impl Dual2 {
    pub fn constant(c: f64, k: usize) -> Self {
        Dual2 {
            val: c,
            grad: SmallVec::from_elem(0.0, k),
            hess: SmallVec::from_elem(0.0, k * (k + 1) / 2),
        }
    }

    /// Seed for the `i`-th of `k` independent variables at value `x`.
    pub fn variable(i: usize, x: f64, k: usize) -> Self {
        let mut d = Dual2::constant(x, k);
        d.grad[i] = 1.0;
        d
    }

    pub fn n_vars(&self) -> usize {
        self.grad.len()
    }

    pub fn add(&self, o: &Dual2) -> Dual2 {
        Dual2 {
            val: self.val + o.val,
            grad: zip(&self.grad, &o.grad, |a, b| a + b),
            hess: zip(&self.hess, &o.hess, |a, b| a + b),
        }
    }

    pub fn sub(&self, o: &Dual2) -> Dual2 {
        Dual2 {
            val: self.val - o.val,
            grad: zip(&self.grad, &o.grad, |a, b| a - b),
            hess: zip(&self.hess, &o.hess, |a, b| a - b),
        }
    }

    pub fn neg(&self) -> Dual2 {
        Dual2 {
            val: -self.val,
            grad: self.grad.iter().map(|a| -a).collect(),
            hess: self.hess.iter().map(|a| -a).collect(),
        }
    }

    pub fn mul(&self, o: &Dual2) -> Dual2 {
        let k = self.n_vars();
        let mut hess = zip(&self.hess, &o.hess, |_, _| 0.0);
        for i in 0..k {
            for j in 0..=i {
                hess[packed(i, j)] = self.hess[packed(i, j)] * o.val
                    + self.val * o.hess[packed(i, j)]
                    + self.grad[i] * o.grad[j]
                    + self.grad[j] * o.grad[i];
            }
        }
        Dual2 {
            val: self.val * o.val,
            grad: self
                .grad
                .iter()
                .zip(&o.grad)
                .map(|(a, b)| a * o.val + self.val * b)
                .collect(),
            hess,
        }
    }

    /// Quotient rule, derived from `self = q * o`:
    /// `q' = (a' - q b') / b`, `q'' = (a'' - q'⊗b' - b'⊗q' - q b'') / b`.
    pub fn div(&self, o: &Dual2) -> Option<Dual2> {
        if o.val == 0.0 {
            return None;
        }
        let k = self.n_vars();
        let q = self.val / o.val;
        let grad: Grad = self
            .grad
            .iter()
            .zip(&o.grad)
            .map(|(a, b)| (a - q * b) / o.val)
            .collect();
        let mut hess = zip(&self.hess, &o.hess, |_, _| 0.0);
        for i in 0..k {
            for j in 0..=i {
                hess[packed(i, j)] = (self.hess[packed(i, j)]
                    - grad[i] * o.grad[j]
                    - grad[j] * o.grad[i]
                    - q * o.hess[packed(i, j)])
                    / o.val;
            }
        }
        Some(Dual2 { val: q, grad, hess })
    }

    /// Chain rule for a scalar function with first and second derivative
    /// `d1`, `d2` at `self.val`.
    pub fn compose(&self, val: f64, d1: f64, d2: f64) -> Dual2 {
        let k = self.n_vars();
        let mut hess = self.hess.clone();
        for i in 0..k {
            for j in 0..=i {
                hess[packed(i, j)] =
                    d1 * self.hess[packed(i, j)] + d2 * self.grad[i] * self.grad[j];
            }
        }
        Dual2 {
            val,
            grad: self.grad.iter().map(|a| d1 * a).collect(),
            hess,
        }
    }

    /// Integer power by repeated squaring on dual values, so the derivative
    /// propagation is exact for any base, including zero and negatives.
    pub fn powi(&self, n: i32) -> Option<Dual2> {
        let k = self.n_vars();
        if n == 0 {
            return Some(Dual2::constant(1.0, k));
        }
        let mut base = self.clone();
        let mut e = n.unsigned_abs();
        let mut acc: Option<Dual2> = None;
        loop {
            if e & 1 == 1 {
                acc = Some(match acc {
                    None => base.clone(),
                    Some(a) => a.mul(&base),
                });
            }
            e >>= 1;
            if e == 0 {
                break;
            }
            base = base.mul(&base);
        }
        let pos = acc.expect("nonzero exponent");
        if n > 0 {
            Some(pos)
        } else {
            Dual2::constant(1.0, k).div(&pos)
        }
    }

    /// Unpack the Hessian into a full symmetric matrix.
    pub fn hessian_matrix(&self) -> nalgebra::DMatrix<f64> {
        let k = self.n_vars();
        let mut h = nalgebra::DMatrix::zeros(k, k);
        for i in 0..k {
            for j in 0..=i {
                let v = self.hess[packed(i, j)];
                h[(i, j)] = v;
                h[(j, i)] = v;
            }
        }
        h
    }
}

fn zip<A: smallvec::Array<Item = f64>>(
    a: &[f64],
    b: &[f64],
    f: impl Fn(f64, f64) -> f64,
) -> SmallVec<A> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_of_variables_has_unit_cross_derivative() {
        let x = Dual2::variable(0, 3.0, 2);
        let y = Dual2::variable(1, 5.0, 2);
        let p = x.mul(&y);
        assert_eq!(p.val, 15.0);
        assert_eq!(&p.grad[..], &[5.0, 3.0]);
        assert_eq!(p.hess[packed(0, 0)], 0.0);
        assert_eq!(p.hess[packed(1, 0)], 1.0);
        assert_eq!(p.hess[packed(1, 1)], 0.0);
    }

    #[test]
    fn square_via_powi_matches_analytic() {
        let x = Dual2::variable(0, 4.0, 1);
        let s = x.powi(2).unwrap();
        assert_eq!(s.val, 16.0);
        assert_eq!(s.grad[0], 8.0);
        assert_eq!(s.hess[0], 2.0);
    }

    #[test]
    fn reciprocal_power() {
        let x = Dual2::variable(0, 2.0, 1);
        let inv = x.powi(-2).unwrap();
        assert!((inv.val - 0.25).abs() < 1e-15);
        assert!((inv.grad[0] + 0.25).abs() < 1e-15); // -2 x^-3 = -0.25
        assert!((inv.hess[0] - 0.375).abs() < 1e-15); // 6 x^-4 = 0.375
    }

    #[test]
    fn zero_to_a_negative_power_is_rejected() {
        let x = Dual2::constant(0.0, 1);
        assert!(x.powi(-1).is_none());
    }
}
