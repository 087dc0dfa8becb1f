//! Expression evaluation: plain values and one-pass second-order derivatives.
//!
//! Two walkers share the domain rules. The value walker is the cheap path
//! used for boundary sampling and energy logging; the dual walker propagates
//! gradient and Hessian together and backs every Jacobian in the crate.
//!
//! Powers with a literal integer exponent are evaluated by repeated
//! multiplication, so they are defined for bases of any sign; all other
//! exponents go through `exp(b log a)` and require a positive base.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::expr::ast::{BinOp, ExprAst, Node, UnaryFn};
use crate::expr::dual::Dual2;

/// A literal exponent (possibly behind unary minuses) that is an integer of
/// modest size, evaluated exactly.
fn as_int_exponent(node: &Node) -> Option<i32> {
    fn literal(node: &Node) -> Option<f64> {
        match node {
            Node::Num(c) => Some(*c),
            Node::Unary(UnaryFn::Neg, a) => literal(a).map(|v| -v),
            _ => None,
        }
    }
    let c = literal(node)?;
    (c.fract() == 0.0 && c.abs() <= 64.0).then_some(c as i32)
}

fn unary_value(func: UnaryFn, a: f64) -> Result<f64> {
    Ok(match func {
        UnaryFn::Neg => -a,
        UnaryFn::Sin => a.sin(),
        UnaryFn::Cos => a.cos(),
        UnaryFn::Tan => a.tan(),
        UnaryFn::Exp => a.exp(),
        UnaryFn::Log => {
            if a <= 0.0 {
                return Err(Error::domain(format!("log of non-positive value {a}")));
            }
            a.ln()
        }
        UnaryFn::Sqrt => {
            if a < 0.0 {
                return Err(Error::domain(format!("sqrt of negative value {a}")));
            }
            a.sqrt()
        }
        UnaryFn::Abs => a.abs(),
    })
}

fn value_node(node: &Node, point: &[f64]) -> Result<f64> {
    match node {
        Node::Num(c) => Ok(*c),
        Node::Var(i) => Ok(point[*i]),
        Node::Unary(func, a) => unary_value(*func, value_node(a, point)?),
        Node::Binary(op, a, b) => {
            let x = value_node(a, point)?;
            match op {
                BinOp::Add => Ok(x + value_node(b, point)?),
                BinOp::Sub => Ok(x - value_node(b, point)?),
                BinOp::Mul => Ok(x * value_node(b, point)?),
                BinOp::Div => {
                    let y = value_node(b, point)?;
                    if y == 0.0 {
                        return Err(Error::domain("division by zero"));
                    }
                    Ok(x / y)
                }
                BinOp::Pow => {
                    if let Some(n) = as_int_exponent(b) {
                        if x == 0.0 && n < 0 {
                            return Err(Error::domain("zero base with negative exponent"));
                        }
                        return Ok(x.powi(n));
                    }
                    let y = value_node(b, point)?;
                    if x <= 0.0 {
                        return Err(Error::domain(format!(
                            "power with non-positive base {x} and non-integer exponent"
                        )));
                    }
                    Ok(x.powf(y))
                }
            }
        }
    }
}

fn dual_node(node: &Node, vars: &[Dual2], k: usize) -> Result<Dual2> {
    match node {
        Node::Num(c) => Ok(Dual2::constant(*c, k)),
        Node::Var(i) => Ok(vars[*i].clone()),
        Node::Unary(func, a) => {
            let d = dual_node(a, vars, k)?;
            let v = d.val;
            Ok(match func {
                UnaryFn::Neg => d.neg(),
                UnaryFn::Sin => d.compose(v.sin(), v.cos(), -v.sin()),
                UnaryFn::Cos => d.compose(v.cos(), -v.sin(), -v.cos()),
                UnaryFn::Tan => {
                    let t = v.tan();
                    let sec2 = 1.0 + t * t;
                    d.compose(t, sec2, 2.0 * t * sec2)
                }
                UnaryFn::Exp => {
                    let e = v.exp();
                    d.compose(e, e, e)
                }
                UnaryFn::Log => {
                    if v <= 0.0 {
                        return Err(Error::domain(format!("log of non-positive value {v}")));
                    }
                    d.compose(v.ln(), 1.0 / v, -1.0 / (v * v))
                }
                UnaryFn::Sqrt => {
                    if v < 0.0 {
                        return Err(Error::domain(format!("sqrt of negative value {v}")));
                    }
                    if v == 0.0 {
                        return Err(Error::domain("sqrt derivative at zero"));
                    }
                    let s = v.sqrt();
                    d.compose(s, 0.5 / s, -0.25 / (s * v))
                }
                UnaryFn::Abs => {
                    if v == 0.0 {
                        return Err(Error::NonSmoothPoint {
                            what: "abs at zero".into(),
                        });
                    }
                    let sign = if v > 0.0 { 1.0 } else { -1.0 };
                    d.compose(v.abs(), sign, 0.0)
                }
            })
        }
        Node::Binary(op, a, b) => {
            let x = dual_node(a, vars, k)?;
            match op {
                BinOp::Add => Ok(x.add(&dual_node(b, vars, k)?)),
                BinOp::Sub => Ok(x.sub(&dual_node(b, vars, k)?)),
                BinOp::Mul => Ok(x.mul(&dual_node(b, vars, k)?)),
                BinOp::Div => {
                    let y = dual_node(b, vars, k)?;
                    x.div(&y).ok_or_else(|| Error::domain("division by zero"))
                }
                BinOp::Pow => {
                    if let Some(n) = as_int_exponent(b) {
                        return x.powi(n).ok_or_else(|| {
                            Error::domain("zero base with negative exponent")
                        });
                    }
                    let y = dual_node(b, vars, k)?;
                    if x.val <= 0.0 {
                        return Err(Error::domain(format!(
                            "power with non-positive base {} and non-integer exponent",
                            x.val
                        )));
                    }
                    // a^b = exp(b log a); composing existing rules keeps the
                    // second-order propagation correct with no extra algebra.
                    let ln = x.compose(x.val.ln(), 1.0 / x.val, -1.0 / (x.val * x.val));
                    let prod = y.mul(&ln);
                    let e = prod.val.exp();
                    Ok(prod.compose(e, e, e))
                }
            }
        }
    }
}

impl ExprAst {
    /// Value at `point` (ordered like [`ExprAst::vars`]).
    pub fn eval_value(&self, point: &[f64]) -> Result<f64> {
        assert_eq!(
            point.len(),
            self.n_vars(),
            "evaluation point has wrong length"
        );
        value_node(self.root(), point)
    }

    /// Value, gradient and Hessian at `point` in a single forward pass. The
    /// Hessian is symmetric by construction (both triangles are copies of
    /// the same packed storage).
    pub fn eval2(&self, point: &[f64]) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        let d = self.eval2_dual(point)?;
        Ok((
            d.val,
            DVector::from_iterator(self.n_vars(), d.grad.iter().copied()),
            d.hessian_matrix(),
        ))
    }

    /// Value and gradient; a thin wrapper over the dual walker.
    pub fn eval_grad(&self, point: &[f64]) -> Result<(f64, DVector<f64>)> {
        let d = self.eval2_dual(point)?;
        Ok((
            d.val,
            DVector::from_iterator(self.n_vars(), d.grad.iter().copied()),
        ))
    }

    pub(crate) fn eval2_dual(&self, point: &[f64]) -> Result<Dual2> {
        let k = self.n_vars();
        assert_eq!(point.len(), k, "evaluation point has wrong length");
        let vars: Vec<Dual2> = point
            .iter()
            .enumerate()
            .map(|(i, &x)| Dual2::variable(i, x, k))
            .collect();
        dual_node(self.root(), &vars, k)
    }

    /// Dual evaluation with derivatives seeded only for `active` variables;
    /// the rest enter as constants. Used where a map depends on a subset of
    /// a larger canonical variable list (e.g. time and velocities frozen).
    pub(crate) fn eval2_dual_masked(&self, point: &[f64], active: &[usize]) -> Result<Dual2> {
        assert_eq!(point.len(), self.n_vars(), "evaluation point has wrong length");
        let k = active.len();
        let vars: Vec<Dual2> = point
            .iter()
            .enumerate()
            .map(|(i, &x)| match active.iter().position(|&a| a == i) {
                Some(slot) => Dual2::variable(slot, x, k),
                None => Dual2::constant(x, k),
            })
            .collect();
        dual_node(self.root(), &vars, k)
    }
}
