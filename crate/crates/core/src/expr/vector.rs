//! Vector-valued expressions: several components over one shared variable
//! list, evaluated together.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::expr::ast::ExprAst;
use crate::expr::parser::parse;

#[derive(Debug, Clone, PartialEq)]
pub struct VectorExpr {
    vars: Vec<String>,
    comps: Vec<ExprAst>,
}

impl VectorExpr {
    pub fn parse_components(sources: &[String], vars: &[String]) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::invalid("vector expression needs at least one component"));
        }
        let comps = sources
            .iter()
            .map(|s| parse(s, vars))
            .collect::<Result<Vec<_>>>()?;
        Ok(VectorExpr {
            vars: vars.to_vec(),
            comps,
        })
    }

    pub fn from_components(comps: Vec<ExprAst>) -> Result<Self> {
        let first = comps
            .first()
            .ok_or_else(|| Error::invalid("vector expression needs at least one component"))?;
        let vars = first.vars().to_vec();
        for c in &comps {
            if c.vars() != vars.as_slice() {
                return Err(Error::invalid(
                    "vector expression components disagree on the variable list",
                ));
            }
        }
        Ok(VectorExpr { vars, comps })
    }

    pub fn n_in(&self) -> usize {
        self.vars.len()
    }

    pub fn n_out(&self) -> usize {
        self.comps.len()
    }

    pub fn vars(&self) -> &[String] {
        &self.vars
    }

    pub fn components(&self) -> &[ExprAst] {
        &self.comps
    }

    pub fn uses_var(&self, i: usize) -> bool {
        self.comps.iter().any(|c| c.uses_var(i))
    }

    pub fn eval_value(&self, point: &[f64]) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(self.n_out());
        for (i, c) in self.comps.iter().enumerate() {
            out[i] = c.eval_value(point)?;
        }
        Ok(out)
    }

    /// Values and the full Jacobian (rows = components).
    pub fn eval_jacobian(&self, point: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (n, k) = (self.n_out(), self.n_in());
        let mut vals = DVector::zeros(n);
        let mut jac = DMatrix::zeros(n, k);
        for (i, c) in self.comps.iter().enumerate() {
            let d = c.eval2_dual(point)?;
            vals[i] = d.val;
            for j in 0..k {
                jac[(i, j)] = d.grad[j];
            }
        }
        Ok((vals, jac))
    }

    /// Values, Jacobian and one Hessian per component.
    #[allow(clippy::type_complexity)]
    pub fn eval_with_hessians(
        &self,
        point: &[f64],
    ) -> Result<(DVector<f64>, DMatrix<f64>, Vec<DMatrix<f64>>)> {
        let (n, k) = (self.n_out(), self.n_in());
        let mut vals = DVector::zeros(n);
        let mut jac = DMatrix::zeros(n, k);
        let mut hessians = Vec::with_capacity(n);
        for (i, c) in self.comps.iter().enumerate() {
            let d = c.eval2_dual(point)?;
            vals[i] = d.val;
            for j in 0..k {
                jac[(i, j)] = d.grad[j];
            }
            hessians.push(d.hessian_matrix());
        }
        Ok((vals, jac, hessians))
    }

    /// Values plus the Jacobian restricted to the `active` variable columns;
    /// the remaining variables are held constant.
    pub fn eval_jacobian_masked(
        &self,
        point: &[f64],
        active: &[usize],
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let n = self.n_out();
        let mut vals = DVector::zeros(n);
        let mut jac = DMatrix::zeros(n, active.len());
        for (i, c) in self.comps.iter().enumerate() {
            let d = c.eval2_dual_masked(point, active)?;
            vals[i] = d.val;
            for j in 0..active.len() {
                jac[(i, j)] = d.grad[j];
            }
        }
        Ok((vals, jac))
    }
}
