//! Implicitly defined constraint manifolds.
//!
//! The central object is the zero set `M = g^{-1}(0)` of a smooth map
//! `g: R^m x R^s -> R^s` whose second-block Jacobian `B = d_2 g` is
//! invertible on the working region. Points are written `xi = (x, y)` with
//! `x` the first `m` coordinates. The split Jacobian carries
//!
//! * `A = d_1 g` (s x m), `B = d_2 g` (s x s),
//! * `C = A A^T B^{-T} + B`,
//!
//! and the identity `B^{-1} C = (B^{-1} A)(B^{-1} A)^T + I` makes `B^{-1} C`
//! symmetric positive definite with eigenvalues >= 1; every Jacobian
//! evaluation checks this. The sign of `det B` is constant on a connected
//! admissible region, so it is pinned at the first evaluation and any later
//! disagreement is reported as a sign flip rather than silently absorbed.

use std::sync::atomic::{AtomicI8, Ordering};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::expr::VectorExpr;

/// Default membership tolerance on the constraint residual.
pub const ON_TOL_DEFAULT: f64 = 1e-10;
/// Condition-number ceiling for `B`.
const B_COND_MAX: f64 = 1e12;
/// Relative floor on the smallest singular value of `B`.
const B_SIGMA_FLOOR: f64 = 1e-13;
/// Tolerance for the symmetric-positive-definite check on `B^{-1} C`.
const LEMMA_TOL: f64 = 1e-8;
/// Orthogonality tolerance for the closest-point projection.
const PROJ_ORTH_TOL: f64 = 1e-8;
const PROJ_MAX_ITER: usize = 50;
const CHART_MAX_ITER: usize = 50;
const MAX_BACKTRACK: usize = 20;

/// Position and velocity of a constrained particle.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseState {
    pub xi: DVector<f64>,
    pub eta: DVector<f64>,
}

impl PhaseState {
    pub fn new(xi: DVector<f64>, eta: DVector<f64>) -> Self {
        assert_eq!(xi.len(), eta.len(), "position/velocity dimension mismatch");
        PhaseState { xi, eta }
    }

    pub fn dim(&self) -> usize {
        self.xi.len()
    }
}

/// Split Jacobian of the constraint map at a point, together with the
/// diagnostics used to decide it is trustworthy.
#[derive(Debug, Clone)]
pub struct JacobianSplit {
    /// `d_1 g`, an `s x m` block.
    pub a: DMatrix<f64>,
    /// `d_2 g`, an invertible `s x s` block.
    pub b: DMatrix<f64>,
    /// `A A^T B^{-T} + B`.
    pub c: DMatrix<f64>,
    /// Sign of `det B` at this point.
    pub b_sign: i8,
    /// Condition estimate of `B` (ratio of extreme singular values).
    pub b_cond: f64,
    b_inv: DMatrix<f64>,
}

impl JacobianSplit {
    /// Cached inverse of the second block.
    pub fn b_inverse(&self) -> &DMatrix<f64> {
        &self.b_inv
    }

    /// Full Jacobian `[A | B]`, rows are constraint gradients.
    pub fn full(&self) -> DMatrix<f64> {
        let s = self.b.nrows();
        let m = self.a.ncols();
        let mut j = DMatrix::zeros(s, m + s);
        j.view_mut((0, 0), (s, m)).copy_from(&self.a);
        j.view_mut((0, m), (s, s)).copy_from(&self.b);
        j
    }
}

/// Canonical position variable names `x1..xm, y1..ys`.
pub fn position_vars(m: usize, s: usize) -> Vec<String> {
    let mut names = Vec::with_capacity(m + s);
    for i in 1..=m {
        names.push(format!("x{i}"));
    }
    for j in 1..=s {
        names.push(format!("y{j}"));
    }
    names
}

/// Canonical phase variable names, optionally led by time:
/// `[t,] x1..xm, y1..ys, u1..um, v1..vs`.
pub fn phase_vars(m: usize, s: usize, with_time: bool) -> Vec<String> {
    let mut names = Vec::with_capacity(2 * (m + s) + 1);
    if with_time {
        names.push("t".into());
    }
    names.extend(position_vars(m, s));
    for i in 1..=m {
        names.push(format!("u{i}"));
    }
    for j in 1..=s {
        names.push(format!("v{j}"));
    }
    names
}

pub struct ImplicitManifold {
    g: VectorExpr,
    m: usize,
    s: usize,
    domain: Vec<(f64, f64)>,
    on_tol: f64,
    chart_seed: DVector<f64>,
    /// 0 until the first Jacobian evaluation, then the sign of `det B`.
    pinned_b_sign: AtomicI8,
}

impl Clone for ImplicitManifold {
    fn clone(&self) -> Self {
        ImplicitManifold {
            g: self.g.clone(),
            m: self.m,
            s: self.s,
            domain: self.domain.clone(),
            on_tol: self.on_tol,
            chart_seed: self.chart_seed.clone(),
            pinned_b_sign: AtomicI8::new(self.pinned_b_sign.load(Ordering::Relaxed)),
        }
    }
}

impl std::fmt::Debug for ImplicitManifold {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ImplicitManifold")
            .field("m", &self.m)
            .field("s", &self.s)
            .field("domain", &self.domain)
            .field("on_tol", &self.on_tol)
            .finish_non_exhaustive()
    }
}

impl ImplicitManifold {
    pub fn new(g: VectorExpr, m: usize, s: usize, domain: Vec<(f64, f64)>) -> Result<Self> {
        if m == 0 || s == 0 {
            return Err(Error::invalid("both blocks need at least one coordinate"));
        }
        if g.n_out() != s {
            return Err(Error::invalid(format!(
                "constraint map has {} component(s), expected s = {s}",
                g.n_out()
            )));
        }
        let expected = position_vars(m, s);
        if g.vars() != expected.as_slice() {
            return Err(Error::invalid(format!(
                "constraint variables must be {:?}, got {:?}",
                expected,
                g.vars()
            )));
        }
        if domain.len() != m + s {
            return Err(Error::invalid(format!(
                "domain box has {} interval(s), expected {}",
                domain.len(),
                m + s
            )));
        }
        for (lo, hi) in &domain {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::invalid(format!(
                    "degenerate domain interval [{lo}, {hi}]"
                )));
            }
        }
        Ok(ImplicitManifold {
            g,
            m,
            s,
            domain,
            on_tol: ON_TOL_DEFAULT,
            chart_seed: DVector::zeros(s),
            pinned_b_sign: AtomicI8::new(0),
        })
    }

    pub fn with_on_tol(mut self, on_tol: f64) -> Self {
        self.on_tol = on_tol;
        self
    }

    pub fn with_chart_seed(mut self, seed: DVector<f64>) -> Self {
        assert_eq!(seed.len(), self.s, "chart seed has wrong length");
        self.chart_seed = seed;
        self
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn s(&self) -> usize {
        self.s
    }

    /// Ambient dimension `k = m + s`.
    pub fn dim(&self) -> usize {
        self.m + self.s
    }

    pub fn on_tol(&self) -> f64 {
        self.on_tol
    }

    pub fn constraint(&self) -> &VectorExpr {
        &self.g
    }

    pub fn domain(&self) -> &[(f64, f64)] {
        &self.domain
    }

    pub fn chart_seed(&self) -> &DVector<f64> {
        &self.chart_seed
    }

    pub fn in_domain(&self, xi: &DVector<f64>) -> bool {
        xi.iter()
            .zip(&self.domain)
            .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    /// Sign of `det B` pinned at the first Jacobian evaluation, if any.
    pub fn pinned_b_sign(&self) -> Option<i8> {
        match self.pinned_b_sign.load(Ordering::SeqCst) {
            0 => None,
            v => Some(v),
        }
    }

    pub fn residual(&self, xi: &DVector<f64>) -> Result<DVector<f64>> {
        self.g.eval_value(xi.as_slice())
    }

    pub fn residual_norm(&self, xi: &DVector<f64>) -> Result<f64> {
        Ok(self.residual(xi)?.amax())
    }

    /// Membership test `|g(xi)|_inf <= on_tol`.
    pub fn contains(&self, xi: &DVector<f64>) -> Result<bool> {
        Ok(self.residual_norm(xi)? <= self.on_tol)
    }

    /// Split Jacobian with invertibility, orientation and definiteness
    /// checks. See the module docs for what is verified.
    pub fn jacobians(&self, xi: &DVector<f64>) -> Result<JacobianSplit> {
        let (_, jac) = self.g.eval_jacobian(xi.as_slice())?;
        self.split_checked(jac)
    }

    /// Split Jacobian plus one Hessian per constraint component, from a
    /// single forward pass.
    pub fn jacobians_with_hessians(
        &self,
        xi: &DVector<f64>,
    ) -> Result<(JacobianSplit, Vec<DMatrix<f64>>)> {
        let (_, jac, hessians) = self.g.eval_with_hessians(xi.as_slice())?;
        Ok((self.split_checked(jac)?, hessians))
    }

    /// Residual, split Jacobian and Hessians together, from a single
    /// forward pass.
    #[allow(clippy::type_complexity)]
    pub fn full_eval(
        &self,
        xi: &DVector<f64>,
    ) -> Result<(DVector<f64>, JacobianSplit, Vec<DMatrix<f64>>)> {
        let (val, jac, hessians) = self.g.eval_with_hessians(xi.as_slice())?;
        Ok((val, self.split_checked(jac)?, hessians))
    }

    fn split_checked(&self, jac: DMatrix<f64>) -> Result<JacobianSplit> {
        let (m, s) = (self.m, self.s);
        let a = jac.view((0, 0), (s, m)).into_owned();
        let b = jac.view((0, m), (s, s)).into_owned();

        let svd = b.clone().svd(false, false);
        let sigma_max = svd.singular_values.max();
        let sigma_min = svd.singular_values.min();
        let b_cond = if sigma_min > 0.0 {
            sigma_max / sigma_min
        } else {
            f64::INFINITY
        };
        if sigma_min <= B_SIGMA_FLOOR * (1.0 + sigma_max) || b_cond > B_COND_MAX {
            return Err(Error::SingularB { cond: b_cond });
        }

        let det = b.determinant();
        let sign: i8 = if det > 0.0 { 1 } else { -1 };
        match self
            .pinned_b_sign
            .compare_exchange(0, sign, Ordering::SeqCst, Ordering::SeqCst)
        {
            Ok(_) => {}
            Err(pinned) if pinned == sign => {}
            Err(pinned) => {
                return Err(Error::SignFlip {
                    pinned,
                    found: sign,
                })
            }
        }

        let b_inv = b
            .clone()
            .try_inverse()
            .ok_or(Error::SingularB { cond: b_cond })?;
        let c = &a * a.transpose() * b_inv.transpose() + &b;

        // B^{-1} C = (B^{-1} A)(B^{-1} A)^T + I must be symmetric with
        // eigenvalues >= 1; a violation means the split can no longer be
        // trusted numerically, which we classify with the B diagnostics.
        let bc = &b_inv * &c;
        let scale = 1.0 + bc.amax();
        let sym_defect = (&bc - bc.transpose()).amax();
        if sym_defect > LEMMA_TOL * scale {
            return Err(Error::SingularB { cond: b_cond });
        }
        let sym = (&bc + bc.transpose()) * 0.5;
        let min_eig = sym
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        if min_eig < 1.0 - LEMMA_TOL * scale {
            return Err(Error::SingularB { cond: b_cond });
        }

        Ok(JacobianSplit {
            a,
            b,
            c,
            b_sign: sign,
            b_cond,
            b_inv,
        })
    }

    /// Orthogonal splitting `w = tangent + normal` at `xi`, where the
    /// tangent part lies in `ker g'(xi)` and the normal part in the row
    /// space of `g'(xi)`.
    pub fn split_projection(
        &self,
        xi: &DVector<f64>,
        w: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let split = self.jacobians(xi)?;
        let j = split.full();
        let normal = rowspace_component(&j, w)?;
        Ok((w - &normal, normal))
    }

    pub fn tangent_project(&self, xi: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.split_projection(xi, w)?.0)
    }

    pub fn normal_project(&self, xi: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.split_projection(xi, w)?.1)
    }

    /// Closest point of `M` to `p`, seeded by a known point on the current
    /// sheet. Gauss-Newton steps in the row space of `g'` pull the iterate
    /// onto the zero set; a Newton polish of the stationarity system
    /// `(q - p - g'(q)^T mu, g(q)) = 0` then enforces that `q - p` is
    /// normal to `T_q M`, far from `M` as well as near it.
    pub fn project_to_manifold(
        &self,
        p: &DVector<f64>,
        seed: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        if self.residual_norm(p)? <= self.on_tol {
            return Ok(p.clone());
        }
        let escape = 1e6 * (1.0 + p.amax());
        let mut q = p.clone();
        let mut res = self.residual(&q)?;

        // Warm start: plain Gauss-Newton toward the zero set.
        for _ in 0..8 {
            if res.amax() <= 1e-3 {
                break;
            }
            let split = self.jacobians(&q)?;
            let j = split.full();
            let step = rowspace_solve(&j, &res)?;
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..MAX_BACKTRACK {
                let trial = &q - &step * alpha;
                if let Ok(r) = self.residual(&trial) {
                    if r.amax() < res.amax() {
                        q = trial;
                        res = r;
                        accepted = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if !accepted || q.amax() > escape {
                // Diverging from a far-away start; fall back to the seed,
                // which is on the sheet the caller cares about.
                q = seed.clone();
                break;
            }
        }

        // Stationarity polish.
        let k = self.dim();
        let s = self.s;
        let split = self.jacobians(&q)?;
        let j = split.full();
        let mut mu = rowspace_multipliers(&j, &(&q - p))?;
        let mut best = f64::INFINITY;
        for iter in 0..PROJ_MAX_ITER {
            let (split, hessians) = self.jacobians_with_hessians(&q)?;
            let j = split.full();
            let res = self.residual(&q)?;
            let stat = &q - p - j.transpose() * &mu;
            let norm = stat.amax().max(res.amax());

            if res.amax() <= self.on_tol {
                let diff = &q - p;
                let tangential = (&diff - rowspace_component(&j, &diff)?).norm();
                if tangential <= PROJ_ORTH_TOL * (1.0 + diff.norm()) {
                    return Ok(q);
                }
            }

            // Assemble the KKT Jacobian [[I - sum mu_i H_i, -J^T], [J, 0]].
            let mut kkt = DMatrix::zeros(k + s, k + s);
            let mut top_left = DMatrix::identity(k, k);
            for (i, h) in hessians.iter().enumerate() {
                top_left -= h * mu[i];
            }
            kkt.view_mut((0, 0), (k, k)).copy_from(&top_left);
            kkt.view_mut((0, k), (k, s)).copy_from(&(-j.transpose()));
            kkt.view_mut((k, 0), (s, k)).copy_from(&j);
            let mut rhs = DVector::zeros(k + s);
            rhs.rows_mut(0, k).copy_from(&(-&stat));
            rhs.rows_mut(k, s).copy_from(&(-&res));
            let delta = kkt.lu().solve(&rhs).ok_or(Error::NoConvergence {
                what: "manifold projection (singular stationarity system)".into(),
                iters: iter,
            })?;

            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..MAX_BACKTRACK {
                let q_trial = &q + delta.rows(0, k) * alpha;
                let mu_trial = &mu + delta.rows(k, s) * alpha;
                if let (Ok(r), Ok(split)) = (self.residual(&q_trial), self.jacobians(&q_trial)) {
                    let stat_t = &q_trial - p - split.full().transpose() * &mu_trial;
                    let norm_t = stat_t.amax().max(r.amax());
                    if norm_t < norm * (1.0 - 1e-4 * alpha) || norm_t < best * 0.9 {
                        q = q_trial;
                        mu = mu_trial;
                        best = best.min(norm_t);
                        accepted = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if !accepted || q.amax() > escape {
                return Err(Error::NoConvergence {
                    what: "manifold projection".into(),
                    iters: iter,
                });
            }
        }
        Err(Error::NoConvergence {
            what: "manifold projection".into(),
            iters: PROJ_MAX_ITER,
        })
    }

    /// Solve `g(x, y) = 0` for `y` at fixed `x` by damped Newton on the
    /// second block, staying on the sheet selected by `y_seed`. Steps are
    /// capped so an iterate cannot vault across a singular locus of `B`
    /// into a neighboring sheet.
    pub fn chart_solve_y(&self, x: &DVector<f64>, y_seed: &DVector<f64>) -> Result<DVector<f64>> {
        assert_eq!(x.len(), self.m, "chart input has wrong length");
        assert_eq!(y_seed.len(), self.s, "chart seed has wrong length");
        let mut y = y_seed.clone();
        let step_cap = 0.5 * (1.0 + y_seed.amax());
        let mut point = DVector::zeros(self.dim());
        point.rows_mut(0, self.m).copy_from(x);

        for iter in 0..CHART_MAX_ITER {
            point.rows_mut(self.m, self.s).copy_from(&y);
            let res = self.residual(&point)?;
            if res.amax() <= self.on_tol {
                return Ok(y);
            }
            let split = self.jacobians(&point)?;
            let mut step = split
                .b
                .clone()
                .lu()
                .solve(&res)
                .ok_or(Error::SingularB { cond: split.b_cond })?;
            let len = step.amax();
            if len > step_cap {
                step *= step_cap / len;
            }
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..MAX_BACKTRACK {
                let y_trial = &y - &step * alpha;
                point.rows_mut(self.m, self.s).copy_from(&y_trial);
                if let Ok(r) = self.residual(&point) {
                    if r.amax() < res.amax() {
                        y = y_trial;
                        accepted = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if !accepted {
                return Err(Error::NoConvergence {
                    what: "chart solve".into(),
                    iters: iter,
                });
            }
        }
        Err(Error::NoConvergence {
            what: "chart solve".into(),
            iters: CHART_MAX_ITER,
        })
    }

    /// Velocity completion: the unique `v` making `(u, v)` tangent at `xi`,
    /// namely `v = -B^{-1} A u`.
    pub fn complete_velocity(&self, xi: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        assert_eq!(u.len(), self.m, "velocity head has wrong length");
        let split = self.jacobians(xi)?;
        Ok(-(split.b_inverse() * &split.a * u))
    }

    /// A quasi-random on-manifold phase state: `x` uniform in the domain
    /// box, `y` from the chart solve, velocity a tangent-projected uniform
    /// vector. Retries a few nearby `x` draws when the chart solve fails.
    pub fn sample_state(&self, rng: &mut impl rand::Rng) -> Result<PhaseState> {
        for _ in 0..32 {
            let mut xi = DVector::zeros(self.dim());
            for i in 0..self.m {
                let (lo, hi) = self.domain[i];
                xi[i] = rng.gen_range(lo..hi);
            }
            let x = xi.rows(0, self.m).into_owned();
            let Ok(y) = self.chart_solve_y(&x, &self.chart_seed) else {
                continue;
            };
            xi.rows_mut(self.m, self.s).copy_from(&y);
            if !self.in_domain(&xi) {
                continue;
            }
            let w = DVector::from_fn(self.dim(), |_, _| rng.gen_range(-1.0..1.0));
            let Ok(eta) = self.tangent_project(&xi, &w) else {
                continue;
            };
            return Ok(PhaseState::new(xi, eta));
        }
        Err(Error::NoConvergence {
            what: "on-manifold sampling".into(),
            iters: 32,
        })
    }
}

/// Solve `(j j^T) z = rhs`, Cholesky first, LU as a fallback.
fn gram_solve(j: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let gram = j * j.transpose();
    gram.clone()
        .cholesky()
        .map(|ch| ch.solve(rhs))
        .or_else(|| gram.lu().solve(rhs))
        .ok_or(Error::SingularB {
            cond: f64::INFINITY,
        })
}

/// Component of `w` in the row space of `j`: `j^T (j j^T)^{-1} j w`.
fn rowspace_component(j: &DMatrix<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(j.transpose() * gram_solve(j, &(j * w))?)
}

/// Minimum-norm solution of `j delta = res` (the Gauss-Newton step).
fn rowspace_solve(j: &DMatrix<f64>, res: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(j.transpose() * gram_solve(j, res)?)
}

/// Multipliers `mu` with `j^T mu` the row-space component of `d`.
fn rowspace_multipliers(j: &DMatrix<f64>, d: &DVector<f64>) -> Result<DVector<f64>> {
    gram_solve(j, &(j * d))
}
