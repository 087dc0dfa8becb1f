//! Constrained second-order dynamics: reactive force, the second-order
//! field on the tangent bundle, lifting of first-block acceleration fields,
//! and trajectory integration with constraint stabilization.
//!
//! A curve `xi(t)` on `M = g^{-1}(0)` has `g(xi) = 0` and, after two time
//! derivatives, `g'(xi) xidd = -g''(xi)(eta, eta)` with `eta = xid`. The
//! unique normal vector with that image under `g'` is the reactive force
//!
//! ```text
//! r = (A^T B^{-T} C^{-1} sigma, C^{-1} sigma),   sigma_i = -eta^T H_i eta,
//! ```
//!
//! where `H_i` is the Hessian of the i-th constraint component. The motion
//! under a tangent applied force `phi` is then `xidd = r + phi`, integrated
//! here as a first-order system on `(xi, eta)` with optional post-step
//! projection back onto `M` and its tangent spaces.
//!
//! An acceleration law given only for the first block, `xdd = E(t, xi, eta)`,
//! extends uniquely to an ambient field consistent with the constraint:
//! `ydd = -B^{-1}(A E + g''(eta, eta))`. Integrating that lift directly and
//! integrating the projected second-order equation are two routes to the
//! same motion; the test suite drives both and compares.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::expr::VectorExpr;
use crate::manifold::{phase_vars, ImplicitManifold, JacobianSplit, PhaseState};

/// Scaled tolerance for the runtime tangency check of declared-tangent
/// fields, applied at on-manifold states.
const TANGENCY_TOL: f64 = 1e-8;
/// Slack factor on `on_tol` for accepting initial states.
const STATE_SLACK: f64 = 10.0;

/// How a force field relates to the manifold's tangent spaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tangency {
    /// Full-width field promised to be tangent on `M`; verified at runtime.
    DeclaredTangent,
    /// First-block acceleration only (`n_out = m`); input to [`dae_lift`].
    XOnly,
    /// Full-width ambient acceleration with a normal component (the output
    /// of [`dae_lift`]); exempt from tangency checks.
    Ambient,
}

#[derive(Debug, Clone)]
enum FieldSource {
    Expr(VectorExpr),
    Lifted(Box<ForceField>),
}

/// A force or acceleration field over `(t, xi, eta)`.
#[derive(Debug, Clone)]
pub struct ForceField {
    source: FieldSource,
    m: usize,
    s: usize,
    /// `Some(T)` marks a field that is `T`-periodic in time.
    period: Option<f64>,
    tangency: Tangency,
    /// Apply the orthogonal projection onto `T_xi M` at every evaluation.
    project: bool,
}

impl ForceField {
    /// Build an expression-backed field over the canonical phase variables
    /// `t, x1..xm, y1..ys, u1..um, v1..vs`.
    pub fn from_expr(
        expr: VectorExpr,
        m: usize,
        s: usize,
        period: Option<f64>,
        tangency: Tangency,
        project: bool,
    ) -> Result<Self> {
        let expected = phase_vars(m, s, true);
        if expr.vars() != expected.as_slice() {
            return Err(Error::invalid(format!(
                "force variables must be {:?}, got {:?}",
                expected,
                expr.vars()
            )));
        }
        let want = match tangency {
            Tangency::XOnly => m,
            _ => m + s,
        };
        if expr.n_out() != want {
            return Err(Error::invalid(format!(
                "force has {} component(s), expected {want}",
                expr.n_out()
            )));
        }
        if project && tangency != Tangency::DeclaredTangent {
            return Err(Error::invalid(
                "only full-width tangent fields can be projected",
            ));
        }
        if let Some(t) = period {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::invalid(format!("period must be positive, got {t}")));
            }
        }
        Ok(ForceField {
            source: FieldSource::Expr(expr),
            m,
            s,
            period,
            tangency,
            project,
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn s(&self) -> usize {
        self.s
    }

    pub fn n_out(&self) -> usize {
        match self.tangency {
            Tangency::XOnly => self.m,
            _ => self.m + self.s,
        }
    }

    pub fn period(&self) -> Option<f64> {
        self.period
    }

    pub fn tangency(&self) -> Tangency {
        self.tangency
    }

    pub fn is_projected(&self) -> bool {
        self.project
    }

    /// Evaluate without the optional tangent projection.
    pub fn eval_raw(
        &self,
        man: &ImplicitManifold,
        t: f64,
        xi: &DVector<f64>,
        eta: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        match &self.source {
            FieldSource::Expr(expr) => {
                let mut point = Vec::with_capacity(1 + 2 * (self.m + self.s));
                point.push(t);
                point.extend_from_slice(xi.as_slice());
                point.extend_from_slice(eta.as_slice());
                expr.eval_value(&point)
            }
            FieldSource::Lifted(inner) => {
                let e = inner.eval(man, t, xi, eta)?;
                let (split, hessians) = man.jacobians_with_hessians(xi)?;
                lift_blocks(&split, &hessians, &e, eta)
            }
        }
    }

    /// Evaluate, applying the tangent projection when the field asks for it.
    pub fn eval(
        &self,
        man: &ImplicitManifold,
        t: f64,
        xi: &DVector<f64>,
        eta: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let raw = self.eval_raw(man, t, xi, eta)?;
        if self.project {
            man.tangent_project(xi, &raw)
        } else {
            Ok(raw)
        }
    }

    /// Whether the field depends on time through its expression.
    pub fn is_autonomous(&self) -> bool {
        match &self.source {
            FieldSource::Expr(expr) => !expr.uses_var(0),
            FieldSource::Lifted(inner) => inner.is_autonomous(),
        }
    }

    /// The innermost expression-backed field: the field itself, or the
    /// first-block field a lift was built from. At zero velocity the first
    /// `m` components of a lift equal the underlying field, so position maps
    /// built from frozen values may always work with the underlying field.
    pub fn underlying(&self) -> &ForceField {
        match &self.source {
            FieldSource::Expr(_) => self,
            FieldSource::Lifted(inner) => inner.underlying(),
        }
    }

    /// Copy of this field evaluated through tangent projection at every
    /// call, pairing a semi-explicit run with its projected twin.
    pub fn with_projection(&self) -> ForceField {
        ForceField {
            tangency: Tangency::DeclaredTangent,
            project: true,
            ..self.clone()
        }
    }

    /// Value at zero velocity of the field's continuous extension off `M`,
    /// projection included when the field asks for it. This is the
    /// autonomous position field `xi -> f(t, xi, 0)` whose zeros are the
    /// equilibria of the constrained motion. Unlike [`eval`](Self::eval),
    /// the projection here uses the raw constraint Jacobian with no
    /// invertibility or sign bookkeeping, so the extension can be evaluated
    /// far from `M` during zero searches. Expression-backed fields only.
    pub fn frozen_value(
        &self,
        man: &ImplicitManifold,
        t: f64,
        xi: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let expr = self.expression()?;
        let raw = expr.eval_value(&self.frozen_point(man, t, xi))?;
        if self.project {
            let (_, jac) = man.constraint().eval_jacobian(xi.as_slice())?;
            let z = gram_lu_solve(&jac, &(&jac * &raw))?;
            Ok(&raw - jac.transpose() * z)
        } else {
            Ok(raw)
        }
    }

    /// Value and position Jacobian of [`frozen_value`](Self::frozen_value)
    /// at fixed `t`, differentiating through the tangent projection when the
    /// field is projected.
    pub fn frozen_jacobian(
        &self,
        man: &ImplicitManifold,
        t: f64,
        xi: &DVector<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let expr = self.expression()?;
        let k = man.dim();
        let active: Vec<usize> = (1..=k).collect();
        let (raw, raw_jac) = expr.eval_jacobian_masked(&self.frozen_point(man, t, xi), &active)?;
        if self.project {
            projected_value_jacobian(man, xi, &raw, &raw_jac)
        } else {
            Ok((raw, raw_jac))
        }
    }

    fn expression(&self) -> Result<&VectorExpr> {
        match &self.source {
            FieldSource::Expr(expr) => Ok(expr),
            FieldSource::Lifted(_) => Err(Error::invalid(
                "cannot evaluate a lifted field as a position map; \
                 use the underlying first-block field instead",
            )),
        }
    }

    fn frozen_point(&self, man: &ImplicitManifold, t: f64, xi: &DVector<f64>) -> Vec<f64> {
        let k = man.dim();
        let mut point = Vec::with_capacity(1 + 2 * k);
        point.push(t);
        point.extend_from_slice(xi.as_slice());
        point.resize(1 + 2 * k, 0.0);
        point
    }

    /// Spot-check the declared time period at random on-manifold states.
    pub fn check_periodicity(
        &self,
        man: &ImplicitManifold,
        rng: &mut impl rand::Rng,
        trials: usize,
    ) -> Result<()> {
        let Some(period) = self.period else {
            return Ok(());
        };
        for _ in 0..trials {
            let state = man.sample_state(rng)?;
            let t = rng.gen_range(0.0..period);
            let a = self.eval_raw(man, t, &state.xi, &state.eta)?;
            let b = self.eval_raw(man, t + period, &state.xi, &state.eta)?;
            let gap = (&a - &b).amax();
            if gap > 1e-9 * (1.0 + a.amax()) {
                return Err(Error::invalid(format!(
                    "field declared {period}-periodic but value changes by {gap:.3e} \
                     across one period"
                )));
            }
        }
        Ok(())
    }

    /// Spot-check tangency of a declared-tangent field at random on-manifold
    /// states (a projected field is tangent by construction and is skipped).
    pub fn check_tangency(
        &self,
        man: &ImplicitManifold,
        rng: &mut impl rand::Rng,
        trials: usize,
    ) -> Result<()> {
        if self.tangency != Tangency::DeclaredTangent || self.project {
            return Ok(());
        }
        for _ in 0..trials {
            let state = man.sample_state(rng)?;
            let t = rng.gen_range(0.0..self.period.unwrap_or(1.0));
            let value = self.eval_raw(man, t, &state.xi, &state.eta)?;
            let split = man.jacobians(&state.xi)?;
            let defect = (split.full() * &value).amax();
            if defect > TANGENCY_TOL * (1.0 + value.amax()) {
                return Err(Error::TangencyViolation {
                    what: format!(
                        "declared-tangent field has normal defect {defect:.3e} at a \
                         sampled on-manifold state"
                    ),
                });
            }
        }
        Ok(())
    }
}

/// Solve `(j j^T) x = rhs` for the multipliers of a row-space projection.
fn gram_lu_solve(j: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    (j * j.transpose())
        .lu()
        .solve(rhs)
        .ok_or_else(|| Error::domain("constraint Jacobian loses rank; projection undefined"))
}

/// Value and Jacobian of the projected field `w = phi - J^T (J J^T)^{-1} J phi`
/// given the raw value `phi` and its position Jacobian, with `J = g'(xi)`.
///
/// Writing `z = (J J^T)^{-1} J phi`, the column of `dw` in direction `l` is
/// `d_l phi - (d_l J)^T z - J^T d_l z` where `d_l z` solves
/// `(J J^T) d_l z = (d_l J) phi + J d_l phi - ((d_l J) J^T + J (d_l J)^T) z`
/// and the rows of `d_l J` are the `l`-th rows of the constraint Hessians.
fn projected_value_jacobian(
    man: &ImplicitManifold,
    xi: &DVector<f64>,
    phi: &DVector<f64>,
    phi_jac: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let k = man.dim();
    let s = man.s();
    let (_, jac, hessians) = man.constraint().eval_with_hessians(xi.as_slice())?;
    let gram = &jac * jac.transpose();
    let lu = gram.lu();
    let z = lu
        .solve(&(&jac * phi))
        .ok_or_else(|| Error::domain("constraint Jacobian loses rank; projection undefined"))?;
    let w = phi - jac.transpose() * &z;
    let mut dw = DMatrix::zeros(k, k);
    for l in 0..k {
        let mut dj = DMatrix::zeros(s, k);
        for (i, h) in hessians.iter().enumerate() {
            dj.row_mut(i).copy_from(&h.row(l));
        }
        let dphi = phi_jac.column(l).into_owned();
        let rhs = &dj * phi + &jac * &dphi - (&dj * jac.transpose() + &jac * dj.transpose()) * &z;
        let dz = lu
            .solve(&rhs)
            .ok_or_else(|| Error::domain("constraint Jacobian loses rank; projection undefined"))?;
        let col = dphi - dj.transpose() * &z - jac.transpose() * dz;
        dw.column_mut(l).copy_from(&col);
    }
    Ok((w, dw))
}

/// `sigma_i = -eta^T H_i eta` for the constraint Hessians.
fn sigma_vector(hessians: &[DMatrix<f64>], eta: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(hessians.len(), hessians.iter().map(|h| -eta.dot(&(h * eta))))
}

/// Second block of the lift: `-B^{-1}(A e + g''(eta, eta))`.
fn lift_blocks(
    split: &JacobianSplit,
    hessians: &[DMatrix<f64>],
    e: &DVector<f64>,
    eta: &DVector<f64>,
) -> Result<DVector<f64>> {
    let sigma_g = -sigma_vector(hessians, eta);
    let ydd = -(split.b_inverse() * (&split.a * e + sigma_g));
    let mut out = DVector::zeros(e.len() + ydd.len());
    out.rows_mut(0, e.len()).copy_from(e);
    out.rows_mut(e.len(), ydd.len()).copy_from(&ydd);
    Ok(out)
}

/// Closed-form reactive force `r = (A^T B^{-T} C^{-1} sigma, C^{-1} sigma)`.
pub fn reactive_force(man: &ImplicitManifold, state: &PhaseState) -> Result<DVector<f64>> {
    let (split, hessians) = man.jacobians_with_hessians(&state.xi)?;
    reactive_from_parts(man, &split, &hessians, &state.eta)
}

fn reactive_from_parts(
    man: &ImplicitManifold,
    split: &JacobianSplit,
    hessians: &[DMatrix<f64>],
    eta: &DVector<f64>,
) -> Result<DVector<f64>> {
    let sigma = sigma_vector(hessians, eta);
    let w = split
        .c
        .clone()
        .lu()
        .solve(&sigma)
        .ok_or(Error::SingularB { cond: split.b_cond })?;
    let r_x = split.a.transpose() * split.b_inverse().transpose() * &w;
    let mut r = DVector::zeros(man.dim());
    r.rows_mut(0, man.m()).copy_from(&r_x);
    r.rows_mut(man.m(), man.s()).copy_from(&w);
    Ok(r)
}

/// Independent route to the reactive force: the minimum-norm solution of
/// `g'(xi) r = sigma`, computed as `J^T (J J^T)^{-1} sigma` with its own
/// linear algebra. Kept deliberately separate from [`reactive_force`] so the
/// two can cross-check each other.
pub fn reactive_force_normal_solve(
    man: &ImplicitManifold,
    state: &PhaseState,
) -> Result<DVector<f64>> {
    let (_, jac, hessians) = man.constraint().eval_with_hessians(state.xi.as_slice())?;
    let sigma = sigma_vector(&hessians, &state.eta);
    let gram = &jac * jac.transpose();
    let z = gram.lu().solve(&sigma).ok_or(Error::SingularB {
        cond: f64::INFINITY,
    })?;
    Ok(jac.transpose() * z)
}

/// The first-order form of the constrained motion: returns
/// `(eta, r(xi, eta) + phi(t, xi, eta))`, the velocity and acceleration
/// blocks of the field on the tangent bundle.
pub fn second_order_field(
    man: &ImplicitManifold,
    phi: &ForceField,
    t: f64,
    state: &PhaseState,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if phi.tangency() == Tangency::XOnly {
        return Err(Error::invalid(
            "a first-block-only field must be lifted before it can drive the motion",
        ));
    }
    if phi.tangency() == Tangency::Ambient && !phi.is_projected() {
        return Err(Error::invalid(
            "an ambient acceleration field already contains the reactive part; \
             project it before using it as an applied force",
        ));
    }
    let (g_val, split, hessians) = man.full_eval(&state.xi)?;
    let mut force = phi.eval_raw(man, t, &state.xi, &state.eta)?;
    if phi.is_projected() {
        let j = split.full();
        force = project_tangent_with(&j, &force)?;
    } else if phi.tangency() == Tangency::DeclaredTangent
        && g_val.amax() <= STATE_SLACK * man.on_tol()
    {
        let defect = (split.full() * &force).amax();
        if defect > TANGENCY_TOL * (1.0 + force.amax()) {
            return Err(Error::TangencyViolation {
                what: format!("declared-tangent force has normal defect {defect:.3e}"),
            });
        }
    }
    let r = reactive_from_parts(man, &split, &hessians, &state.eta)?;
    Ok((state.eta.clone(), r + force))
}

fn project_tangent_with(j: &DMatrix<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
    let gram = j * j.transpose();
    let rhs = j * w;
    let z = gram
        .clone()
        .cholesky()
        .map(|ch| ch.solve(&rhs))
        .or_else(|| gram.lu().solve(&rhs))
        .ok_or(Error::SingularB {
            cond: f64::INFINITY,
        })?;
    Ok(w - j.transpose() * z)
}

/// Extend a first-block acceleration law to the full ambient field
/// `(E, -B^{-1}(A E + g''(eta, eta)))`, the unique extension under which
/// the constraint stays satisfied to second order.
pub fn dae_lift(man: &ImplicitManifold, e: ForceField) -> Result<ForceField> {
    if e.tangency() != Tangency::XOnly {
        return Err(Error::invalid(
            "only a first-block acceleration field can be lifted",
        ));
    }
    if e.m() != man.m() || e.s() != man.s() {
        return Err(Error::invalid(
            "field dimensions disagree with the manifold",
        ));
    }
    Ok(ForceField {
        m: e.m,
        s: e.s,
        period: e.period,
        tangency: Tangency::Ambient,
        project: false,
        source: FieldSource::Lifted(Box::new(e)),
    })
}

/// Fixed-step or adaptive integration method.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Classical fourth-order Runge-Kutta with fixed step.
    Rk4Proj,
    /// Dormand-Prince 5(4) with adaptive step control.
    Rk45Proj,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Rk4Proj => "rk4_proj",
            Method::Rk45Proj => "rk45_proj",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "rk4_proj" => Ok(Method::Rk4Proj),
            "rk45_proj" => Ok(Method::Rk45Proj),
            other => Err(Error::invalid(format!(
                "unknown integration method `{other}` (expected rk4_proj or rk45_proj)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct IntegrateOpts {
    /// Step size (rk4) or initial step (rk45).
    pub h: f64,
    pub method: Method,
    /// Project the position onto `M` and the velocity onto the tangent
    /// space after every accepted step.
    pub project: bool,
    /// Relative tolerance for the adaptive controller.
    pub rtol: f64,
    /// Absolute tolerance for the adaptive controller.
    pub atol: f64,
}

impl Default for IntegrateOpts {
    fn default() -> Self {
        IntegrateOpts {
            h: 1e-3,
            method: Method::Rk4Proj,
            project: true,
            rtol: 1e-9,
            atol: 1e-10,
        }
    }
}

/// A sampled solution curve with its constraint diagnostics.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// `(t, state, |g|_inf at the sample)` for every accepted step.
    pub samples: Vec<(f64, PhaseState, f64)>,
    /// Largest constraint residual seen along the curve.
    pub max_g_drift: f64,
    /// Largest tangency defect `|g'(xi) eta|_inf` seen along the curve.
    pub max_tangency_drift: f64,
}

impl Trajectory {
    pub fn end(&self) -> &(f64, PhaseState, f64) {
        self.samples.last().expect("trajectory has at least one sample")
    }

    /// Largest deviation of the position from its time average, measured in
    /// the sup norm: the orbit amplitude used by the continuation runs.
    pub fn amplitude(&self) -> f64 {
        let k = self.samples[0].1.xi.len();
        let mut mean = DVector::zeros(k);
        for (_, state, _) in &self.samples {
            mean += &state.xi;
        }
        mean /= self.samples.len() as f64;
        self.samples
            .iter()
            .map(|(_, state, _)| (&state.xi - &mean).amax())
            .fold(0.0, f64::max)
    }

    /// CSV export: `t,x1..xm,y1..ys,u1..um,v1..vs,g_res_max`.
    pub fn write_csv(&self, m: usize, s: usize, out: &mut impl std::io::Write) -> Result<()> {
        let io_err = |e: std::io::Error| Error::Io {
            path: "<trajectory csv>".into(),
            msg: e.to_string(),
        };
        let mut header = vec!["t".to_string()];
        header.extend(crate::manifold::phase_vars(m, s, false));
        header.push("g_res_max".into());
        writeln!(out, "{}", header.join(",")).map_err(io_err)?;
        for (t, state, g_res) in &self.samples {
            let mut row = Vec::with_capacity(2 + 2 * (m + s));
            row.push(format!("{t:.17e}"));
            row.extend(state.xi.iter().map(|v| format!("{v:.17e}")));
            row.extend(state.eta.iter().map(|v| format!("{v:.17e}")));
            row.push(format!("{g_res:.17e}"));
            writeln!(out, "{}", row.join(",")).map_err(io_err)?;
        }
        Ok(())
    }
}

/// Integrate `xid = eta, etad = accel(t, xi, eta)` from `state0` over
/// `[t0, t1]`. The `accel` closure is typically the acceleration block of
/// [`second_order_field`] or a lifted field's [`ForceField::eval`].
pub fn integrate<F>(
    man: &ImplicitManifold,
    accel: F,
    state0: &PhaseState,
    t0: f64,
    t1: f64,
    opts: &IntegrateOpts,
) -> Result<Trajectory>
where
    F: Fn(f64, &DVector<f64>, &DVector<f64>) -> Result<DVector<f64>>,
{
    if !(t1 > t0) {
        return Err(Error::invalid(format!(
            "integration span must be increasing, got [{t0}, {t1}]"
        )));
    }
    if !(opts.h > 0.0 && opts.h.is_finite()) {
        return Err(Error::invalid(format!("step must be positive, got {}", opts.h)));
    }
    let slack = STATE_SLACK * man.on_tol();
    let res0 = man.residual_norm(&state0.xi)?;
    if res0 > slack {
        return Err(Error::invalid(format!(
            "initial position is off the manifold (|g| = {res0:.3e})"
        )));
    }
    let split0 = man.jacobians(&state0.xi)?;
    let tang0 = (split0.full() * &state0.eta).amax();
    if tang0 > slack * (1.0 + state0.eta.amax()) {
        return Err(Error::TangencyViolation {
            what: format!("initial velocity has normal defect {tang0:.3e}"),
        });
    }

    let mut traj = Trajectory {
        samples: Vec::new(),
        max_g_drift: 0.0,
        max_tangency_drift: 0.0,
    };
    let mut t = t0;
    let mut xi = state0.xi.clone();
    let mut eta = state0.eta.clone();
    record(man, &mut traj, t, &xi, &eta)?;

    match opts.method {
        Method::Rk4Proj => {
            let n_steps = ((t1 - t0) / opts.h).ceil() as usize;
            let n_steps = n_steps.max(1);
            let h = (t1 - t0) / n_steps as f64;
            for i in 0..n_steps {
                let (xi_new, eta_new) =
                    rk4_step(&accel, t, &xi, &eta, h).map_err(|e| e.at_time(t))?;
                xi = xi_new;
                eta = eta_new;
                t = t0 + (i + 1) as f64 * h;
                if opts.project {
                    stabilize(man, &mut xi, &mut eta).map_err(|e| e.at_time(t))?;
                }
                record(man, &mut traj, t, &xi, &eta)?;
            }
        }
        Method::Rk45Proj => {
            let span = t1 - t0;
            let h_floor = 1e-12 * span;
            let mut h = opts.h.min(span);
            while t < t1 {
                h = h.min(t1 - t);
                if h < h_floor {
                    return Err(Error::StepUnderflow {
                        what: "adaptive integration".into(),
                        step: h,
                    });
                }
                let (xi5, eta5, err) =
                    dopri_step(&accel, t, &xi, &eta, h).map_err(|e| e.at_time(t))?;
                let scale = opts.atol
                    + opts.rtol * xi.amax().max(eta.amax()).max(xi5.amax()).max(eta5.amax());
                let ratio = err / scale;
                if ratio <= 1.0 {
                    t += h;
                    xi = xi5;
                    eta = eta5;
                    if opts.project {
                        stabilize(man, &mut xi, &mut eta).map_err(|e| e.at_time(t))?;
                    }
                    record(man, &mut traj, t, &xi, &eta)?;
                }
                let factor = if ratio > 0.0 {
                    (0.9 * ratio.powf(-0.2)).clamp(0.2, 5.0)
                } else {
                    5.0
                };
                h *= factor;
            }
        }
    }
    Ok(traj)
}

fn record(
    man: &ImplicitManifold,
    traj: &mut Trajectory,
    t: f64,
    xi: &DVector<f64>,
    eta: &DVector<f64>,
) -> Result<()> {
    let (g_val, jac) = man.constraint().eval_jacobian(xi.as_slice())?;
    let g_res = g_val.amax();
    let tang = (jac * eta).amax();
    traj.max_g_drift = traj.max_g_drift.max(g_res);
    traj.max_tangency_drift = traj.max_tangency_drift.max(tang);
    traj.samples
        .push((t, PhaseState::new(xi.clone(), eta.clone()), g_res));
    Ok(())
}

fn stabilize(man: &ImplicitManifold, xi: &mut DVector<f64>, eta: &mut DVector<f64>) -> Result<()> {
    let seed = xi.clone();
    *xi = man.project_to_manifold(&seed, &seed)?;
    *eta = man.tangent_project(xi, eta)?;
    Ok(())
}

type Pair = (DVector<f64>, DVector<f64>);

fn rk4_step<F>(accel: &F, t: f64, xi: &DVector<f64>, eta: &DVector<f64>, h: f64) -> Result<Pair>
where
    F: Fn(f64, &DVector<f64>, &DVector<f64>) -> Result<DVector<f64>>,
{
    let a1 = accel(t, xi, eta)?;
    let k1 = (eta.clone(), a1);

    let xi2 = xi + &k1.0 * (h / 2.0);
    let eta2 = eta + &k1.1 * (h / 2.0);
    let k2 = (eta2.clone(), accel(t + h / 2.0, &xi2, &eta2)?);

    let xi3 = xi + &k2.0 * (h / 2.0);
    let eta3 = eta + &k2.1 * (h / 2.0);
    let k3 = (eta3.clone(), accel(t + h / 2.0, &xi3, &eta3)?);

    let xi4 = xi + &k3.0 * h;
    let eta4 = eta + &k3.1 * h;
    let k4 = (eta4.clone(), accel(t + h, &xi4, &eta4)?);

    let xi_new = xi + (&k1.0 + &k2.0 * 2.0 + &k3.0 * 2.0 + &k4.0) * (h / 6.0);
    let eta_new = eta + (&k1.1 + &k2.1 * 2.0 + &k3.1 * 2.0 + &k4.1) * (h / 6.0);
    Ok((xi_new, eta_new))
}

/// One Dormand-Prince 5(4) step; returns the fifth-order result and the
/// sup-norm of the embedded error estimate.
fn dopri_step<F>(
    accel: &F,
    t: f64,
    xi: &DVector<f64>,
    eta: &DVector<f64>,
    h: f64,
) -> Result<(DVector<f64>, DVector<f64>, f64)>
where
    F: Fn(f64, &DVector<f64>, &DVector<f64>) -> Result<DVector<f64>>,
{
    const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
    const A: [[f64; 6]; 7] = [
        [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [
            19372.0 / 6561.0,
            -25360.0 / 2187.0,
            64448.0 / 6561.0,
            -212.0 / 729.0,
            0.0,
            0.0,
        ],
        [
            9017.0 / 3168.0,
            -355.0 / 33.0,
            46732.0 / 5247.0,
            49.0 / 176.0,
            -5103.0 / 18656.0,
            0.0,
        ],
        [
            35.0 / 384.0,
            0.0,
            500.0 / 1113.0,
            125.0 / 192.0,
            -2187.0 / 6784.0,
            11.0 / 84.0,
        ],
    ];
    const B5: [f64; 7] = [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
        0.0,
    ];
    const B4: [f64; 7] = [
        5179.0 / 57600.0,
        0.0,
        7571.0 / 16695.0,
        393.0 / 640.0,
        -92097.0 / 339200.0,
        187.0 / 2100.0,
        1.0 / 40.0,
    ];

    let mut k: Vec<Pair> = Vec::with_capacity(7);
    for stage in 0..7 {
        let mut xi_s = xi.clone();
        let mut eta_s = eta.clone();
        for (j, kj) in k.iter().enumerate() {
            let a = A[stage][j];
            if a != 0.0 {
                xi_s += &kj.0 * (h * a);
                eta_s += &kj.1 * (h * a);
            }
        }
        let a_s = accel(t + C[stage] * h, &xi_s, &eta_s)?;
        k.push((eta_s, a_s));
    }

    let mut xi5 = xi.clone();
    let mut eta5 = eta.clone();
    let mut err_xi = DVector::zeros(xi.len());
    let mut err_eta = DVector::zeros(eta.len());
    for (i, ki) in k.iter().enumerate() {
        if B5[i] != 0.0 {
            xi5 += &ki.0 * (h * B5[i]);
            eta5 += &ki.1 * (h * B5[i]);
        }
        let d = B5[i] - B4[i];
        if d != 0.0 {
            err_xi += &ki.0 * (h * d);
            err_eta += &ki.1 * (h * d);
        }
    }
    Ok((xi5, eta5, err_xi.amax().max(err_eta.amax())))
}
