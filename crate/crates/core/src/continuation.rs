//! Branch tracing for periodically forced motion on the manifold.
//!
//! A `T`-periodic orbit of the forced system is a fixed point of the
//! period map in chart coordinates `(x, u)`: positions are reduced to
//! their first block through the constraint, velocities to their first
//! block through tangency. [`shoot_residual`] measures the periodicity
//! defect of one integration, [`newton_correct`] solves for a fixed point
//! at a given forcing strength, and [`trace_branch`] follows the family
//! that emanates from an equilibrium in the forcing strength `lambda` by
//! pseudo-arclength continuation, so folds in `lambda` are traversed
//! rather than fatal.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{
    integrate, second_order_field, ForceField, IntegrateOpts, Tangency, Trajectory,
};
use crate::error::{Error, Result};
use crate::expr::VectorExpr;
use crate::manifold::{phase_vars, ImplicitManifold, PhaseState};

/// Periodicity defect below which a shooting iterate is accepted.
pub const SHOOT_TOL: f64 = 1e-8;
/// Relative step for finite-difference shooting Jacobians.
const FD_STEP: f64 = 1e-6;
/// Iteration cap for the shooting Newton corrector.
const MAX_CORRECTOR: usize = 25;
/// Singular-value ratio below which the shooting Jacobian is reported as
/// singular instead of being inverted. Healthy period maps keep singular
/// values of order one; at a linearization resonance only the
/// finite-difference contamination of order `FD_STEP` survives.
const SINGULAR_TOL: f64 = 1e-4;
/// Forcing-derivative norm below which the continuation is degenerate
/// (the residual does not respond to `lambda` at all).
const LAMBDA_RESPONSE_TOL: f64 = 1e-10;
/// Constraint residual allowed at an accepted orbit endpoint, as a
/// multiple of the manifold's on-tolerance.
const ENDPOINT_G_FACTOR: f64 = 10.0;
/// Allowed gap between the dependent position and velocity blocks at the
/// two ends of an accepted orbit.
const AMBIENT_PERIOD_TOL: f64 = 1e-7;
/// Tolerance on `lambda` for treating a continuation point as sitting on
/// the `lambda = 0` wall.
const LAMBDA_WALL: f64 = 1e-12;

/// How the forcing enters the equations of motion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scenario {
    /// Full-width force added to the autonomous field and the reaction.
    Applied,
    /// First-block acceleration law; the dependent block follows from the
    /// constraint, as in a semi-explicit second-order system.
    Lifted,
}

/// A forced periodic-orbit problem on an implicit manifold: autonomous
/// force `f` (absent for the perturbation-only scenario), `T`-periodic
/// forcing `h` scaled by the continuation parameter, and a chart anchor
/// fixing the sheet of the constraint used for the reduction.
#[derive(Debug)]
pub struct PeriodicProblem {
    manifold: ImplicitManifold,
    f: Option<ForceField>,
    h: ForceField,
    period: f64,
    chart_seed: PhaseState,
    shoot_opts: IntegrateOpts,
    scenario: Scenario,
    zero_force: ForceField,
}

impl PeriodicProblem {
    /// Assemble and validate a problem. The forcing must declare the
    /// period `t_period`; a first-block forcing pairs only with a
    /// first-block force, a full-width forcing only with a full-width one.
    /// Both fields are spot-checked for their declared tangency and
    /// periodicity, and the chart anchor must sit on the manifold.
    pub fn new(
        manifold: ImplicitManifold,
        f: Option<ForceField>,
        h: ForceField,
        t_period: f64,
        chart_seed: PhaseState,
        shoot_opts: IntegrateOpts,
    ) -> Result<Self> {
        if !(t_period > 0.0 && t_period.is_finite()) {
            return Err(Error::invalid(format!(
                "period must be positive, got {t_period}"
            )));
        }
        match h.period() {
            Some(p) if (p - t_period).abs() <= 1e-12 * t_period => {}
            Some(p) => {
                return Err(Error::invalid(format!(
                    "forcing declares period {p} but the problem integrates over {t_period}"
                )));
            }
            None => {
                return Err(Error::invalid(
                    "forcing must declare the period it is periodic in",
                ));
            }
        }
        let scenario = if h.tangency() == Tangency::XOnly {
            Scenario::Lifted
        } else {
            Scenario::Applied
        };
        if let Some(field) = &f {
            match (scenario, field.tangency()) {
                (Scenario::Lifted, Tangency::XOnly)
                | (Scenario::Applied, Tangency::DeclaredTangent)
                | (Scenario::Applied, Tangency::Ambient) => {}
                (Scenario::Lifted, _) => {
                    return Err(Error::invalid(
                        "a first-block forcing drives the motion through the constraint; \
                         pair it with a first-block force or with none",
                    ));
                }
                (Scenario::Applied, Tangency::XOnly) => {
                    return Err(Error::invalid(
                        "a first-block force needs a first-block forcing; lift the \
                         force before combining it with a full-width one",
                    ));
                }
            }
            if !field.is_autonomous() {
                return Err(Error::invalid(
                    "the autonomous force must not depend on time",
                ));
            }
            if field.m() != manifold.m() || field.s() != manifold.s() {
                return Err(Error::invalid(
                    "force dimensions disagree with the manifold",
                ));
            }
        }
        if h.m() != manifold.m() || h.s() != manifold.s() {
            return Err(Error::invalid(
                "forcing dimensions disagree with the manifold",
            ));
        }
        if manifold.residual_norm(&chart_seed.xi)? > manifold.on_tol() {
            return Err(Error::invalid("chart anchor is off the manifold"));
        }
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0x5eed_c0a7);
        h.check_periodicity(&manifold, &mut rng, 5)?;
        h.check_tangency(&manifold, &mut rng, 5)?;
        if let Some(field) = &f {
            field.check_tangency(&manifold, &mut rng, 5)?;
        }
        let zero = VectorExpr::parse_components(
            &vec!["0".to_string(); manifold.m() + manifold.s()],
            &phase_vars(manifold.m(), manifold.s(), true),
        )?;
        let zero_force = ForceField::from_expr(
            zero,
            manifold.m(),
            manifold.s(),
            None,
            Tangency::DeclaredTangent,
            false,
        )?;
        Ok(PeriodicProblem {
            manifold,
            f,
            h,
            period: t_period,
            chart_seed,
            shoot_opts,
            scenario,
            zero_force,
        })
    }

    pub fn manifold(&self) -> &ImplicitManifold {
        &self.manifold
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn chart_seed(&self) -> &PhaseState {
        &self.chart_seed
    }

    /// Chart dimension of the shooting unknowns `(x0, u0)`.
    pub fn chart_dim(&self) -> usize {
        2 * self.manifold.m()
    }

    /// Reconstruct the full phase state of a chart initial condition: the
    /// dependent position block by solving the constraint on the anchored
    /// sheet, the dependent velocity block by tangency.
    pub fn lift_chart_ic(&self, chart_ic: &DVector<f64>) -> Result<PhaseState> {
        let m = self.manifold.m();
        let s = self.manifold.s();
        if chart_ic.len() != 2 * m {
            return Err(Error::invalid(format!(
                "chart initial condition must have {} entries, got {}",
                2 * m,
                chart_ic.len()
            )));
        }
        let x0 = chart_ic.rows(0, m).into_owned();
        let u0 = chart_ic.rows(m, m).into_owned();
        let y_seed = self.chart_seed.xi.rows(m, s).into_owned();
        let y0 = self.manifold.chart_solve_y(&x0, &y_seed)?;
        let mut xi = DVector::zeros(m + s);
        xi.rows_mut(0, m).copy_from(&x0);
        xi.rows_mut(m, s).copy_from(&y0);
        let v0 = self.manifold.complete_velocity(&xi, &u0)?;
        let mut eta = DVector::zeros(m + s);
        eta.rows_mut(0, m).copy_from(&u0);
        eta.rows_mut(m, s).copy_from(&v0);
        Ok(PhaseState::new(xi, eta))
    }

    /// Acceleration of the forced motion at strength `lambda`.
    fn acceleration(
        &self,
        lambda: f64,
        t: f64,
        xi: &DVector<f64>,
        eta: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        match self.scenario {
            Scenario::Applied => {
                let state = PhaseState::new(xi.clone(), eta.clone());
                let base = self.f.as_ref().unwrap_or(&self.zero_force);
                let (_, mut acc) = second_order_field(&self.manifold, base, t, &state)?;
                if lambda != 0.0 {
                    let forcing = self.h.eval(&self.manifold, t, xi, eta)?;
                    acc += lambda * forcing;
                }
                Ok(acc)
            }
            Scenario::Lifted => {
                let m = self.manifold.m();
                let s = self.manifold.s();
                let (split, hessians) = self.manifold.jacobians_with_hessians(xi)?;
                let mut first = lambda * self.h.eval_raw(&self.manifold, t, xi, eta)?;
                if let Some(field) = &self.f {
                    first += field.eval_raw(&self.manifold, t, xi, eta)?;
                }
                let mut quad = DVector::zeros(s);
                for (i, hess) in hessians.iter().enumerate() {
                    quad[i] = eta.dot(&(hess * eta));
                }
                let second = -(split.b_inverse() * (&split.a * &first + quad));
                let mut acc = DVector::zeros(m + s);
                acc.rows_mut(0, m).copy_from(&first);
                acc.rows_mut(m, s).copy_from(&second);
                Ok(acc)
            }
        }
    }

    /// One shooting integration: the chart periodicity defect
    /// `(x(T) - x0, u(T) - u0)` and the orbit that produced it.
    fn shoot(&self, lambda: f64, chart_ic: &DVector<f64>) -> Result<(DVector<f64>, Trajectory)> {
        let m = self.manifold.m();
        let state0 = self.lift_chart_ic(chart_ic)?;
        let traj = integrate(
            &self.manifold,
            |t, xi, eta| self.acceleration(lambda, t, xi, eta),
            &state0,
            0.0,
            self.period,
            &self.shoot_opts,
        )?;
        let (_, end, _) = traj.end();
        let mut residual = DVector::zeros(2 * m);
        residual
            .rows_mut(0, m)
            .copy_from(&(end.xi.rows(0, m) - chart_ic.rows(0, m)));
        residual
            .rows_mut(m, m)
            .copy_from(&(end.eta.rows(0, m) - chart_ic.rows(m, m)));
        Ok((residual, traj))
    }
}

/// One accepted point of a branch of periodic orbits.
#[derive(Debug, Clone)]
pub struct BranchPoint {
    /// Forcing strength.
    pub lambda: f64,
    /// Chart initial condition `(x0, u0)`.
    pub chart_ic: DVector<f64>,
    /// Chart periodicity defect of the accepted orbit.
    pub residual: f64,
    /// Largest sup-norm deviation of the position from its time average
    /// along the orbit.
    pub amplitude: f64,
    /// The orbit itself, when the caller asked for it to be stored.
    pub orbit: Option<Trajectory>,
}

/// Why a branch trace stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// The requested number of points was reached.
    Budget,
    /// The branch left the manifold's working box.
    BoxExit,
    /// The arclength step shrank below its floor.
    StepUnderflow,
    /// Too many folds in `lambda`.
    FoldCountLimit,
    /// The residual does not respond to `lambda`, or the branch direction
    /// at the origin is not unique.
    Degenerate,
}

impl Termination {
    pub fn name(&self) -> &'static str {
        match self {
            Termination::Budget => "budget",
            Termination::BoxExit => "box_exit",
            Termination::StepUnderflow => "step_underflow",
            Termination::FoldCountLimit => "fold_count_limit",
            Termination::Degenerate => "degenerate",
        }
    }
}

/// An ordered run of accepted branch points, starting at the equilibrium
/// it emanates from.
#[derive(Debug, Clone)]
pub struct BranchCurve {
    pub points: Vec<BranchPoint>,
    /// Chart coordinates of the equilibrium at `lambda = 0`.
    pub origin: DVector<f64>,
    pub termination: Termination,
}

impl BranchCurve {
    /// CSV export: `lambda,x0_1..x0_m,u0_1..u0_m,residual,amplitude`.
    pub fn write_csv(&self, m: usize, out: &mut impl std::io::Write) -> Result<()> {
        let io_err = |e: std::io::Error| Error::Io {
            path: "<branch csv>".into(),
            msg: e.to_string(),
        };
        let mut header = vec!["lambda".to_string()];
        for i in 1..=m {
            header.push(format!("x0_{i}"));
        }
        for i in 1..=m {
            header.push(format!("u0_{i}"));
        }
        header.push("residual".into());
        header.push("amplitude".into());
        writeln!(out, "{}", header.join(",")).map_err(io_err)?;
        for p in &self.points {
            let mut row = vec![format!("{:.17e}", p.lambda)];
            row.extend(p.chart_ic.iter().map(|v| format!("{v:.17e}")));
            row.push(format!("{:.17e}", p.residual));
            row.push(format!("{:.17e}", p.amplitude));
            writeln!(out, "{}", row.join(",")).map_err(io_err)?;
        }
        Ok(())
    }
}

/// Knobs for [`trace_branch`].
#[derive(Debug, Clone)]
pub struct TraceOpts {
    /// Accepted-point budget, the origin included.
    pub max_points: usize,
    /// Initial arclength step.
    pub ds0: f64,
    /// Arclength step floor.
    pub ds_min: f64,
    /// Arclength step ceiling.
    pub ds_max: f64,
    /// Folds in `lambda` tolerated before the trace stops (reflections at
    /// the `lambda = 0` wall count as folds).
    pub fold_limit: usize,
    /// Store every accepted orbit on its branch point.
    pub store_orbits: bool,
}

impl Default for TraceOpts {
    fn default() -> Self {
        TraceOpts {
            max_points: 200,
            ds0: 2e-3,
            ds_min: 1e-10,
            ds_max: 5e-2,
            fold_limit: 8,
            store_orbits: false,
        }
    }
}

/// Periodicity defect of one shooting integration at forcing strength
/// `lambda` from the chart initial condition `(x0, u0)`.
pub fn shoot_residual(
    problem: &PeriodicProblem,
    lambda: f64,
    chart_ic: &DVector<f64>,
) -> Result<DVector<f64>> {
    Ok(problem.shoot(lambda, chart_ic)?.0)
}

/// Finite-difference Jacobian of the shooting residual with respect to the
/// chart initial condition, at fixed `lambda`.
fn shoot_jacobian_ic(
    problem: &PeriodicProblem,
    lambda: f64,
    chart_ic: &DVector<f64>,
    base: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let n = chart_ic.len();
    let mut jac = DMatrix::zeros(n, n);
    for j in 0..n {
        let delta = FD_STEP * (1.0 + chart_ic[j].abs());
        let mut bumped = chart_ic.clone();
        bumped[j] += delta;
        let r = shoot_residual(problem, lambda, &bumped)?;
        jac.set_column(j, &((r - base) / delta));
    }
    Ok(jac)
}

/// Extended residual derivative `[dR/dlambda | dR/d(chart)]` at a branch
/// iterate, by forward differences.
fn extended_jacobian(
    problem: &PeriodicProblem,
    lambda: f64,
    chart_ic: &DVector<f64>,
    base: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let n = chart_ic.len();
    let mut ext = DMatrix::zeros(n, n + 1);
    let delta = FD_STEP * (1.0 + lambda.abs());
    let r = shoot_residual(problem, lambda + delta, chart_ic)?;
    ext.set_column(0, &((r - base) / delta));
    let jac = shoot_jacobian_ic(problem, lambda, chart_ic, base)?;
    for j in 0..n {
        ext.set_column(j + 1, &jac.column(j).into_owned());
    }
    Ok(ext)
}

/// Unit null vector of the extended Jacobian (the branch tangent) together
/// with the second-smallest singular value and the largest one. The
/// extended Jacobian is embedded in a square matrix by a zero row so the
/// full set of right singular vectors is available; the structural zero
/// singular value then belongs to the sought null vector.
fn branch_tangent(ext: &DMatrix<f64>) -> (DVector<f64>, f64, f64) {
    let n = ext.nrows();
    let mut square = DMatrix::zeros(n + 1, n + 1);
    square.view_mut((0, 0), (n, n + 1)).copy_from(ext);
    let svd = square.svd(false, true);
    let v_t = svd.v_t.expect("svd was computed with right vectors");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[a]
            .partial_cmp(&svd.singular_values[b])
            .expect("singular values are finite")
    });
    let tangent = v_t.row(order[0]).transpose();
    let norm = tangent.norm();
    (
        tangent / norm,
        svd.singular_values[order[1]],
        svd.singular_values[order[n]],
    )
}

/// Build an accepted branch point from a converged chart iterate,
/// re-verifying that the orbit ends on the manifold and that the dependent
/// blocks are periodic along with the chart.
fn accept_point(
    problem: &PeriodicProblem,
    lambda: f64,
    chart_ic: DVector<f64>,
    residual: f64,
    traj: Trajectory,
    store_orbit: bool,
) -> Result<BranchPoint> {
    let m = problem.manifold.m();
    let s = problem.manifold.s();
    let (_, end, g_end) = traj.end();
    if *g_end > ENDPOINT_G_FACTOR * problem.manifold.on_tol() {
        return Err(Error::domain(format!(
            "accepted orbit ends off the manifold (|g| = {g_end:.3e})"
        )));
    }
    let start = &traj.samples[0].1;
    let y_gap = (end.xi.rows(m, s) - start.xi.rows(m, s)).amax();
    let v_gap = (end.eta.rows(m, s) - start.eta.rows(m, s)).amax();
    let scale = 1.0 + start.xi.amax().max(start.eta.amax());
    if y_gap.max(v_gap) > AMBIENT_PERIOD_TOL * scale {
        return Err(Error::domain(format!(
            "orbit is chart-periodic but the dependent blocks drift \
             (position gap {y_gap:.3e}, velocity gap {v_gap:.3e})"
        )));
    }
    let amplitude = traj.amplitude();
    Ok(BranchPoint {
        lambda,
        chart_ic,
        residual,
        amplitude,
        orbit: store_orbit.then_some(traj),
    })
}

/// Newton-correct a chart guess to a periodic orbit at fixed `lambda`.
/// The shooting Jacobian is checked for singularity before every solve,
/// so a period at a linearization resonance is reported rather than
/// silently inverted.
pub fn newton_correct(
    problem: &PeriodicProblem,
    lambda: f64,
    guess: &DVector<f64>,
) -> Result<BranchPoint> {
    if lambda < 0.0 {
        return Err(Error::invalid(format!(
            "forcing strength must be nonnegative, got {lambda}"
        )));
    }
    let mut z = guess.clone();
    let (mut r, mut traj) = problem.shoot(lambda, &z)?;
    for _ in 0..MAX_CORRECTOR {
        let jac = shoot_jacobian_ic(problem, lambda, &z, &r)?;
        let svd = jac.clone().svd(false, false);
        let s_max = svd.singular_values.max();
        let s_min = svd.singular_values.min();
        if s_min <= SINGULAR_TOL * s_max.max(1.0) {
            return Err(Error::SingularShootJacobian {
                cond: if s_min > 0.0 {
                    s_max / s_min
                } else {
                    f64::INFINITY
                },
            });
        }
        if r.amax() <= SHOOT_TOL {
            return accept_point(problem, lambda, z, r.amax(), traj, true);
        }
        let step = jac.lu().solve(&-&r).ok_or(Error::SingularShootJacobian {
            cond: f64::INFINITY,
        })?;
        let mut alpha = 1.0;
        let mut improved = false;
        for _ in 0..8 {
            let candidate = &z + alpha * &step;
            let (r_new, traj_new) = problem.shoot(lambda, &candidate)?;
            if r_new.amax() < r.amax() {
                z = candidate;
                r = r_new;
                traj = traj_new;
                improved = true;
                break;
            }
            alpha *= 0.5;
        }
        if !improved {
            return Err(Error::NoConvergence {
                what: "shooting correction (line search stalled)".into(),
                iters: MAX_CORRECTOR,
            });
        }
        if r.amax() <= SHOOT_TOL {
            return accept_point(problem, lambda, z, r.amax(), traj, true);
        }
    }
    Err(Error::NoConvergence {
        what: "shooting correction".into(),
        iters: MAX_CORRECTOR,
    })
}

/// Trace the branch of periodic orbits emanating from an equilibrium.
/// `origin` is the chart position `x` of the equilibrium (zero velocity
/// is implied). The predictor leaves the origin with increasing `lambda`,
/// the corrector works in the hyperplane orthogonal to the branch
/// tangent, and the trace reflects at the `lambda = 0` wall so it stays
/// on the physical half-line.
pub fn trace_branch(
    problem: &PeriodicProblem,
    origin: &DVector<f64>,
    opts: &TraceOpts,
) -> Result<BranchCurve> {
    let m = problem.manifold.m();
    if origin.len() != m {
        return Err(Error::invalid(format!(
            "origin must be the {m} chart position(s) of an equilibrium, got {} entries",
            origin.len()
        )));
    }
    if opts.max_points == 0 {
        return Err(Error::invalid("point budget must be positive"));
    }
    let n = problem.chart_dim();
    let mut chart0 = DVector::zeros(n);
    chart0.rows_mut(0, m).copy_from(origin);

    let (r0, traj0) = problem.shoot(0.0, &chart0)?;
    if r0.amax() > SHOOT_TOL {
        return Err(Error::domain(format!(
            "origin is not an equilibrium of the unforced problem \
             (periodicity defect {:.3e})",
            r0.amax()
        )));
    }
    let first = accept_point(
        problem,
        0.0,
        chart0.clone(),
        r0.amax(),
        traj0,
        opts.store_orbits,
    )?;
    let mut points = vec![first];

    let ext0 = extended_jacobian(problem, 0.0, &chart0, &r0)?;
    if ext0.column(0).amax() <= LAMBDA_RESPONSE_TOL {
        // The residual does not respond to the forcing strength. When the
        // forcing vanishes along the equilibrium orbit of a
        // perturbation-only problem, the constant orbit persists at every
        // strength and that vertical family is the branch; otherwise
        // there is nothing to continue in.
        if problem.scenario == Scenario::Lifted {
            return trace_vertical_family(problem, chart0, points, opts);
        }
        return Ok(BranchCurve {
            points,
            origin: chart0,
            termination: Termination::Degenerate,
        });
    }
    let (mut tangent, gap0, top0) = branch_tangent(&ext0);
    let mut z = DVector::zeros(n + 1);
    z.rows_mut(1, n).copy_from(&chart0);
    if gap0 <= SINGULAR_TOL * top0.max(1.0) {
        // The shooting system is rank-deficient at the wall (typical for
        // a perturbation-only problem, where every rest point is an
        // unforced equilibrium). Step off the wall by a fixed-strength
        // correction and continue from there.
        let hop = opts.ds0.max(1e-4);
        let Ok(mut point) = newton_correct(problem, hop, &chart0) else {
            return Ok(BranchCurve {
                points,
                origin: chart0,
                termination: Termination::Degenerate,
            });
        };
        if !opts.store_orbits {
            point.orbit = None;
        }
        let chart = point.chart_ic.clone();
        let lambda = point.lambda;
        points.push(point);
        let (r, _) = problem.shoot(lambda, &chart)?;
        let ext = extended_jacobian(problem, lambda, &chart, &r)?;
        let (t, _, _) = branch_tangent(&ext);
        let mut direction = DVector::zeros(n + 1);
        direction[0] = lambda;
        direction.rows_mut(1, n).copy_from(&(&chart - &chart0));
        tangent = if t.dot(&direction) >= 0.0 { t } else { -t };
        z[0] = lambda;
        z.rows_mut(1, n).copy_from(&chart);
    } else if tangent[0] < 0.0 {
        tangent = -tangent;
    }

    let mut ds = opts.ds0;
    let mut fold_count = 0usize;
    let mut termination = Termination::Budget;

    while points.len() < opts.max_points {
        let predicted = &z + ds * &tangent;
        let mut iterate = predicted.clone();
        let mut corrected = None;
        for _ in 0..MAX_CORRECTOR {
            let lambda = iterate[0];
            let chart = iterate.rows(1, n).into_owned();
            let Ok((r, traj)) = problem.shoot(lambda, &chart) else {
                break;
            };
            let Ok(ext) = extended_jacobian(problem, lambda, &chart, &r) else {
                break;
            };
            if r.amax() <= SHOOT_TOL {
                corrected = Some((lambda, chart, r, traj, ext));
                break;
            }
            let mut bordered = DMatrix::zeros(n + 1, n + 1);
            bordered.view_mut((0, 0), (n, n + 1)).copy_from(&ext);
            bordered.row_mut(n).copy_from(&tangent.transpose());
            let mut rhs = DVector::zeros(n + 1);
            rhs.rows_mut(0, n).copy_from(&-&r);
            rhs[n] = -tangent.dot(&(&iterate - &predicted));
            let Some(step) = bordered.lu().solve(&rhs) else {
                break;
            };
            if !step.iter().all(|v| v.is_finite()) {
                break;
            }
            iterate += step;
        }

        let Some((lambda, chart, r, traj, ext)) = corrected else {
            ds *= 0.5;
            if ds < opts.ds_min {
                if points.len() == 1 {
                    return Err(Error::StepUnderflow {
                        what: "arclength continuation".into(),
                        step: ds,
                    });
                }
                termination = Termination::StepUnderflow;
                break;
            }
            continue;
        };

        if lambda < -LAMBDA_WALL {
            match reflect_at_wall(problem, &chart, opts, &mut points, &mut fold_count) {
                Ok(Some((wall_chart, wall_tangent))) => {
                    if fold_count >= opts.fold_limit {
                        termination = Termination::FoldCountLimit;
                        break;
                    }
                    z[0] = 0.0;
                    z.rows_mut(1, n).copy_from(&wall_chart);
                    tangent = wall_tangent;
                    ds = opts.ds0;
                    continue;
                }
                Ok(None) | Err(_) => {
                    ds *= 0.5;
                    if ds < opts.ds_min {
                        termination = Termination::StepUnderflow;
                        break;
                    }
                    continue;
                }
            }
        }

        let xi0 = traj.samples[0].1.xi.clone();
        let point = accept_point(
            problem,
            lambda.max(0.0),
            chart.clone(),
            r.amax(),
            traj,
            opts.store_orbits,
        )?;
        points.push(point);
        if !problem.manifold.in_domain(&xi0) {
            termination = Termination::BoxExit;
            break;
        }

        let (mut new_tangent, _, _) = branch_tangent(&ext);
        if new_tangent.dot(&tangent) < 0.0 {
            new_tangent = -new_tangent;
        }
        if tangent[0].abs() > LAMBDA_WALL
            && new_tangent[0].abs() > LAMBDA_WALL
            && new_tangent[0].signum() != tangent[0].signum()
        {
            fold_count += 1;
            if fold_count >= opts.fold_limit {
                termination = Termination::FoldCountLimit;
                break;
            }
        }
        tangent = new_tangent;
        z[0] = lambda.max(0.0);
        z.rows_mut(1, n).copy_from(&chart);
        ds = (ds * 1.5).min(opts.ds_max);
    }

    Ok(BranchCurve {
        points,
        origin: chart0,
        termination,
    })
}

/// Land the trace exactly on the `lambda = 0` wall when a corrector step
/// crossed it: fixed-`lambda` correction at zero, accept the wall point,
/// and return the reflected tangent (positive `lambda` component). A wall
/// crossing counts toward the fold budget.
fn reflect_at_wall(
    problem: &PeriodicProblem,
    chart_guess: &DVector<f64>,
    opts: &TraceOpts,
    points: &mut Vec<BranchPoint>,
    fold_count: &mut usize,
) -> Result<Option<(DVector<f64>, DVector<f64>)>> {
    let mut point = newton_correct(problem, 0.0, chart_guess)?;
    if !opts.store_orbits {
        point.orbit = None;
    }
    let wall_chart = point.chart_ic.clone();
    points.push(point);
    *fold_count += 1;
    let (r, _) = problem.shoot(0.0, &wall_chart)?;
    let ext = extended_jacobian(problem, 0.0, &wall_chart, &r)?;
    let (mut tangent, _, _) = branch_tangent(&ext);
    if tangent[0] < 0.0 {
        tangent = -tangent;
    }
    if tangent[0].abs() <= LAMBDA_WALL {
        return Ok(None);
    }
    Ok(Some((wall_chart, tangent)))
}

/// Trace a family of constant orbits that persists at every forcing
/// strength: the forcing vanishes identically along the equilibrium
/// orbit, so the branch is vertical in the strength and each point only
/// needs a correction from the previous chart iterate.
fn trace_vertical_family(
    problem: &PeriodicProblem,
    chart0: DVector<f64>,
    mut points: Vec<BranchPoint>,
    opts: &TraceOpts,
) -> Result<BranchCurve> {
    let mut lambda = 0.0;
    let mut chart = chart0.clone();
    let mut ds = opts.ds0;
    let mut termination = Termination::Budget;
    while points.len() < opts.max_points {
        match newton_correct(problem, lambda + ds, &chart) {
            Ok(mut point) => {
                lambda += ds;
                chart = point.chart_ic.clone();
                if !opts.store_orbits {
                    point.orbit = None;
                }
                points.push(point);
                let state0 = problem.lift_chart_ic(&chart)?;
                if !problem.manifold.in_domain(&state0.xi) {
                    termination = Termination::BoxExit;
                    break;
                }
                ds = (ds * 1.5).min(opts.ds_max);
            }
            Err(_) => {
                ds *= 0.5;
                if ds < opts.ds_min {
                    termination = Termination::StepUnderflow;
                    break;
                }
            }
        }
    }
    Ok(BranchCurve {
        points,
        origin: chart0,
        termination,
    })
}
