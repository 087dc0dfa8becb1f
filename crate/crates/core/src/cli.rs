//! Subcommands behind the `implicit-motion` binary. Each command maps a
//! parsed problem file and its flags to a rendered report, so the binary
//! stays a thin argument shell and tests can drive the same entry points.
//!
//! Reports come in two forms at once: plain `key: value` text and a
//! structured JSON mirror. Randomized spot checks run from fixed seeds,
//! so repeated invocations print identical bytes.

use std::fs;
use std::path::Path;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::continuation::{trace_branch, BranchCurve, SHOOT_TOL};
use crate::degree::{
    degree_verified, tangent_field_degree, AugmentedMap, DegreeReport, FirstBlock, MeanField,
    ZeroSearchOpts,
};
use crate::dynamics::{
    dae_lift, integrate, reactive_force, reactive_force_normal_solve, second_order_field,
    ForceField, IntegrateOpts, Method, Tangency, Trajectory,
};
use crate::error::{Error, Result};
use crate::manifold::{ImplicitManifold, PhaseState};
use crate::problem::{example_source, ExpectSection, ProblemFile, SimulateSettings, EXAMPLE_NAMES};

/// Seed for the sampled spot checks, fixed so `check` output is stable.
const CHECK_SEED: u64 = 0x1d05_eed5;
/// On-manifold states sampled for the positivity check.
const CHECK_STATES: usize = 64;
/// Trials per tangency or periodicity spot check.
const SPOT_TRIALS: usize = 8;

/// Rendered result of one subcommand: text lines, the JSON mirror, and
/// the process exit code.
#[derive(Debug)]
pub struct CmdOutput {
    pub text: String,
    pub json: Value,
    pub exit: i32,
}

impl CmdOutput {
    fn ok(text: String, json: Value) -> Self {
        CmdOutput { text, json, exit: 0 }
    }
}

fn fmt_vec(v: &DVector<f64>) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(" ")
}

fn json_vec(v: &DVector<f64>) -> Value {
    Value::from(v.iter().copied().collect::<Vec<f64>>())
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

/// Comma-separated float list, the argument form of chart points.
pub fn parse_floats(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|part| {
            let part = part.trim();
            part.parse::<f64>()
                .map_err(|_| Error::invalid(format!("`{part}` is not a number")))
        })
        .collect()
}

/// Lift chart coordinates `(x, u)` to a full phase state: the dependent
/// position block comes from a chart solve, the dependent velocity block
/// from the constraint's derivative.
fn lift_chart_point(man: &ImplicitManifold, x: &[f64], u: &[f64]) -> Result<PhaseState> {
    let (m, s) = (man.m(), man.s());
    if x.len() != m || u.len() != m {
        return Err(Error::invalid(format!(
            "chart coordinates need {m} position and {m} velocity components, got {} and {}",
            x.len(),
            u.len()
        )));
    }
    let x = DVector::from_column_slice(x);
    let y = man.chart_solve_y(&x, man.chart_seed())?;
    let mut xi = DVector::zeros(m + s);
    xi.rows_mut(0, m).copy_from(&x);
    xi.rows_mut(m, s).copy_from(&y);
    let u = DVector::from_column_slice(u);
    let v = man.complete_velocity(&xi, &u)?;
    let mut eta = DVector::zeros(m + s);
    eta.rows_mut(0, m).copy_from(&u);
    eta.rows_mut(m, s).copy_from(&v);
    Ok(PhaseState::new(xi, eta))
}

/// Validate a problem file: the anchor sits on the manifold, the
/// constraint block is invertible with one sign, `B^{-1}C` stays positive
/// definite at sampled states, and declared field properties hold on spot
/// checks.
pub fn cmd_check(file: &ProblemFile) -> Result<CmdOutput> {
    let man = file.build_manifold()?;
    let anchor = file.chart_anchor(&man)?;
    let residual = man.residual_norm(&anchor.xi)?;
    if residual > man.on_tol() {
        return Err(Error::invalid(format!(
            "chart anchor is off the manifold (|g| = {residual:.3e})"
        )));
    }
    let split = man.jacobians(&anchor.xi)?;
    let mut rng = ChaCha8Rng::seed_from_u64(CHECK_SEED);
    let mut min_eig = f64::INFINITY;
    for _ in 0..CHECK_STATES {
        let state = man.sample_state(&mut rng)?;
        let sp = man.jacobians(&state.xi)?;
        let q = sp.b_inverse() * &sp.c;
        let sym = 0.5 * (&q + q.transpose());
        min_eig = min_eig.min(sym.symmetric_eigenvalues().min());
    }
    if let Some(f) = &file.build_force()? {
        f.check_tangency(&man, &mut rng, SPOT_TRIALS)?;
    }
    if let Some(h) = &file.build_perturbation()? {
        h.check_tangency(&man, &mut rng, SPOT_TRIALS)?;
        h.check_periodicity(&man, &mut rng, SPOT_TRIALS)?;
    }
    let s_sign = man
        .pinned_b_sign()
        .ok_or_else(|| Error::domain("constraint block sign could not be determined"))?;

    let box_text = man
        .domain()
        .iter()
        .map(|(lo, hi)| format!("[{lo}, {hi}]"))
        .collect::<Vec<_>>()
        .join(" x ");
    let force_text = match &file.force {
        Some(sec) => sec.kind.name().to_string(),
        None => "none".to_string(),
    };
    let pert_text = match &file.perturbation {
        Some(sec) => format!("{}, period {}", sec.kind.name(), sec.period),
        None => "none".to_string(),
    };
    let lines = [
        format!("problem: {}", file.name),
        format!("manifold: m = {}, s = {}", man.m(), man.s()),
        format!("box: {box_text}"),
        format!("anchor: {}", fmt_vec(&anchor.xi)),
        format!("anchor residual: {residual:.3e}"),
        format!("s_sign: {s_sign:+}"),
        format!("b_cond at anchor: {:.6e}", split.b_cond),
        format!("min eigenvalue of sym(B^-1 C): {min_eig:.12} over {CHECK_STATES} states"),
        format!("force: {force_text}"),
        format!("perturbation: {pert_text}"),
        "status: ok".to_string(),
    ];
    let json = json!({
        "problem": file.name,
        "m": man.m(),
        "s": man.s(),
        "box": man.domain(),
        "anchor": json_vec(&anchor.xi),
        "anchor_residual": residual,
        "s_sign": s_sign,
        "b_cond": split.b_cond,
        "spd_min_eigenvalue": min_eig,
        "sampled_states": CHECK_STATES,
        "force": file.force.as_ref().map(|sec| sec.kind.name()),
        "perturbation": file
            .perturbation
            .as_ref()
            .map(|sec| json!({"kind": sec.kind.name(), "period": sec.period})),
        "status": "ok",
    });
    Ok(CmdOutput::ok(lines.join("\n"), json))
}

/// Flags of the degree subcommand.
#[derive(Default)]
pub struct DegreeFlags<'a> {
    /// `F` freezes the applied force, `Phi` averages the perturbation.
    pub map: Option<&'a str>,
    /// Cross-validate by winding number or a denser re-run.
    pub verify: bool,
    pub grid: Option<usize>,
    /// Directory receiving `degree.txt` and `zeros.csv`.
    pub out: Option<&'a Path>,
}

/// Degree of the chosen position field over the file's box.
pub fn cmd_degree(file: &ProblemFile, flags: &DegreeFlags) -> Result<CmdOutput> {
    let man = file.build_manifold()?;
    let (report, map_name, grid) =
        degree_for_file(file, &man, flags.map, flags.grid, flags.verify)?;
    let mut lines = vec![
        format!("problem: {}", file.name),
        format!("map: {map_name}"),
        format!("grid: {grid}"),
        report.to_text().trim_end().to_string(),
    ];
    if let Some(dir) = flags.out {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
        let report_path = dir.join("degree.txt");
        let mut out = fs::File::create(&report_path).map_err(|e| io_error(&report_path, e))?;
        report.write_text(&mut out)?;
        let zeros_path = dir.join("zeros.csv");
        let mut out = fs::File::create(&zeros_path).map_err(|e| io_error(&zeros_path, e))?;
        report.write_zeros_csv(man.m(), man.s(), &mut out)?;
        lines.push(format!("wrote: {}", report_path.display()));
        lines.push(format!("wrote: {}", zeros_path.display()));
    }
    let json = json!({
        "problem": file.name,
        "map": map_name,
        "grid": grid,
        "report": serde_json::to_value(&report)
            .map_err(|e| Error::invalid(format!("report serialization failed: {e}")))?,
    });
    Ok(CmdOutput::ok(lines.join("\n"), json))
}

/// Resolve the map choice and run the degree pipeline over the file's
/// box. Flags win over `[degree]` entries; with no explicit choice an
/// applied force selects `F` and a perturbation selects `Phi`. Returns
/// the report together with the resolved map name and grid.
pub fn degree_for_file(
    file: &ProblemFile,
    man: &ImplicitManifold,
    map_flag: Option<&str>,
    grid_flag: Option<usize>,
    verify: bool,
) -> Result<(DegreeReport, String, usize)> {
    let force = file.build_force()?;
    let pert = file.build_perturbation()?;
    let section = file.degree.as_ref();
    let map_name = match map_flag.or_else(|| section.and_then(|d| d.map.as_deref())) {
        Some(name) => name.to_string(),
        None if force.is_some() => "F".to_string(),
        None if pert.is_some() => "Phi".to_string(),
        None => {
            return Err(Error::invalid(
                "the file has neither a [force] nor a [perturbation] section, so there is \
                 no position field to take a degree of",
            ))
        }
    };
    let grid = grid_flag.or_else(|| section.map(|d| d.grid)).unwrap_or(8);
    let bounds: Vec<(f64, f64)> = match section.and_then(|d| d.bounds.as_ref()) {
        Some(b) => b.iter().map(|&[lo, hi]| (lo, hi)).collect(),
        None => man.domain().to_vec(),
    };
    let opts = ZeroSearchOpts {
        grid_per_axis: grid,
        ..ZeroSearchOpts::default()
    };
    let mean;
    let first = match map_name.as_str() {
        "F" => {
            let field = force.as_ref().ok_or_else(|| {
                Error::invalid("map F freezes the applied force, but the file has no [force] section")
            })?;
            FirstBlock::Frozen(field)
        }
        "Phi" => {
            let field = pert.as_ref().ok_or_else(|| {
                Error::invalid(
                    "map Phi averages the periodic forcing, but the file has no \
                     [perturbation] section",
                )
            })?;
            mean = MeanField::new(man, field)?;
            FirstBlock::Mean(&mean)
        }
        other => {
            return Err(Error::invalid(format!(
                "unknown map `{other}`; the choices are F and Phi"
            )))
        }
    };
    let report = if verify {
        let map = AugmentedMap::new(man, first)?;
        let mut report = degree_verified(&map, &bounds, &opts)?;
        pin_manifold_sign(man, &bounds, &mut report)?;
        report
    } else {
        tangent_field_degree(man, first, &bounds, &opts)?
    };
    Ok((report, map_name, grid))
}

/// Pin `sign det B` at the report's zeros (or the box centre when there
/// are none) and fill in the manifold-side degree.
fn pin_manifold_sign(
    man: &ImplicitManifold,
    bounds: &[(f64, f64)],
    report: &mut DegreeReport,
) -> Result<()> {
    if report.zeros.is_empty() {
        let centre = DVector::from_iterator(
            bounds.len(),
            bounds.iter().map(|&(lo, hi)| 0.5 * (lo + hi)),
        );
        man.jacobians(&centre)?;
    } else {
        for z in &report.zeros {
            man.jacobians(&DVector::from_vec(z.point.clone()))?;
        }
    }
    let s_sign = man
        .pinned_b_sign()
        .ok_or_else(|| Error::domain("constraint block sign could not be determined"))?;
    report.s_sign = Some(s_sign);
    report.manifold_degree = Some(i64::from(s_sign) * report.degree);
    Ok(())
}

/// Reactive force at a chart point, with the normal-solve route gap as a
/// built-in cross check.
pub fn cmd_reactive(file: &ProblemFile, x: &[f64], u: &[f64]) -> Result<CmdOutput> {
    let man = file.build_manifold()?;
    let state = lift_chart_point(&man, x, u)?;
    let r = reactive_force(&man, &state)?;
    let check = reactive_force_normal_solve(&man, &state)?;
    let gap = (&r - &check).amax();
    let lines = [
        format!("problem: {}", file.name),
        format!("xi: {}", fmt_vec(&state.xi)),
        format!("eta: {}", fmt_vec(&state.eta)),
        format!("r: {}", fmt_vec(&r)),
        format!("route gap: {gap:.3e}"),
    ];
    let json = json!({
        "problem": file.name,
        "xi": json_vec(&state.xi),
        "eta": json_vec(&state.eta),
        "r": json_vec(&r),
        "route_gap": gap,
    });
    Ok(CmdOutput::ok(lines.join("\n"), json))
}

/// Flags of the simulate subcommand.
#[derive(Default)]
pub struct SimulateFlags<'a> {
    /// Integrate an `x_only` force along both the lifted and the
    /// projected route and report their largest position gap.
    pub twin: bool,
    pub t1: Option<f64>,
    pub h: Option<f64>,
    pub method: Option<&'a str>,
    /// Trajectory CSV path.
    pub out: Option<&'a Path>,
}

/// Integrate the constrained motion over the file's `[integrate]` span.
pub fn cmd_simulate(file: &ProblemFile, flags: &SimulateFlags) -> Result<CmdOutput> {
    let man = file.build_manifold()?;
    let mut settings = file.integrate_settings()?;
    if let Some(t1) = flags.t1 {
        settings.t1 = t1;
    }
    if let Some(h) = flags.h {
        settings.opts.h = h;
    }
    if let Some(name) = flags.method {
        settings.opts.method = Method::from_name(name)?;
    }
    if !(settings.t1 > settings.t0) {
        return Err(Error::invalid(format!(
            "integration span [{}, {}] is empty",
            settings.t0, settings.t1
        )));
    }
    let force = file.build_force()?;
    let x_only = matches!(&force, Some(f) if f.tangency() == Tangency::XOnly);
    if flags.twin && !x_only {
        return Err(Error::invalid(
            "the twin comparison integrates a first-block force along both routes; this \
             file has no x_only [force]",
        ));
    }
    let mut twin_gap = None;
    let traj = if x_only {
        let field = force.expect("x_only checked just above");
        if flags.twin {
            let (traj, gap) = twin_run(&man, &settings, field)?;
            twin_gap = Some(gap);
            traj
        } else {
            let state0 = lift_chart_point(&man, settings.x0.as_slice(), settings.u0.as_slice())?;
            let lifted = dae_lift(&man, field)?;
            let opts = IntegrateOpts {
                project: false,
                ..settings.opts.clone()
            };
            integrate(
                &man,
                |t, xi, eta| lifted.eval(&man, t, xi, eta),
                &state0,
                settings.t0,
                settings.t1,
                &opts,
            )?
        }
    } else {
        let state0 = lift_chart_point(&man, settings.x0.as_slice(), settings.u0.as_slice())?;
        integrate(
            &man,
            |t, xi, eta| {
                let state = PhaseState::new(xi.clone(), eta.clone());
                match &force {
                    Some(f) => second_order_field(&man, f, t, &state).map(|(_, a)| a),
                    None => reactive_force(&man, &state),
                }
            },
            &state0,
            settings.t0,
            settings.t1,
            &settings.opts,
        )?
    };
    let (t_end, end_state, _) = traj.end();
    let mut lines = vec![
        format!("problem: {}", file.name),
        format!("method: {}", settings.opts.method.name()),
        format!("span: {} -> {}", settings.t0, settings.t1),
        format!("samples: {}", traj.samples.len()),
        format!("end t: {t_end}"),
        format!("end xi: {}", fmt_vec(&end_state.xi)),
        format!("end eta: {}", fmt_vec(&end_state.eta)),
        format!("max constraint drift: {:.3e}", traj.max_g_drift),
        format!("max tangency drift: {:.3e}", traj.max_tangency_drift),
    ];
    if let Some(gap) = twin_gap {
        lines.push(format!("twin gap: {gap:.3e}"));
    }
    if let Some(path) = flags.out {
        let mut out = fs::File::create(path).map_err(|e| io_error(path, e))?;
        traj.write_csv(man.m(), man.s(), &mut out)?;
        lines.push(format!("wrote: {}", path.display()));
    }
    let json = json!({
        "problem": file.name,
        "method": settings.opts.method.name(),
        "t0": settings.t0,
        "t1": settings.t1,
        "samples": traj.samples.len(),
        "end_t": t_end,
        "end_xi": json_vec(&end_state.xi),
        "end_eta": json_vec(&end_state.eta),
        "max_g_drift": traj.max_g_drift,
        "max_tangency_drift": traj.max_tangency_drift,
        "twin_gap": twin_gap,
        "csv": flags.out.map(|p| p.display().to_string()),
    });
    Ok(CmdOutput::ok(lines.join("\n"), json))
}

/// Integrate an `x_only` force along the lifted route and its projected
/// twin with the same fixed step, returning the lifted trajectory and
/// the largest position gap at the shared sample times.
fn twin_run(
    man: &ImplicitManifold,
    settings: &SimulateSettings,
    force: ForceField,
) -> Result<(Trajectory, f64)> {
    if force.tangency() != Tangency::XOnly {
        return Err(Error::invalid("the twin comparison needs an x_only [force]"));
    }
    if settings.opts.method != Method::Rk4Proj {
        return Err(Error::invalid(
            "the twin comparison needs the fixed-step method so both routes sample the \
             same times",
        ));
    }
    let state0 = lift_chart_point(man, settings.x0.as_slice(), settings.u0.as_slice())?;
    let lifted = dae_lift(man, force)?;
    let dae_opts = IntegrateOpts {
        project: false,
        ..settings.opts.clone()
    };
    let dae = integrate(
        man,
        |t, xi, eta| lifted.eval(man, t, xi, eta),
        &state0,
        settings.t0,
        settings.t1,
        &dae_opts,
    )?;
    let projected = lifted.with_projection();
    let ode = integrate(
        man,
        |t, xi, eta| {
            let state = PhaseState::new(xi.clone(), eta.clone());
            second_order_field(man, &projected, t, &state).map(|(_, a)| a)
        },
        &state0,
        settings.t0,
        settings.t1,
        &settings.opts,
    )?;
    if dae.samples.len() != ode.samples.len() {
        return Err(Error::domain("twin runs accepted different sample counts"));
    }
    let gap = dae
        .samples
        .iter()
        .zip(&ode.samples)
        .map(|((_, a, _), (_, b, _))| (&a.xi - &b.xi).amax())
        .fold(0.0, f64::max);
    Ok((dae, gap))
}

/// Flags of the trace subcommand.
#[derive(Default)]
pub struct TraceFlags<'a> {
    /// `auto` picks a zero of the position field; otherwise a
    /// comma-separated chart point. Defaults to the file's origin, then
    /// to auto.
    pub origin: Option<&'a str>,
    pub steps: Option<usize>,
    pub ds0: Option<f64>,
    /// Branch CSV path.
    pub out: Option<&'a Path>,
}

/// Trace the branch of periodic orbits grown from an equilibrium of the
/// unforced motion.
pub fn cmd_trace(file: &ProblemFile, flags: &TraceFlags) -> Result<CmdOutput> {
    let man = file.build_manifold()?;
    let problem = file.periodic_problem()?;
    let mut opts = file.trace_opts();
    if let Some(n) = flags.steps {
        opts.max_points = n;
    }
    if let Some(d) = flags.ds0 {
        opts.ds0 = d;
    }
    let mut notes = Vec::new();
    let origin = resolve_origin(file, &man, flags.origin, &mut notes)?;
    let curve = trace_branch(&problem, &origin, &opts)?;
    let lambda_max = curve.points.iter().map(|p| p.lambda).fold(0.0, f64::max);
    let amplitude_max = curve.points.iter().map(|p| p.amplitude).fold(0.0, f64::max);
    let worst_residual = curve.points.iter().map(|p| p.residual).fold(0.0, f64::max);
    let mut lines = vec![
        format!("problem: {}", file.name),
        format!("origin: {}", fmt_vec(&curve.origin)),
    ];
    for note in &notes {
        lines.push(format!("note: {note}"));
    }
    lines.extend([
        format!("points: {}", curve.points.len()),
        format!("termination: {}", curve.termination.name()),
        format!("lambda max: {lambda_max}"),
        format!("amplitude max: {amplitude_max}"),
        format!("worst residual: {worst_residual:.3e}"),
    ]);
    if let Some(path) = flags.out {
        let mut out = fs::File::create(path).map_err(|e| io_error(path, e))?;
        curve.write_csv(man.m(), &mut out)?;
        lines.push(format!("wrote: {}", path.display()));
    }
    let branch: Vec<Value> = curve
        .points
        .iter()
        .map(|p| {
            json!({
                "lambda": p.lambda,
                "chart_ic": p.chart_ic.iter().copied().collect::<Vec<f64>>(),
                "residual": p.residual,
                "amplitude": p.amplitude,
            })
        })
        .collect();
    let json = json!({
        "problem": file.name,
        "origin": json_vec(&curve.origin),
        "notes": notes,
        "points": curve.points.len(),
        "termination": curve.termination.name(),
        "lambda_max": lambda_max,
        "amplitude_max": amplitude_max,
        "worst_residual": worst_residual,
        "branch": branch,
        "csv": flags.out.map(|p| p.display().to_string()),
    });
    Ok(CmdOutput::ok(lines.join("\n"), json))
}

/// Pick the branch origin: an explicit chart point, the file's declared
/// origin, or a zero of the position field found over the box.
fn resolve_origin(
    file: &ProblemFile,
    man: &ImplicitManifold,
    flag: Option<&str>,
    notes: &mut Vec<String>,
) -> Result<DVector<f64>> {
    let origin = match flag {
        Some("auto") => origin_from_degree(file, man, notes)?,
        Some(text) => DVector::from_vec(parse_floats(text)?),
        None => match file.trace_origin() {
            Some(origin) => origin,
            None => origin_from_degree(file, man, notes)?,
        },
    };
    if origin.len() != man.m() {
        return Err(Error::invalid(format!(
            "the chart origin needs {} components, got {}",
            man.m(),
            origin.len()
        )));
    }
    Ok(origin)
}

/// First nondegenerate zero of the position field, as a chart origin.
fn origin_from_degree(
    file: &ProblemFile,
    man: &ImplicitManifold,
    notes: &mut Vec<String>,
) -> Result<DVector<f64>> {
    let (report, map_name, _) = degree_for_file(file, man, None, None, false)?;
    if report.degree == 0 {
        notes.push(format!(
            "the {map_name} map has degree 0 over the box, so a global branch is not \
             guaranteed from any one zero"
        ));
    }
    let zero = report
        .zeros
        .iter()
        .find(|z| z.index.is_some_and(|i| i != 0))
        .or_else(|| report.zeros.first())
        .ok_or_else(|| {
            Error::domain("no equilibrium zeros inside the box to start a branch from")
        })?;
    let point = zero
        .point
        .iter()
        .map(f64::to_string)
        .collect::<Vec<_>>()
        .join(", ");
    notes.push(format!("origin picked from the {map_name} map zero at ({point})"));
    Ok(DVector::from_vec(zero.point[..man.m()].to_vec()))
}

/// Flags of the example subcommand.
#[derive(Default)]
pub struct ExampleFlags<'a> {
    /// List the built-in names and titles instead of materializing one.
    pub list: bool,
    /// Run the example's recorded expectations instead of writing it.
    pub verify: bool,
    /// Directory receiving the problem file.
    pub out: Option<&'a Path>,
}

/// Materialize, list, or verify a built-in example.
pub fn cmd_example(name: Option<&str>, flags: &ExampleFlags) -> Result<CmdOutput> {
    if flags.list {
        return example_list();
    }
    let name = name
        .ok_or_else(|| Error::invalid("name an example, or pass --list to see them all"))?;
    let source = example_source(name)?;
    if flags.verify {
        let file = ProblemFile::parse(source)?;
        return verify_example(&file);
    }
    let dir = flags.out.unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let path = dir.join(format!("{name}.prob"));
    fs::write(&path, source).map_err(|e| io_error(&path, e))?;
    Ok(CmdOutput::ok(
        format!("wrote: {}", path.display()),
        json!({"name": name, "path": path.display().to_string()}),
    ))
}

fn example_list() -> Result<CmdOutput> {
    let mut lines = Vec::new();
    let mut entries = Vec::new();
    for name in EXAMPLE_NAMES {
        let file = ProblemFile::parse(example_source(name)?)?;
        let title = file.title.unwrap_or_default();
        lines.push(format!("{name:<14} {title}"));
        entries.push(json!({"name": name, "title": title}));
    }
    Ok(CmdOutput::ok(lines.join("\n"), Value::from(entries)))
}

struct Check {
    name: &'static str,
    passed: bool,
    detail: String,
}

impl Check {
    fn pass(name: &'static str, detail: String) -> Self {
        Check { name, passed: true, detail }
    }

    fn fail(name: &'static str, detail: String) -> Self {
        Check { name, passed: false, detail }
    }
}

/// Run every expectation recorded in the file's manifest: validation,
/// degree and zero set, reactive force, twin integration, branch trace.
/// Exit code 1 when any check fails.
fn verify_example(file: &ProblemFile) -> Result<CmdOutput> {
    let expect = file.expect.as_ref().ok_or_else(|| {
        Error::invalid(format!("example `{}` records no expectations to verify", file.name))
    })?;
    let man = file.build_manifold()?;
    let mut checks = Vec::new();

    checks.push(match cmd_check(file) {
        Ok(_) => Check::pass("check", "validation and spot checks".into()),
        Err(e) => Check::fail("check", e.to_string()),
    });

    let wants_degree = expect.degree.is_some()
        || expect.s_sign.is_some()
        || expect.manifold_degree.is_some()
        || expect.zeros.is_some()
        || expect.indices.is_some();
    if wants_degree {
        match degree_for_file(file, &man, None, None, false) {
            Ok((report, map_name, _)) => {
                verify_degree_numbers(expect, &report, &map_name, &mut checks);
                if let Some(zeros) = &expect.zeros {
                    verify_zeros(expect, zeros, &report, &mut checks);
                }
            }
            Err(e) => checks.push(Check::fail("degree", e.to_string())),
        }
    }

    if let (Some(x), Some(u), Some(r)) =
        (&expect.reactive_x, &expect.reactive_u, &expect.reactive_r)
    {
        checks.push(verify_reactive(&man, x, u, r, expect.reactive_tol));
    }

    if let Some(budget) = expect.twin_gap {
        checks.push(verify_twin(file, &man, budget));
    }

    if let Some(min_points) = expect.branch_points {
        checks.push(verify_branch(file, min_points));
    }

    let passed = checks.iter().all(|c| c.passed);
    let mut lines = vec![format!("verify {}", file.name)];
    if let Some(note) = &expect.note {
        lines.push(format!("note: {note}"));
    }
    for c in &checks {
        let status = if c.passed { "pass" } else { "FAIL" };
        lines.push(format!("{}: {status} ({})", c.name, c.detail));
    }
    lines.push(format!("result: {}", if passed { "pass" } else { "FAIL" }));
    let json = json!({
        "name": file.name,
        "note": expect.note,
        "checks": checks
            .iter()
            .map(|c| json!({"name": c.name, "passed": c.passed, "detail": c.detail}))
            .collect::<Vec<_>>(),
        "passed": passed,
    });
    Ok(CmdOutput {
        text: lines.join("\n"),
        json,
        exit: i32::from(!passed),
    })
}

fn verify_degree_numbers(
    expect: &ExpectSection,
    report: &DegreeReport,
    map_name: &str,
    checks: &mut Vec<Check>,
) {
    let mut bad = Vec::new();
    if let Some(want) = expect.degree {
        if report.degree != want {
            bad.push(format!("degree {} (expected {want})", report.degree));
        }
    }
    if let Some(want) = expect.s_sign {
        if report.s_sign != Some(want) {
            bad.push(format!("s_sign {:?} (expected {want})", report.s_sign));
        }
    }
    if let Some(want) = expect.manifold_degree {
        if report.manifold_degree != Some(want) {
            bad.push(format!(
                "manifold degree {:?} (expected {want})",
                report.manifold_degree
            ));
        }
    }
    checks.push(if bad.is_empty() {
        Check::pass(
            "degree",
            format!(
                "map {map_name}: degree {}, s_sign {}, manifold degree {}",
                report.degree,
                report.s_sign.map_or_else(|| "?".into(), |v| format!("{v:+}")),
                report
                    .manifold_degree
                    .map_or_else(|| "?".into(), |v| v.to_string()),
            ),
        )
    } else {
        Check::fail("degree", bad.join("; "))
    });
}

fn verify_zeros(
    expect: &ExpectSection,
    want: &[Vec<f64>],
    report: &DegreeReport,
    checks: &mut Vec<Check>,
) {
    if report.zeros.len() != want.len() {
        checks.push(Check::fail(
            "zeros",
            format!("found {} zeros, expected {}", report.zeros.len(), want.len()),
        ));
        return;
    }
    let tol = expect.zero_tol;
    let mut worst = 0.0_f64;
    let mut matched = Vec::new();
    for target in want {
        let (best, dist) = report
            .zeros
            .iter()
            .map(|z| {
                let d = z
                    .point
                    .iter()
                    .zip(target)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                (z, d)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("zero list is nonempty here");
        worst = worst.max(dist);
        matched.push(best.index);
    }
    checks.push(if worst <= tol {
        Check::pass("zeros", format!("{} matched within {worst:.3e}", want.len()))
    } else {
        Check::fail(
            "zeros",
            format!("worst match distance {worst:.3e} over tolerance {tol:.1e}"),
        )
    });
    if let Some(indices) = &expect.indices {
        let got: Vec<String> = matched
            .iter()
            .map(|i| i.map_or_else(|| "degenerate".into(), |v| format!("{v:+}")))
            .collect();
        let ok = matched.len() == indices.len()
            && matched.iter().zip(indices).all(|(got, want)| *got == Some(*want));
        checks.push(if ok {
            Check::pass("indices", got.join(", "))
        } else {
            Check::fail(
                "indices",
                format!("got {}, expected {indices:?}", got.join(", ")),
            )
        });
    }
}

fn verify_reactive(
    man: &ImplicitManifold,
    x: &[f64],
    u: &[f64],
    want: &[f64],
    tol: f64,
) -> Check {
    let run = || -> Result<DVector<f64>> {
        let state = lift_chart_point(man, x, u)?;
        reactive_force(man, &state)
    };
    let r = match run() {
        Ok(r) => r,
        Err(e) => return Check::fail("reactive", e.to_string()),
    };
    if want.len() != r.len() {
        return Check::fail(
            "reactive",
            format!("expected vector has {} components, the force has {}", want.len(), r.len()),
        );
    }
    let err = r
        .iter()
        .zip(want)
        .map(|(got, want)| (got - want).abs() / (1.0 + want.abs()))
        .fold(0.0, f64::max);
    if err <= tol {
        Check::pass("reactive", format!("max component error {err:.3e}"))
    } else {
        Check::fail(
            "reactive",
            format!("max component error {err:.3e} over tolerance {tol:.1e}"),
        )
    }
}

fn verify_twin(file: &ProblemFile, man: &ImplicitManifold, budget: f64) -> Check {
    let run = || -> Result<f64> {
        let settings = file.integrate_settings()?;
        let force = file
            .build_force()?
            .ok_or_else(|| Error::invalid("the twin comparison needs an x_only [force]"))?;
        twin_run(man, &settings, force).map(|(_, gap)| gap)
    };
    match run() {
        Ok(gap) if gap <= budget => Check::pass("twin", format!("position gap {gap:.3e}")),
        Ok(gap) => Check::fail(
            "twin",
            format!("position gap {gap:.3e} over budget {budget:.1e}"),
        ),
        Err(e) => Check::fail("twin", e.to_string()),
    }
}

fn verify_branch(file: &ProblemFile, min_points: usize) -> Check {
    let run = || -> Result<BranchCurve> {
        let problem = file.periodic_problem()?;
        let origin = file
            .trace_origin()
            .ok_or_else(|| Error::invalid("the branch check needs a [continuation] origin"))?;
        trace_branch(&problem, &origin, &file.trace_opts())
    };
    let curve = match run() {
        Ok(curve) => curve,
        Err(e) => return Check::fail("branch", e.to_string()),
    };
    let n = curve.points.len();
    let first_lambda = curve.points.first().map_or(f64::NAN, |p| p.lambda);
    let worst = curve.points.iter().map(|p| p.residual).fold(0.0, f64::max);
    if n < min_points {
        Check::fail("branch", format!("{n} points, expected at least {min_points}"))
    } else if first_lambda != 0.0 {
        Check::fail("branch", format!("first point sits at lambda {first_lambda}, not 0"))
    } else if worst > SHOOT_TOL {
        Check::fail(
            "branch",
            format!("worst residual {worst:.3e} over {SHOOT_TOL:.1e}"),
        )
    } else {
        Check::pass(
            "branch",
            format!("{n} points from lambda 0, worst residual {worst:.3e}"),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::load_example;

    #[test]
    fn check_reports_the_constraint_sign() {
        let file = load_example("parabolamolla").unwrap();
        let out = cmd_check(&file).unwrap();
        assert_eq!(out.exit, 0);
        assert!(out.text.contains("s_sign: -1"), "{}", out.text);
        assert!(out.text.contains("status: ok"), "{}", out.text);
        assert_eq!(out.json["s_sign"], -1);
        assert!(out.json["spd_min_eigenvalue"].as_f64().unwrap() >= 1.0 - 1e-9);
    }

    #[test]
    fn check_rejects_a_seed_off_the_manifold() {
        let text = r#"
name = "bad"

[manifold]
m = 1
s = 1
g = ["x1^2/2 - y1 - 2"]
box = [[-3.0, 3.0], [-9.0, 9.0]]
chart_seed = [0.0, 7.0]
"#;
        let file = ProblemFile::parse(text).unwrap();
        let err = cmd_check(&file).unwrap_err();
        assert_eq!(err.exit_class(), 2);
        assert!(err.to_string().contains("off the manifold"), "{err}");
    }

    #[test]
    fn degree_of_the_hanging_bead_is_one() {
        let file = load_example("gravita").unwrap();
        let out = cmd_degree(&file, &DegreeFlags::default()).unwrap();
        assert_eq!(out.json["map"], "F");
        assert_eq!(out.json["report"]["degree"], 1);
        assert_eq!(out.json["report"]["s_sign"], 1);
        assert!(out.text.contains("degree: 1"), "{}", out.text);
    }

    #[test]
    fn degree_flags_override_the_file() {
        let file = load_example("parabola2").unwrap();
        let flags = DegreeFlags {
            grid: Some(6),
            ..DegreeFlags::default()
        };
        let out = cmd_degree(&file, &flags).unwrap();
        assert_eq!(out.json["grid"], 6);
        assert_eq!(out.json["report"]["degree"], 1);
        assert_eq!(out.json["report"]["manifold_degree"], -1);
    }

    #[test]
    fn degree_files_land_in_the_out_directory() {
        let dir = tempfile::tempdir().unwrap();
        let file = load_example("gravita").unwrap();
        let flags = DegreeFlags {
            out: Some(dir.path()),
            ..DegreeFlags::default()
        };
        let out = cmd_degree(&file, &flags).unwrap();
        assert!(out.text.contains("wrote:"), "{}", out.text);
        let report = std::fs::read_to_string(dir.path().join("degree.txt")).unwrap();
        assert!(report.contains("degree: 1"), "{report}");
        let csv = std::fs::read_to_string(dir.path().join("zeros.csv")).unwrap();
        assert!(csv.starts_with("x1,y1,index,detDF,cond"), "{csv}");
    }

    #[test]
    fn reactive_on_the_parabola_matches_the_closed_form() {
        let file = load_example("parabola1").unwrap();
        let out = cmd_reactive(&file, &[1.0], &[1.0]).unwrap();
        let r = out.json["r"].as_array().unwrap();
        assert!((r[0].as_f64().unwrap() + 0.5).abs() < 1e-12);
        assert!((r[1].as_f64().unwrap() - 0.5).abs() < 1e-12);
        assert!(out.json["route_gap"].as_f64().unwrap() < 1e-12);
    }

    #[test]
    fn simulate_conserves_the_constraint() {
        let file = load_example("gravita").unwrap();
        let flags = SimulateFlags {
            t1: Some(1.0),
            ..SimulateFlags::default()
        };
        let out = cmd_simulate(&file, &flags).unwrap();
        assert_eq!(out.json["samples"], 1001);
        assert!(out.json["max_g_drift"].as_f64().unwrap() < 1e-9);
    }

    #[test]
    fn twin_routes_stay_together() {
        let file = load_example("parabola2").unwrap();
        let flags = SimulateFlags {
            twin: true,
            t1: Some(2.0),
            ..SimulateFlags::default()
        };
        let out = cmd_simulate(&file, &flags).unwrap();
        assert!(out.json["twin_gap"].as_f64().unwrap() < 1e-6, "{}", out.text);
    }

    #[test]
    fn twin_flag_needs_a_first_block_force() {
        let file = load_example("gravita").unwrap();
        let flags = SimulateFlags {
            twin: true,
            ..SimulateFlags::default()
        };
        let err = cmd_simulate(&file, &flags).unwrap_err();
        assert!(err.to_string().contains("x_only"), "{err}");
    }

    #[test]
    fn trace_picks_the_origin_from_the_zero_set() {
        let file = load_example("dae_sin").unwrap();
        let flags = TraceFlags {
            origin: Some("auto"),
            ..TraceFlags::default()
        };
        let out = cmd_trace(&file, &flags).unwrap();
        assert_eq!(out.json["branch"][0]["lambda"], 0.0);
        assert!(out.text.contains("origin picked from the Phi map zero"), "{}", out.text);
        assert!(out.json["points"].as_u64().unwrap() >= 2);
    }

    #[test]
    fn trace_csv_lands_at_the_out_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("branch.csv");
        let file = load_example("dae_sin").unwrap();
        let flags = TraceFlags {
            out: Some(&path),
            ..TraceFlags::default()
        };
        cmd_trace(&file, &flags).unwrap();
        let csv = std::fs::read_to_string(&path).unwrap();
        assert!(csv.starts_with("lambda,x0_1,u0_1,residual,amplitude"), "{csv}");
        let first = csv.lines().nth(1).unwrap();
        let lambda: f64 = first.split(',').next().unwrap().parse().unwrap();
        assert_eq!(lambda, 0.0, "{first}");
    }

    #[test]
    fn example_list_names_all_the_problems() {
        let flags = ExampleFlags {
            list: true,
            ..ExampleFlags::default()
        };
        let out = cmd_example(None, &flags).unwrap();
        for name in EXAMPLE_NAMES {
            assert!(out.text.contains(name), "{}", out.text);
        }
        assert_eq!(out.json.as_array().unwrap().len(), EXAMPLE_NAMES.len());
    }

    #[test]
    fn example_writes_a_loadable_file() {
        let dir = tempfile::tempdir().unwrap();
        let flags = ExampleFlags {
            out: Some(dir.path()),
            ..ExampleFlags::default()
        };
        let out = cmd_example(Some("mostro"), &flags).unwrap();
        assert!(out.text.starts_with("wrote:"), "{}", out.text);
        let text = std::fs::read_to_string(dir.path().join("mostro.prob")).unwrap();
        let file = ProblemFile::parse(&text).unwrap();
        assert_eq!(file.name, "mostro");
    }

    #[test]
    fn unknown_example_is_an_input_error() {
        let err = cmd_example(Some("lemniscate"), &ExampleFlags::default()).unwrap_err();
        assert_eq!(err.exit_class(), 2);
    }

    #[test]
    fn verify_confirms_the_recorded_reactive_force() {
        let file = load_example("mostro").unwrap();
        let out = verify_example(&file).unwrap();
        assert_eq!(out.exit, 0, "{}", out.text);
        assert!(out.text.contains("reactive: pass"), "{}", out.text);
        assert!(out.text.ends_with("result: pass"), "{}", out.text);
    }

    #[test]
    fn verify_flags_a_wrong_expectation() {
        let text = r#"
name = "wrong"

[manifold]
m = 1
s = 1
g = ["x1^2/2 - y1 - 2"]
box = [[-3.0, 3.0], [-3.0, 3.0]]
chart_seed = [0.0, -2.0]

[expect]
reactive_x = [1.0]
reactive_u = [1.0]
reactive_r = [-0.5, 0.25]
"#;
        let file = ProblemFile::parse(text).unwrap();
        let out = verify_example(&file).unwrap();
        assert_eq!(out.exit, 1);
        assert!(out.text.contains("reactive: FAIL"), "{}", out.text);
        assert_eq!(out.json["passed"], false);
    }
}
