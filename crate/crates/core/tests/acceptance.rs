//! One test per shipped guarantee, each printing a single pass/fail line.
//! Expected numbers come from independent routes pinned in this file
//! (bisection of the defining polynomial, normal-equation solves, winding
//! counts, closed forms), never from the code path under test.

use std::time::{Duration, Instant};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use implicit_motion::cli::degree_for_file;
use implicit_motion::continuation::trace_branch;
use implicit_motion::degree::{
    degree_sign_sum, degree_winding2d, AugmentedMap, DegreeMethod, ExprMap, FirstBlock,
    MeanField, ZeroSearchOpts,
};
use implicit_motion::dynamics::{
    dae_lift, integrate, reactive_force, reactive_force_normal_solve, second_order_field,
    IntegrateOpts,
};
use implicit_motion::expr::VectorExpr;
use implicit_motion::manifold::{position_vars, ImplicitManifold, PhaseState};
use implicit_motion::problem::load_example;

const SAMPLE_SEED: u64 = 0xacce_5511;

fn report(name: &str, outcome: Result<String, String>) {
    match outcome {
        Ok(detail) => println!("acceptance: {name}: pass ({detail})"),
        Err(detail) => {
            println!("acceptance: {name}: fail ({detail})");
            panic!("{name}: {detail}");
        }
    }
}

/// Lift chart coordinates to a full on-manifold state.
fn lift(man: &ImplicitManifold, x: &DVector<f64>, u: &DVector<f64>) -> PhaseState {
    let (m, s) = (man.m(), man.s());
    let y = man.chart_solve_y(x, man.chart_seed()).expect("chart solve");
    let mut xi = DVector::zeros(m + s);
    xi.rows_mut(0, m).copy_from(x);
    xi.rows_mut(m, s).copy_from(&y);
    let v = man.complete_velocity(&xi, u).expect("velocity completion");
    let mut eta = DVector::zeros(m + s);
    eta.rows_mut(0, m).copy_from(u);
    eta.rows_mut(m, s).copy_from(&v);
    PhaseState::new(xi, eta)
}

#[test]
fn degree_reproduction() {
    // dae3d: the origin is the designed zero of this example and carries
    // index -1, the degree this line pins. The search also finds a second
    // zero near (-0.391, -0.196, -0.349) with index +1 inside the same box,
    // so the computed total is 0; docs/discrepancy-report.md works through
    // both computations by hand. Kept red rather than widening the box or
    // dropping the second zero: the bundled manifest records the total.
    let cases: [(&str, i64); 4] = [
        ("gravita", 1),
        ("parabolamolla", 1),
        ("dae_sin", -1),
        ("dae3d", -1),
    ];
    let budget = Duration::from_secs(10);
    let mut failures = Vec::new();
    let mut details = Vec::new();
    for (name, want) in cases {
        let file = load_example(name).expect("bundled example");
        let man = file.build_manifold().expect("manifold");
        let started = Instant::now();
        match degree_for_file(&file, &man, None, None, false) {
            Ok((rep, _, _)) => {
                let took = started.elapsed();
                if took > budget {
                    failures.push(format!("{name}: took {took:.1?}"));
                }
                if rep.degree == want {
                    details.push(format!("{name} {want:+}"));
                } else {
                    failures.push(format!("{name}: degree {} (pinned {want})", rep.degree));
                }
            }
            Err(e) => failures.push(format!("{name}: {e}")),
        }
    }
    let outcome = if failures.is_empty() {
        Ok(details.join(", "))
    } else {
        Err(failures.join("; "))
    };
    report("degree reproduction", outcome);
}

fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    assert!(f(lo) * f(hi) < 0.0, "bisection needs a sign change");
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(lo) * f(mid) <= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn zero_sets() {
    const TOL: f64 = 1e-8;
    let mut failures = Vec::new();

    let file = load_example("parabolamolla").expect("bundled example");
    let man = file.build_manifold().expect("manifold");
    let (rep, _, _) = degree_for_file(&file, &man, None, None, false).expect("degree");
    let want = [
        [-std::f64::consts::SQRT_2, -1.0],
        [0.0, -2.0],
        [std::f64::consts::SQRT_2, -1.0],
    ];
    if rep.zeros.len() != want.len() {
        failures.push(format!("parabolamolla: {} zeros, expected 3", rep.zeros.len()));
    }
    for target in want {
        let dist = rep
            .zeros
            .iter()
            .map(|z| {
                z.point
                    .iter()
                    .zip(target)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .fold(f64::INFINITY, f64::min);
        if dist > TOL {
            failures.push(format!(
                "parabolamolla zero near ({}, {}): distance {dist:.3e}",
                target[0], target[1]
            ));
        }
    }

    let file = load_example("gravita").expect("bundled example");
    let man = file.build_manifold().expect("manifold");
    let (rep, _, _) = degree_for_file(&file, &man, None, None, false).expect("degree");
    if rep.zeros.len() != 1 {
        failures.push(format!("gravita: {} zeros, expected 1", rep.zeros.len()));
    } else {
        let found = rep.zeros[0].point[0].abs();
        let quartic = |x: f64| 4.0 * x.powi(4) - 4.0 * x * x - 1.0;
        let root = bisect(1.0, 2.0, quartic);
        let closed = 0.5 * (2.0 + 2.0 * std::f64::consts::SQRT_2).sqrt();
        if (root - closed).abs() > 1e-12 {
            failures.push(format!(
                "bisection root {root} disagrees with the closed form {closed}"
            ));
        }
        if (found - root).abs() > TOL {
            failures.push(format!(
                "gravita abscissa {found} vs bisection {root}: gap {:.3e}",
                (found - root).abs()
            ));
        }
    }

    let outcome = if failures.is_empty() {
        Ok("parabolamolla triple and gravita abscissa within 1e-8 of the oracles".into())
    } else {
        Err(failures.join("; "))
    };
    report("zero sets", outcome);
}

/// Graph constraint `y_i = q_i(x)` with random quadratic `q_i`, so the
/// second Jacobian block is the identity and the curvature is nonzero.
fn random_graph_manifold(rng: &mut ChaCha8Rng, m: usize, s: usize) -> ImplicitManifold {
    let vars = position_vars(m, s);
    let mut sources = Vec::new();
    for i in 0..s {
        let mut expr = format!("y{}", i + 1);
        for j in 0..m {
            let lin: f64 = rng.gen_range(-0.4..0.4);
            expr.push_str(&format!(" {lin:+.17e}*x{}", j + 1));
            for k in j..m {
                let quad: f64 = rng.gen_range(-0.4..0.4);
                expr.push_str(&format!(" {quad:+.17e}*x{}*x{}", j + 1, k + 1));
            }
        }
        sources.push(expr);
    }
    let g = VectorExpr::parse_components(&sources, &vars).expect("random constraint parses");
    let mut domain = vec![(-1.0, 1.0); m];
    domain.extend(vec![(-3.0, 3.0); s]);
    ImplicitManifold::new(g, m, s, domain).expect("graph constraint is regular")
}

#[test]
fn reactive_force_equals_the_normal_solve_oracle() {
    const STATES: usize = 1000;
    const TOL: f64 = 1e-9;
    let mut rng = ChaCha8Rng::seed_from_u64(SAMPLE_SEED);
    let mut manifolds: Vec<(String, ImplicitManifold)> = Vec::new();
    for name in ["parabola1", "paraboloid", "mostro"] {
        let file = load_example(name).expect("bundled example");
        manifolds.push((name.to_string(), file.build_manifold().expect("manifold")));
    }
    for (m, s) in [(1, 1), (2, 1), (1, 2), (2, 2), (3, 1)] {
        manifolds.push((
            format!("random graph ({m},{s})"),
            random_graph_manifold(&mut rng, m, s),
        ));
    }
    let mut worst = 0.0_f64;
    let mut failures = Vec::new();
    for (name, man) in &manifolds {
        for _ in 0..STATES {
            let state = man.sample_state(&mut rng).expect("on-manifold sample");
            let r = reactive_force(man, &state).expect("closed-form route");
            let oracle = reactive_force_normal_solve(man, &state).expect("normal solve");
            let err = (&r - &oracle).amax() / (1.0 + oracle.amax());
            worst = worst.max(err);
            if err > TOL {
                failures.push(format!("{name}: relative gap {err:.3e} at {:?}", state.xi));
                break;
            }
        }
    }
    let outcome = if failures.is_empty() {
        Ok(format!(
            "{} manifolds x {STATES} states, worst relative gap {worst:.3e}",
            manifolds.len()
        ))
    } else {
        Err(failures.join("; "))
    };
    report("reactive force oracle", outcome);
}

#[test]
fn constraint_block_form_stays_positive_definite() {
    const POINTS_PER_EXAMPLE: usize = 1250;
    const FLOOR: f64 = -1e-8;
    let names = [
        "gravita",
        "parabolamolla",
        "parabola1",
        "paraboloid",
        "mostro",
        "parabola2",
        "dae_sin",
        "dae3d",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(SAMPLE_SEED);
    let mut min_eig = f64::INFINITY;
    let mut failures = Vec::new();
    for name in names {
        let file = load_example(name).expect("bundled example");
        let man = file.build_manifold().expect("manifold");
        for _ in 0..POINTS_PER_EXAMPLE {
            let state = man.sample_state(&mut rng).expect("on-manifold sample");
            let split = man.jacobians(&state.xi).expect("split Jacobian");
            let q = split.b_inverse() * &split.c;
            let sym = 0.5 * (&q + q.transpose());
            let eig = sym.symmetric_eigenvalues().min();
            min_eig = min_eig.min(eig);
            if eig <= FLOOR {
                failures.push(format!("{name}: eigenvalue {eig:.3e} at {:?}", state.xi));
                break;
            }
        }
    }
    let outcome = if failures.is_empty() {
        Ok(format!(
            "{} points across {} examples, smallest eigenvalue {min_eig:.6}",
            POINTS_PER_EXAMPLE * names.len(),
            names.len()
        ))
    } else {
        Err(failures.join("; "))
    };
    report("constraint form positivity", outcome);
}

#[test]
fn lifted_and_projected_routes_agree() {
    const TRIALS: usize = 20;
    const GAP_TOL: f64 = 1e-6;
    const DRIFT_TOL: f64 = 1e-8;
    // The dae3d window stays inside the potential well around the origin;
    // starts past the saddle near x = -0.39 run off to infinity.
    let windows: [(&str, f64, f64, f64); 2] = [
        ("parabola2", -1.5, 1.5, 0.5),
        ("dae3d", -0.1, 0.25, 0.1),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(SAMPLE_SEED);
    let mut worst_gap = 0.0_f64;
    let mut worst_drift = 0.0_f64;
    let mut failures = Vec::new();
    for (name, lo, hi, umax) in windows {
        let file = load_example(name).expect("bundled example");
        let man = file.build_manifold().expect("manifold");
        let force = file.build_force().expect("force parses").expect("force present");
        let lifted = dae_lift(&man, force).expect("lift");
        let projected = lifted.with_projection();
        for _ in 0..TRIALS {
            let x = DVector::from_fn(man.m(), |_, _| rng.gen_range(lo..hi));
            let u = DVector::from_fn(man.m(), |_, _| rng.gen_range(-umax..umax));
            let state0 = lift(&man, &x, &u);
            let dae_opts = IntegrateOpts {
                h: 1e-3,
                project: false,
                ..IntegrateOpts::default()
            };
            let dae = integrate(
                &man,
                |t, xi, eta| lifted.eval(&man, t, xi, eta),
                &state0,
                0.0,
                5.0,
                &dae_opts,
            )
            .expect("lifted route");
            let ode_opts = IntegrateOpts {
                h: 1e-3,
                ..IntegrateOpts::default()
            };
            let ode = integrate(
                &man,
                |t, xi, eta| {
                    let state = PhaseState::new(xi.clone(), eta.clone());
                    second_order_field(&man, &projected, t, &state).map(|(_, a)| a)
                },
                &state0,
                0.0,
                5.0,
                &ode_opts,
            )
            .expect("projected route");
            assert_eq!(dae.samples.len(), ode.samples.len());
            let gap = dae
                .samples
                .iter()
                .zip(&ode.samples)
                .map(|((_, a, _), (_, b, _))| (&a.xi - &b.xi).amax())
                .fold(0.0, f64::max);
            worst_gap = worst_gap.max(gap);
            worst_drift = worst_drift.max(ode.max_g_drift);
            if gap > GAP_TOL {
                failures.push(format!("{name}: route gap {gap:.3e} from x {x:?}"));
            }
            if ode.max_g_drift > DRIFT_TOL {
                failures.push(format!("{name}: drift {:.3e} from x {x:?}", ode.max_g_drift));
            }
        }
    }
    let outcome = if failures.is_empty() {
        Ok(format!(
            "2 examples x {TRIALS} starts over [0, 5]: worst gap {worst_gap:.3e}, worst drift {worst_drift:.3e}"
        ))
    } else {
        Err(failures.join("; "))
    };
    report("lifted vs projected routes", outcome);
}

#[test]
fn degree_cross_validation() {
    let mut failures = Vec::new();
    let mut details = Vec::new();

    for name in ["gravita", "parabolamolla", "parabola2", "dae_sin"] {
        let file = load_example(name).expect("bundled example");
        let man = file.build_manifold().expect("manifold");
        match degree_for_file(&file, &man, None, None, true) {
            Ok((rep, _, _)) => {
                if rep.method == DegreeMethod::Both {
                    details.push(format!("{name} {:+}", rep.degree));
                } else {
                    failures.push(format!("{name}: method {:?}", rep.method));
                }
            }
            Err(e) => failures.push(format!("{name}: {e}")),
        }
    }

    let vars = position_vars(2, 0);
    let unit = [(-1.0, 1.0), (-1.0, 1.0)];
    let opts = ZeroSearchOpts::default();
    let square = ExprMap::parse(
        &["x1^2 - x2^2".into(), "2*x1*x2".into()],
        &vars,
    )
    .expect("square map parses");
    let winding = degree_winding2d(&square, &unit).expect("winding");
    if winding != 2 {
        failures.push(format!("square winding {winding}, expected 2"));
    }
    let shifted = ExprMap::parse(
        &["x1^2 - x2^2 - 0.3".into(), "2*x1*x2 - 0.2".into()],
        &vars,
    )
    .expect("shifted square parses");
    let sign_sum = degree_sign_sum(&shifted, &unit, &opts).expect("sign sum").degree;
    let shifted_winding = degree_winding2d(&shifted, &unit).expect("winding");
    if sign_sum != 2 || shifted_winding != 2 {
        failures.push(format!(
            "shifted square: sign sum {sign_sum}, winding {shifted_winding}, expected 2"
        ));
    }
    details.push("square map counted twice by both routes".into());

    let file = load_example("parabolamolla").expect("bundled example");
    let man = file.build_manifold().expect("manifold");
    let force = file.build_force().expect("force parses").expect("force present");
    let map = AugmentedMap::new(&man, FirstBlock::Frozen(&force)).expect("augmented map");
    let whole_bounds = [(-3.0, 3.0), (-3.0, 3.0)];
    let grid = ZeroSearchOpts {
        grid_per_axis: 8,
        ..ZeroSearchOpts::default()
    };
    let whole = degree_sign_sum(&map, &whole_bounds, &grid).expect("whole box").degree;
    let zero_coords: [Vec<f64>; 2] = [
        vec![-std::f64::consts::SQRT_2, 0.0, std::f64::consts::SQRT_2],
        vec![-1.0, -2.0],
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(SAMPLE_SEED);
    let mut cuts = 0;
    while cuts < 12 {
        let axis = rng.gen_range(0..2usize);
        let cut: f64 = rng.gen_range(-2.5..2.5);
        if zero_coords[axis].iter().any(|z| (z - cut).abs() < 0.1) {
            continue;
        }
        let mut left = whole_bounds;
        left[axis].1 = cut;
        let mut right = whole_bounds;
        right[axis].0 = cut;
        let dl = degree_sign_sum(&map, &left, &grid).expect("left box").degree;
        let dr = degree_sign_sum(&map, &right, &grid).expect("right box").degree;
        if dl + dr != whole {
            failures.push(format!(
                "cut axis {axis} at {cut:.3}: {dl} + {dr} != {whole}"
            ));
        }
        cuts += 1;
    }
    details.push(format!("additive over {cuts} random box cuts"));

    let outcome = if failures.is_empty() {
        Ok(details.join(", "))
    } else {
        Err(failures.join("; "))
    };
    report("degree cross-validation", outcome);
}

#[test]
fn branch_grows_from_the_equilibrium() {
    const MIN_POINTS: usize = 50;
    const RESIDUAL_TOL: f64 = 1e-8;
    let budget = Duration::from_secs(120);
    let started = Instant::now();
    let file = load_example("parabolamolla").expect("bundled example");
    let problem = file.periodic_problem().expect("periodic problem");
    let origin = file.trace_origin().expect("declared origin");
    let curve = trace_branch(&problem, &origin, &file.trace_opts()).expect("trace");
    let took = started.elapsed();

    let mut failures = Vec::new();
    if curve.points.len() < MIN_POINTS {
        failures.push(format!("{} points, expected at least {MIN_POINTS}", curve.points.len()));
    }
    if curve.points.first().map(|p| p.lambda) != Some(0.0) {
        failures.push("first point is not the unforced equilibrium".into());
    }
    let worst = curve.points.iter().map(|p| p.residual).fold(0.0, f64::max);
    if worst > RESIDUAL_TOL {
        failures.push(format!("worst residual {worst:.3e}"));
    }
    let near_origin: Vec<&_> = curve.points.iter().skip(1).take(10).collect();
    if near_origin.len() == 10 {
        let monotone = near_origin
            .windows(2)
            .all(|w| w[0].lambda < w[1].lambda && w[0].amplitude < w[1].amplitude);
        if !monotone {
            failures.push("amplitude does not shrink monotonically toward lambda 0".into());
        }
    } else {
        failures.push("fewer than 10 points near the origin".into());
    }
    if took > budget {
        failures.push(format!("took {took:.1?}"));
    }
    let outcome = if failures.is_empty() {
        Ok(format!(
            "{} points, worst residual {worst:.3e}, {took:.1?}",
            curve.points.len()
        ))
    } else {
        Err(failures.join("; "))
    };
    report("branch from the equilibrium", outcome);
}

#[test]
fn mean_field_matches_the_time_average() {
    const POINTS: usize = 100;
    const TOL: f64 = 1e-12;
    let file = load_example("dae_sin").expect("bundled example");
    let man = file.build_manifold().expect("manifold");
    let h = file
        .build_perturbation()
        .expect("perturbation parses")
        .expect("perturbation present");
    let mean = MeanField::new(&man, &h).expect("mean field");
    let mut rng = ChaCha8Rng::seed_from_u64(SAMPLE_SEED);
    let mut worst = 0.0_f64;
    let mut failures = Vec::new();
    for _ in 0..POINTS {
        let xi = DVector::from_fn(man.dim(), |i, _| {
            let (lo, hi) = man.domain()[i];
            rng.gen_range(lo..hi)
        });
        let w = mean.eval(&xi).expect("average");
        let err = (w[0] - xi[0]).abs();
        worst = worst.max(err);
        if err > TOL {
            failures.push(format!("gap {err:.3e} at {:?}", xi));
        }
    }
    let outcome = if failures.is_empty() {
        Ok(format!("{POINTS} points, worst gap {worst:.3e}"))
    } else {
        Err(failures.join("; "))
    };
    report("mean field exactness", outcome);
}
