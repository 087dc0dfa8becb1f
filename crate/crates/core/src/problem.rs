//! Plain-text problem files: the constraint, the applied force, the
//! periodic forcing and per-stage solver settings in one TOML document,
//! plus an optional manifest of expected results used by the example
//! verifier. The built-in examples ship as files embedded in the
//! binary and materialized on request.

use nalgebra::DVector;
use serde::Deserialize;

use crate::continuation::{PeriodicProblem, TraceOpts};
use crate::dynamics::{ForceField, IntegrateOpts, Method, Tangency};
use crate::error::{Error, Result};
use crate::expr::VectorExpr;
use crate::manifold::{phase_vars, position_vars, ImplicitManifold, PhaseState};

/// A parsed problem file. Section structs stay close to the text form;
/// the builder methods turn them into the library's working types and
/// carry out the cross-section dimension checks.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    pub name: String,
    #[serde(default)]
    pub title: Option<String>,
    pub manifold: ManifoldSection,
    #[serde(default)]
    pub force: Option<FieldSection>,
    #[serde(default)]
    pub perturbation: Option<PerturbationSection>,
    #[serde(default)]
    pub degree: Option<DegreeSection>,
    #[serde(default)]
    pub continuation: Option<ContinuationSection>,
    #[serde(default)]
    pub integrate: Option<IntegrateSection>,
    #[serde(default)]
    pub expect: Option<ExpectSection>,
}

/// `[manifold]`: constraint components over `x1..xm, y1..ys` and the
/// working box, one `[lo, hi]` pair per ambient coordinate.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifoldSection {
    pub m: usize,
    pub s: usize,
    pub g: Vec<String>,
    #[serde(rename = "box")]
    pub bounds: Vec<[f64; 2]>,
    #[serde(default)]
    pub chart_seed: Option<Vec<f64>>,
    #[serde(default)]
    pub on_tol: Option<f64>,
}

/// How the components of a field relate to the constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    /// Full-width components asserted to be tangent; spot-checked.
    Tangent,
    /// Full-width components projected onto the tangent space at every
    /// evaluation.
    Projected,
    /// Full-width components used raw, normal part included.
    Ambient,
    /// Only the independent-block acceleration; the dependent block
    /// follows from the constraint.
    XOnly,
}

impl Default for FieldKind {
    fn default() -> Self {
        FieldKind::Projected
    }
}

impl FieldKind {
    fn split(self) -> (Tangency, bool) {
        match self {
            FieldKind::Tangent => (Tangency::DeclaredTangent, false),
            FieldKind::Projected => (Tangency::DeclaredTangent, true),
            FieldKind::Ambient => (Tangency::Ambient, false),
            FieldKind::XOnly => (Tangency::XOnly, false),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FieldKind::Tangent => "tangent",
            FieldKind::Projected => "projected",
            FieldKind::Ambient => "ambient",
            FieldKind::XOnly => "x_only",
        }
    }
}

/// `[force]`: autonomous applied force over the phase variables.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSection {
    pub f: Vec<String>,
    #[serde(default)]
    pub kind: FieldKind,
    #[serde(default)]
    pub potential: Option<String>,
}

/// `[perturbation]`: `T`-periodic forcing scaled by the continuation
/// parameter.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSection {
    pub h: Vec<String>,
    #[serde(default)]
    pub kind: FieldKind,
    pub period: f64,
}

/// `[degree]`: multistart settings and the map the degree is taken of.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegreeSection {
    /// `F` augments the force's independent block, `Phi` the time
    /// average of the perturbation.
    #[serde(default)]
    pub map: Option<String>,
    #[serde(default = "default_grid")]
    pub grid: usize,
    #[serde(rename = "box", default)]
    pub bounds: Option<Vec<[f64; 2]>>,
}

fn default_grid() -> usize {
    8
}

/// `[continuation]`: branch-tracing budget and step sizes.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinuationSection {
    #[serde(default)]
    pub origin: Option<Vec<f64>>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub ds0: Option<f64>,
    #[serde(default)]
    pub ds_min: Option<f64>,
    #[serde(default)]
    pub ds_max: Option<f64>,
    #[serde(default)]
    pub fold_limit: Option<usize>,
}

fn default_steps() -> usize {
    200
}

/// `[integrate]`: time span, step and chart initial conditions for a
/// simulation run.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegrateSection {
    #[serde(default)]
    pub t0: f64,
    pub t1: f64,
    #[serde(default = "default_step")]
    pub h: f64,
    #[serde(default = "default_method")]
    pub method: String,
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    #[serde(default)]
    pub u0: Option<Vec<f64>>,
}

fn default_step() -> f64 {
    1e-3
}

fn default_method() -> String {
    "rk4_proj".to_string()
}

/// `[expect]`: the manifest driving `example --verify`. Every field is
/// optional; only the declared checks run.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpectSection {
    #[serde(default)]
    pub degree: Option<i64>,
    #[serde(default)]
    pub s_sign: Option<i8>,
    #[serde(default)]
    pub manifold_degree: Option<i64>,
    #[serde(default)]
    pub zeros: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub indices: Option<Vec<i8>>,
    #[serde(default = "default_zero_tol")]
    pub zero_tol: f64,
    #[serde(default)]
    pub reactive_x: Option<Vec<f64>>,
    #[serde(default)]
    pub reactive_u: Option<Vec<f64>>,
    #[serde(default)]
    pub reactive_r: Option<Vec<f64>>,
    #[serde(default = "default_reactive_tol")]
    pub reactive_tol: f64,
    #[serde(default)]
    pub twin_gap: Option<f64>,
    #[serde(default)]
    pub branch_points: Option<usize>,
    #[serde(default)]
    pub note: Option<String>,
}

fn default_zero_tol() -> f64 {
    1e-8
}

fn default_reactive_tol() -> f64 {
    1e-9
}

impl ProblemFile {
    /// Parse and cross-validate a problem file.
    pub fn parse(text: &str) -> Result<Self> {
        let file: ProblemFile =
            toml::from_str(text).map_err(|e| Error::invalid(format!("problem file: {e}")))?;
        file.validate()?;
        Ok(file)
    }

    fn validate(&self) -> Result<()> {
        let m = self.manifold.m;
        let s = self.manifold.s;
        if m == 0 || s == 0 {
            return Err(Error::invalid(
                "manifold dimensions m and s must both be positive",
            ));
        }
        if self.manifold.g.len() != s {
            return Err(Error::invalid(format!(
                "constraint declares s = {s} but [manifold] lists {} component(s)",
                self.manifold.g.len()
            )));
        }
        if self.manifold.bounds.len() != m + s {
            return Err(Error::invalid(format!(
                "working box needs {} coordinate ranges, got {}",
                m + s,
                self.manifold.bounds.len()
            )));
        }
        if let Some(seed) = &self.manifold.chart_seed {
            if seed.len() != m + s {
                return Err(Error::invalid(format!(
                    "chart seed needs {} entries, got {}",
                    m + s,
                    seed.len()
                )));
            }
        }
        if let Some(force) = &self.force {
            let want = match force.kind {
                FieldKind::XOnly => m,
                _ => m + s,
            };
            if force.f.len() != want {
                return Err(Error::invalid(format!(
                    "[force] lists {} component(s), expected {want}",
                    force.f.len()
                )));
            }
        }
        if let Some(pert) = &self.perturbation {
            let want = match pert.kind {
                FieldKind::XOnly => m,
                _ => m + s,
            };
            if pert.h.len() != want {
                return Err(Error::invalid(format!(
                    "[perturbation] lists {} component(s), expected {want}",
                    pert.h.len()
                )));
            }
        }
        if let Some(section) = &self.degree {
            if let Some(bounds) = &section.bounds {
                if bounds.len() != m + s {
                    return Err(Error::invalid(format!(
                        "[degree] box needs {} coordinate ranges, got {}",
                        m + s,
                        bounds.len()
                    )));
                }
            }
            if let Some(map) = &section.map {
                if map != "F" && map != "Phi" {
                    return Err(Error::invalid(format!(
                        "[degree] map must be F or Phi, got `{map}`"
                    )));
                }
            }
        }
        if let Some(section) = &self.continuation {
            if let Some(origin) = &section.origin {
                if origin.len() != m {
                    return Err(Error::invalid(format!(
                        "[continuation] origin needs {m} entries, got {}",
                        origin.len()
                    )));
                }
            }
        }
        if let Some(section) = &self.integrate {
            for (label, block) in [("x0", &section.x0), ("u0", &section.u0)] {
                if let Some(block) = block {
                    if block.len() != m {
                        return Err(Error::invalid(format!(
                            "[integrate] {label} needs {m} entries, got {}",
                            block.len()
                        )));
                    }
                }
            }
            Method::from_name(&section.method)?;
        }
        if let Some(expect) = &self.expect {
            if let Some(zeros) = &expect.zeros {
                for z in zeros {
                    if z.len() != m + s {
                        return Err(Error::invalid(format!(
                            "[expect] zeros need {} coordinates each, got {}",
                            m + s,
                            z.len()
                        )));
                    }
                }
                if let Some(indices) = &expect.indices {
                    if indices.len() != zeros.len() {
                        return Err(Error::invalid(format!(
                            "[expect] lists {} zero(s) but {} index(es)",
                            zeros.len(),
                            indices.len()
                        )));
                    }
                }
            }
            let widths = [
                ("reactive_x", &expect.reactive_x, m),
                ("reactive_u", &expect.reactive_u, m),
                ("reactive_r", &expect.reactive_r, m + s),
            ];
            for (label, block, want) in widths {
                if let Some(block) = block {
                    if block.len() != want {
                        return Err(Error::invalid(format!(
                            "[expect] {label} needs {want} entries, got {}",
                            block.len()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Build the manifold with the file's box, seed and tolerance.
    pub fn build_manifold(&self) -> Result<ImplicitManifold> {
        let m = self.manifold.m;
        let s = self.manifold.s;
        let g = VectorExpr::parse_components(&self.manifold.g, &position_vars(m, s))?;
        let domain = self
            .manifold
            .bounds
            .iter()
            .map(|&[lo, hi]| (lo, hi))
            .collect();
        let mut man = ImplicitManifold::new(g, m, s, domain)?;
        if let Some(tol) = self.manifold.on_tol {
            man = man.with_on_tol(tol);
        }
        if let Some(seed) = &self.manifold.chart_seed {
            man = man.with_chart_seed(DVector::from_vec(seed[m..].to_vec()));
        }
        Ok(man)
    }

    fn build_field(
        &self,
        components: &[String],
        kind: FieldKind,
        period: Option<f64>,
    ) -> Result<ForceField> {
        let m = self.manifold.m;
        let s = self.manifold.s;
        let expr = VectorExpr::parse_components(components, &phase_vars(m, s, true))?;
        let (tangency, project) = kind.split();
        ForceField::from_expr(expr, m, s, period, tangency, project)
    }

    /// Build the `[force]` field, if the section is present.
    pub fn build_force(&self) -> Result<Option<ForceField>> {
        self.force
            .as_ref()
            .map(|section| self.build_field(&section.f, section.kind, None))
            .transpose()
    }

    /// Build the `[perturbation]` field, if the section is present.
    pub fn build_perturbation(&self) -> Result<Option<ForceField>> {
        self.perturbation
            .as_ref()
            .map(|section| self.build_field(&section.h, section.kind, Some(section.period)))
            .transpose()
    }

    /// Chart anchor used for sheet selection: the file's seed point with
    /// zero velocity, or the centre of the independent box lifted through
    /// a chart solve when the file declares none.
    pub fn chart_anchor(&self, man: &ImplicitManifold) -> Result<PhaseState> {
        let m = self.manifold.m;
        let xi = match &self.manifold.chart_seed {
            Some(seed) => DVector::from_vec(seed.clone()),
            None => {
                let x = DVector::from_iterator(
                    m,
                    self.manifold.bounds[..m].iter().map(|&[lo, hi]| 0.5 * (lo + hi)),
                );
                let y = man.chart_solve_y(&x, man.chart_seed())?;
                let mut xi = DVector::zeros(man.dim());
                xi.rows_mut(0, m).copy_from(&x);
                xi.rows_mut(m, man.s()).copy_from(&y);
                xi
            }
        };
        Ok(PhaseState::new(xi, DVector::zeros(man.dim())))
    }

    /// Assemble the periodic-orbit problem for branch tracing.
    pub fn periodic_problem(&self) -> Result<PeriodicProblem> {
        let man = self.build_manifold()?;
        let force = self.build_force()?;
        let section = self.perturbation.as_ref().ok_or_else(|| {
            Error::invalid("branch tracing needs a [perturbation] section")
        })?;
        let h = self.build_perturbation()?.expect("section just checked");
        let anchor = self.chart_anchor(&man)?;
        let shoot_opts = IntegrateOpts {
            h: section.period / 512.0,
            method: Method::Rk4Proj,
            project: true,
            ..IntegrateOpts::default()
        };
        PeriodicProblem::new(man, force, h, section.period, anchor, shoot_opts)
    }

    /// Branch-tracing options from `[continuation]`, with the module
    /// defaults filling the gaps.
    pub fn trace_opts(&self) -> TraceOpts {
        let defaults = TraceOpts::default();
        let Some(section) = &self.continuation else {
            return defaults;
        };
        TraceOpts {
            max_points: section.steps,
            ds0: section.ds0.unwrap_or(defaults.ds0),
            ds_min: section.ds_min.unwrap_or(defaults.ds_min),
            ds_max: section.ds_max.unwrap_or(defaults.ds_max),
            fold_limit: section.fold_limit.unwrap_or(defaults.fold_limit),
            store_orbits: false,
        }
    }

    /// Declared continuation origin, if any.
    pub fn trace_origin(&self) -> Option<DVector<f64>> {
        self.continuation
            .as_ref()
            .and_then(|section| section.origin.as_ref())
            .map(|origin| DVector::from_vec(origin.clone()))
    }

    /// Integration settings from `[integrate]`; an error when the
    /// section is missing.
    pub fn integrate_settings(&self) -> Result<SimulateSettings> {
        let section = self.integrate.as_ref().ok_or_else(|| {
            Error::invalid("simulation needs an [integrate] section")
        })?;
        if !(section.t1 > section.t0) {
            return Err(Error::invalid(format!(
                "integration span [{}, {}] is empty",
                section.t0, section.t1
            )));
        }
        let m = self.manifold.m;
        let x0 = match &section.x0 {
            Some(x0) => DVector::from_vec(x0.clone()),
            None => match &self.manifold.chart_seed {
                Some(seed) => DVector::from_vec(seed[..m].to_vec()),
                None => DVector::zeros(m),
            },
        };
        let u0 = match &section.u0 {
            Some(u0) => DVector::from_vec(u0.clone()),
            None => DVector::zeros(m),
        };
        Ok(SimulateSettings {
            t0: section.t0,
            t1: section.t1,
            opts: IntegrateOpts {
                h: section.h,
                method: Method::from_name(&section.method)?,
                ..IntegrateOpts::default()
            },
            x0,
            u0,
        })
    }
}

/// Resolved `[integrate]` section: span, options and chart initial
/// conditions.
#[derive(Debug, Clone)]
pub struct SimulateSettings {
    pub t0: f64,
    pub t1: f64,
    pub opts: IntegrateOpts,
    pub x0: DVector<f64>,
    pub u0: DVector<f64>,
}

/// Names of the built-in examples, in presentation order.
pub const EXAMPLE_NAMES: [&str; 8] = [
    "gravita",
    "parabolamolla",
    "parabola1",
    "paraboloid",
    "mostro",
    "parabola2",
    "dae_sin",
    "dae3d",
];

/// Source text of a built-in example.
pub fn example_source(name: &str) -> Result<&'static str> {
    macro_rules! prob {
        ($file:literal) => {
            include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/../../problems/", $file))
        };
    }
    match name {
        "gravita" => Ok(prob!("gravita.prob")),
        "parabolamolla" => Ok(prob!("parabolamolla.prob")),
        "parabola1" => Ok(prob!("parabola1.prob")),
        "paraboloid" => Ok(prob!("paraboloid.prob")),
        "mostro" => Ok(prob!("mostro.prob")),
        "parabola2" => Ok(prob!("parabola2.prob")),
        "dae_sin" => Ok(prob!("dae_sin.prob")),
        "dae3d" => Ok(prob!("dae3d.prob")),
        other => Err(Error::invalid(format!(
            "unknown example `{other}`; the built-in names are {}",
            EXAMPLE_NAMES.join(", ")
        ))),
    }
}

/// Parse a built-in example.
pub fn load_example(name: &str) -> Result<ProblemFile> {
    ProblemFile::parse(example_source(name)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_file() -> String {
        r#"
name = "toy"

[manifold]
m = 1
s = 1
g = ["x1^2/2 - y1 - 2"]
box = [[-3.0, 3.0], [-3.0, 3.0]]
chart_seed = [0.0, -2.0]
"#
        .to_string()
    }

    #[test]
    fn built_in_examples_parse_and_build() {
        for name in EXAMPLE_NAMES {
            let file = load_example(name).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(file.name, name);
            let man = file.build_manifold().unwrap_or_else(|e| panic!("{name}: {e}"));
            let anchor = file.chart_anchor(&man).unwrap();
            let seed_residual = man.residual_norm(&anchor.xi).unwrap();
            assert!(
                seed_residual <= man.on_tol(),
                "{name}: chart seed residual {seed_residual}"
            );
            file.build_force().unwrap_or_else(|e| panic!("{name}: {e}"));
            file.build_perturbation()
                .unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn examples_with_a_perturbation_assemble_the_periodic_problem() {
        for name in EXAMPLE_NAMES {
            let file = load_example(name).unwrap();
            if file.perturbation.is_none() {
                continue;
            }
            let problem = file
                .periodic_problem()
                .unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(problem.chart_dim(), 2 * file.manifold.m);
        }
    }

    #[test]
    fn unknown_example_names_are_rejected() {
        let err = example_source("pendulum").unwrap_err();
        assert!(err.to_string().contains("unknown example"), "{err}");
        assert!(load_example("").is_err());
    }

    #[test]
    fn minimal_file_gets_the_documented_defaults() {
        let file = ProblemFile::parse(&minimal_file()).unwrap();
        assert_eq!(file.name, "toy");
        assert!(file.force.is_none() && file.perturbation.is_none());
        let opts = file.trace_opts();
        let defaults = TraceOpts::default();
        assert_eq!(opts.max_points, defaults.max_points);
        assert_eq!(opts.ds0, defaults.ds0);
        assert!(file.trace_origin().is_none());
        assert!(file.integrate_settings().is_err());
    }

    #[test]
    fn field_kind_defaults_to_projected() {
        let text = minimal_file() + "\n[force]\nf = [\"0\", \"-1\"]\n";
        let file = ProblemFile::parse(&text).unwrap();
        assert_eq!(file.force.as_ref().unwrap().kind, FieldKind::Projected);
        let field = file.build_force().unwrap().unwrap();
        assert!(field.is_projected());
    }

    #[test]
    fn integrate_defaults_pull_the_chart_seed() {
        let text = minimal_file() + "\n[integrate]\nt1 = 2.0\n";
        let file = ProblemFile::parse(&text).unwrap();
        let sim = file.integrate_settings().unwrap();
        assert_eq!(sim.t0, 0.0);
        assert_eq!(sim.x0.as_slice(), &[0.0]);
        assert_eq!(sim.u0.as_slice(), &[0.0]);
        assert_eq!(sim.opts.h, 1e-3);
        assert_eq!(sim.opts.method, Method::Rk4Proj);
    }

    #[test]
    fn mismatched_sections_are_rejected_with_messages() {
        let cases: Vec<(String, &str)> = vec![
            (
                minimal_file().replace("s = 1", "s = 2"),
                "lists 1 component",
            ),
            (
                minimal_file().replace("box = [[-3.0, 3.0], [-3.0, 3.0]]", "box = [[-3.0, 3.0]]"),
                "coordinate ranges",
            ),
            (
                minimal_file().replace("chart_seed = [0.0, -2.0]", "chart_seed = [0.0]"),
                "chart seed needs 2 entries",
            ),
            (
                minimal_file() + "\n[force]\nf = [\"0\"]\n",
                "expected 2",
            ),
            (
                minimal_file() + "\n[perturbation]\nh = [\"cos(t)\"]\nkind = \"x_only\"\nperiod = 1.0\nextra = 1\n",
                "unknown field",
            ),
            (
                minimal_file() + "\n[degree]\nmap = \"G\"\n",
                "map must be F or Phi",
            ),
            (
                minimal_file() + "\n[continuation]\norigin = [0.0, 1.0]\n",
                "origin needs 1",
            ),
            (
                minimal_file() + "\n[integrate]\nt1 = 2.0\nx0 = [0.1, 0.2]\n",
                "x0 needs 1",
            ),
            (
                minimal_file() + "\n[integrate]\nt1 = 2.0\nmethod = \"euler\"\n",
                "unknown integration method",
            ),
            (
                minimal_file() + "\n[integrate]\nt1 = -1.0\n",
                "span",
            ),
            (
                minimal_file() + "\n[expect]\nzeros = [[0.0]]\n",
                "zeros need 2 coordinates",
            ),
            (
                minimal_file() + "\n[expect]\nzeros = [[0.0, -2.0]]\nindices = [1, -1]\n",
                "1 zero(s) but 2 index(es)",
            ),
            (
                minimal_file() + "\n[expect]\nreactive_r = [0.0]\n",
                "reactive_r needs 2",
            ),
        ];
        for (text, needle) in cases {
            let err = ProblemFile::parse(&text)
                .err()
                .or_else(|| ProblemFile::parse(&text).unwrap().integrate_settings().err())
                .unwrap_or_else(|| panic!("accepted:\n{text}"));
            assert!(
                err.to_string().contains(needle),
                "wanted `{needle}` in `{err}`"
            );
        }
    }

    #[test]
    fn zero_dimensions_are_rejected() {
        let text = minimal_file().replace("m = 1", "m = 0");
        assert!(ProblemFile::parse(&text).is_err());
    }

    #[test]
    fn expect_section_defaults_are_pinned() {
        let text = minimal_file() + "\n[expect]\ndegree = 1\n";
        let file = ProblemFile::parse(&text).unwrap();
        let expect = file.expect.unwrap();
        assert_eq!(expect.zero_tol, 1e-8);
        assert_eq!(expect.reactive_tol, 1e-9);
        assert_eq!(expect.degree, Some(1));
        assert!(expect.note.is_none());
    }

    #[test]
    fn continuation_overrides_reach_the_trace_options() {
        let text = minimal_file()
            + "\n[continuation]\nsteps = 17\nds0 = 1e-4\nds_max = 0.25\nfold_limit = 3\norigin = [1.0]\n";
        let file = ProblemFile::parse(&text).unwrap();
        let opts = file.trace_opts();
        assert_eq!(opts.max_points, 17);
        assert_eq!(opts.ds0, 1e-4);
        assert_eq!(opts.ds_max, 0.25);
        assert_eq!(opts.fold_limit, 3);
        assert_eq!(file.trace_origin().unwrap().as_slice(), &[1.0]);
    }
}
