//! Python bindings: a `Problem` class over the problem-file format plus
//! a direct expression evaluator. Reports come back as plain dicts and
//! lists, mirroring the CLI's `--json` output.

use nalgebra::DVector;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use pyo3::IntoPyObjectExt;
use serde_json::Value;

use implicit_motion::cli::{
    cmd_check, cmd_degree, cmd_reactive, cmd_simulate, cmd_trace, DegreeFlags, SimulateFlags,
    TraceFlags,
};
use implicit_motion::expr::VectorExpr;
use implicit_motion::manifold::ImplicitManifold;
use implicit_motion::problem::{load_example, ProblemFile, EXAMPLE_NAMES};
use implicit_motion::Error;

fn to_py_err(e: Error) -> PyErr {
    if e.exit_class() == 2 {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn json_to_py(py: Python<'_>, value: &Value) -> PyResult<Py<PyAny>> {
    match value {
        Value::Null => Ok(py.None()),
        Value::Bool(b) => b.into_py_any(py),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_py_any(py),
            None => n.as_f64().unwrap_or(f64::NAN).into_py_any(py),
        },
        Value::String(s) => s.into_py_any(py),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_py_any(py)
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (key, item) in map {
                dict.set_item(key, json_to_py(py, item)?)?;
            }
            dict.into_py_any(py)
        }
    }
}

/// A constrained-motion problem: the manifold, the optional force and
/// perturbation, and the solver settings of one problem file.
#[pyclass(frozen)]
struct Problem {
    file: ProblemFile,
    man: ImplicitManifold,
}

impl Problem {
    fn build(file: ProblemFile) -> PyResult<Self> {
        let man = file.build_manifold().map_err(to_py_err)?;
        Ok(Problem { file, man })
    }

    fn lift_state(
        &self,
        x: &[f64],
        u: &[f64],
    ) -> PyResult<(DVector<f64>, DVector<f64>)> {
        let (m, s) = (self.man.m(), self.man.s());
        if x.len() != m || u.len() != m {
            return Err(PyValueError::new_err(format!(
                "chart point and velocity need {m} entries each, got {} and {}",
                x.len(),
                u.len()
            )));
        }
        let x = DVector::from_column_slice(x);
        let u = DVector::from_column_slice(u);
        let y = self
            .man
            .chart_solve_y(&x, self.man.chart_seed())
            .map_err(to_py_err)?;
        let mut xi = DVector::zeros(m + s);
        xi.rows_mut(0, m).copy_from(&x);
        xi.rows_mut(m, s).copy_from(&y);
        let v = self.man.complete_velocity(&xi, &u).map_err(to_py_err)?;
        let mut eta = DVector::zeros(m + s);
        eta.rows_mut(0, m).copy_from(&u);
        eta.rows_mut(m, s).copy_from(&v);
        Ok((xi, eta))
    }
}

#[pymethods]
impl Problem {
    /// Load one of the bundled examples by name.
    #[staticmethod]
    fn example(name: &str) -> PyResult<Self> {
        Self::build(load_example(name).map_err(to_py_err)?)
    }

    /// Parse a problem file from disk.
    #[staticmethod]
    fn from_path(path: &str) -> PyResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PyValueError::new_err(format!("{path}: {e}")))?;
        Self::build(ProblemFile::parse(&text).map_err(to_py_err)?)
    }

    /// Parse a problem file from TOML text.
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Self::build(ProblemFile::parse(text).map_err(to_py_err)?)
    }

    #[getter]
    fn name(&self) -> &str {
        &self.file.name
    }

    #[getter]
    fn title(&self) -> Option<&str> {
        self.file.title.as_deref()
    }

    /// Independent and dependent coordinate counts `(m, s)`.
    fn dims(&self) -> (usize, usize) {
        (self.man.m(), self.man.s())
    }

    fn domain(&self) -> Vec<(f64, f64)> {
        self.man.domain().to_vec()
    }

    /// Constraint residual `g(xi)` at an ambient point.
    fn residual(&self, xi: Vec<f64>) -> PyResult<Vec<f64>> {
        let xi = DVector::from_vec(xi);
        let g = self.man.residual(&xi).map_err(to_py_err)?;
        Ok(g.iter().copied().collect())
    }

    /// Complete chart position `x` and chart velocity `u` to the full
    /// on-manifold state `(xi, eta)`.
    fn lift(&self, x: Vec<f64>, u: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let (xi, eta) = self.lift_state(&x, &u)?;
        Ok((xi.iter().copied().collect(), eta.iter().copied().collect()))
    }

    /// Orthogonal projection of an ambient vector onto the tangent
    /// space at `xi`.
    fn tangent_project(&self, xi: Vec<f64>, w: Vec<f64>) -> PyResult<Vec<f64>> {
        let xi = DVector::from_vec(xi);
        let w = DVector::from_vec(w);
        let t = self.man.tangent_project(&xi, &w).map_err(to_py_err)?;
        Ok(t.iter().copied().collect())
    }

    /// Reactive force at the state lifted from chart data, as a dict
    /// with the full state, the force, and the oracle route gap.
    fn reactive(&self, py: Python<'_>, x: Vec<f64>, u: Vec<f64>) -> PyResult<Py<PyAny>> {
        let out = cmd_reactive(&self.file, &x, &u).map_err(to_py_err)?;
        json_to_py(py, &out.json)
    }

    /// Validation report: anchor residual, constraint sign, spot checks.
    fn check(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let out = cmd_check(&self.file).map_err(to_py_err)?;
        json_to_py(py, &out.json)
    }

    /// Degree report of the position field over the file's box.
    #[pyo3(signature = (map=None, grid=None, verify=false))]
    fn degree(
        &self,
        py: Python<'_>,
        map: Option<&str>,
        grid: Option<usize>,
        verify: bool,
    ) -> PyResult<Py<PyAny>> {
        let flags = DegreeFlags {
            map,
            grid,
            verify,
            out: None,
        };
        let out = cmd_degree(&self.file, &flags).map_err(to_py_err)?;
        json_to_py(py, &out.json)
    }

    /// Integrate the file's `[integrate]` setup, with optional overrides.
    #[pyo3(signature = (t1=None, h=None, method=None, twin=false))]
    fn simulate(
        &self,
        py: Python<'_>,
        t1: Option<f64>,
        h: Option<f64>,
        method: Option<&str>,
        twin: bool,
    ) -> PyResult<Py<PyAny>> {
        let flags = SimulateFlags {
            twin,
            t1,
            h,
            method,
            out: None,
        };
        let out = cmd_simulate(&self.file, &flags).map_err(to_py_err)?;
        json_to_py(py, &out.json)
    }

    /// Continue the branch of periodic orbits from an equilibrium.
    /// `origin` is a comma-separated chart point or `"auto"`.
    #[pyo3(signature = (origin=None, steps=None, ds0=None))]
    fn trace(
        &self,
        py: Python<'_>,
        origin: Option<&str>,
        steps: Option<usize>,
        ds0: Option<f64>,
    ) -> PyResult<Py<PyAny>> {
        let flags = TraceFlags {
            origin,
            steps,
            ds0,
            out: None,
        };
        let out = cmd_trace(&self.file, &flags).map_err(to_py_err)?;
        json_to_py(py, &out.json)
    }

    fn __repr__(&self) -> String {
        format!(
            "Problem(name={:?}, m={}, s={})",
            self.file.name,
            self.man.m(),
            self.man.s()
        )
    }
}

/// Names of the bundled example problems.
#[pyfunction]
fn examples() -> Vec<&'static str> {
    EXAMPLE_NAMES.to_vec()
}

/// Evaluate a vector expression and its Jacobian at a point.
#[pyfunction]
fn eval_expr(
    sources: Vec<String>,
    vars: Vec<String>,
    at: Vec<f64>,
) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
    let expr = VectorExpr::parse_components(&sources, &vars).map_err(to_py_err)?;
    let (value, jac) = expr.eval_jacobian(&at).map_err(to_py_err)?;
    let rows = jac
        .row_iter()
        .map(|row| row.iter().copied().collect())
        .collect();
    Ok((value.iter().copied().collect(), rows))
}

#[pymodule]
fn implicit_motion_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Problem>()?;
    m.add_function(wrap_pyfunction!(examples, m)?)?;
    m.add_function(wrap_pyfunction!(eval_expr, m)?)?;
    Ok(())
}
