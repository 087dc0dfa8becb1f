//! Brouwer degree of square maps on boxes, and the degree of tangent vector
//! fields on `M = g^{-1}(0)` through augmented maps.
//!
//! The degree of a map `F: R^k -> R^k` over a box with `F != 0` on the
//! boundary is the sum of `sign det DF` over the zeros of `F` inside, when
//! those are nondegenerate. For a tangent field on `M` whose first block
//! extends to `f1` off the manifold, the augmented map `F = (f1, g)` turns
//! the manifold degree into a flat one: `deg(f|M, M) = s deg(F, U)` with
//! `s = sign det B` the constant sign of the constraint's second Jacobian
//! block. Periodic perturbations enter through the mean-value field, whose
//! time average at zero velocity replaces the first block.
//!
//! Zeros are enumerated by multistart Newton, which is heuristic: every
//! report carries boundary evidence and a missed-zero caveat instead of a
//! completeness claim. In the plane an independent route, the boundary
//! winding number, cross-checks the sign sum and takes over entirely when a
//! zero is degenerate.

mod mean;
mod winding;
mod zeros;

pub use mean::MeanField;
pub use winding::degree_winding2d;
pub use zeros::{find_zeros, ZeroSearch, ZeroSearchOpts};

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::dynamics::ForceField;
use crate::error::{Error, Result};
use crate::expr::VectorExpr;
use crate::manifold::{position_vars, ImplicitManifold};

/// `|det DF| <= factor * scale^k` marks a zero as degenerate, where `scale`
/// is the larger of the local Jacobian norm and the box-wide probe.
const DEGENERATE_DET_FACTOR: f64 = 1e-8;
/// Boundary admissibility: the sampled `|F|` minimum must exceed this.
const ADMISSIBLE_MIN_NORM: f64 = 1e-8;
/// Initial boundary sampling density per axis.
const BOUNDARY_SCAN_START: usize = 8;
/// Boundary sampling budget per axis.
const BOUNDARY_SCAN_MAX: usize = 128;
/// Two consecutive boundary minima within this relative gap count as stable.
const BOUNDARY_SCAN_STABLE: f64 = 0.25;

/// A square map with an automatic-differentiation Jacobian, the object the
/// zero search and degree computations run on.
pub trait SquareMap: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>>;
    fn jacobian(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)>;
}

/// A square map given directly by expressions.
pub struct ExprMap {
    expr: VectorExpr,
}

impl ExprMap {
    pub fn new(expr: VectorExpr) -> Result<Self> {
        if expr.n_in() != expr.n_out() {
            return Err(Error::invalid(format!(
                "map has {} inputs but {} components; degree needs a square map",
                expr.n_in(),
                expr.n_out()
            )));
        }
        Ok(Self { expr })
    }

    pub fn parse(sources: &[String], vars: &[String]) -> Result<Self> {
        Self::new(VectorExpr::parse_components(sources, vars)?)
    }
}

impl SquareMap for ExprMap {
    fn dim(&self) -> usize {
        self.expr.n_in()
    }

    fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.expr.eval_value(x.as_slice())
    }

    fn jacobian(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        self.expr.eval_jacobian(x.as_slice())
    }
}

/// Which augmentation a map encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentedKind {
    /// `F = (f1, g)` for an applied force's extension at zero velocity.
    FOfField,
    /// `Phi = (Pr1 w_h, g)` for a periodic perturbation's mean-value field.
    PhiOfMean,
}

/// First block of an augmented map.
pub enum FirstBlock<'a> {
    /// The field's extension at zero velocity, frozen at `t = 0`; the field
    /// must be autonomous.
    Frozen(&'a ForceField),
    /// Time average of a periodic field at zero velocity.
    Mean(&'a MeanField<'a>),
}

/// The square map `x -> (first m components of the field, g(x))` whose
/// zeros are the constrained equilibria and whose degree controls the
/// existence of forced oscillation branches.
pub struct AugmentedMap<'a> {
    man: &'a ImplicitManifold,
    first: FirstBlock<'a>,
}

impl<'a> AugmentedMap<'a> {
    pub fn new(man: &'a ImplicitManifold, first: FirstBlock<'a>) -> Result<Self> {
        let first = match first {
            FirstBlock::Frozen(field) => {
                let field = field.underlying();
                if field.m() != man.m() || field.s() != man.s() {
                    return Err(Error::invalid(
                        "field dimensions do not match the manifold",
                    ));
                }
                if !field.is_autonomous() {
                    return Err(Error::invalid(
                        "field depends on time; average it over a period to build \
                         the mean-value first block instead",
                    ));
                }
                FirstBlock::Frozen(field)
            }
            FirstBlock::Mean(mf) => {
                if !std::ptr::eq(mf.manifold(), man) {
                    return Err(Error::invalid(
                        "mean-value field was built over a different manifold",
                    ));
                }
                FirstBlock::Mean(mf)
            }
        };
        Ok(Self { man, first })
    }

    pub fn kind(&self) -> AugmentedKind {
        match self.first {
            FirstBlock::Frozen(_) => AugmentedKind::FOfField,
            FirstBlock::Mean(_) => AugmentedKind::PhiOfMean,
        }
    }

    fn first_value(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        match &self.first {
            FirstBlock::Frozen(field) => field.frozen_value(self.man, 0.0, x),
            FirstBlock::Mean(mf) => mf.eval(x),
        }
    }

    fn first_jacobian(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        match &self.first {
            FirstBlock::Frozen(field) => field.frozen_jacobian(self.man, 0.0, x),
            FirstBlock::Mean(mf) => mf.jacobian(x),
        }
    }
}

impl SquareMap for AugmentedMap<'_> {
    fn dim(&self) -> usize {
        self.man.dim()
    }

    fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let m = self.man.m();
        let first = self.first_value(x)?;
        let g = self.man.residual(x)?;
        let mut out = DVector::zeros(self.man.dim());
        out.rows_mut(0, m).copy_from(&first.rows(0, m));
        out.rows_mut(m, g.len()).copy_from(&g);
        Ok(out)
    }

    fn jacobian(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (m, k) = (self.man.m(), self.man.dim());
        let (first, first_jac) = self.first_jacobian(x)?;
        let (g, g_jac) = self.man.constraint().eval_jacobian(x.as_slice())?;
        let mut val = DVector::zeros(k);
        val.rows_mut(0, m).copy_from(&first.rows(0, m));
        val.rows_mut(m, g.len()).copy_from(&g);
        let mut jac = DMatrix::zeros(k, k);
        jac.rows_mut(0, m).copy_from(&first_jac.rows(0, m));
        jac.rows_mut(m, g.len()).copy_from(&g_jac);
        Ok((val, jac))
    }
}

/// Index of a nondegenerate zero with the evidence behind it.
#[derive(Debug, Clone, Copy)]
pub struct ZeroIndex {
    /// `sign det DF`, `+1` or `-1`.
    pub sign: i8,
    pub abs_det: f64,
    pub cond: f64,
}

/// One enumerated zero in a degree report; `index` is absent when the
/// Jacobian is degenerate there.
#[derive(Debug, Clone, Serialize)]
pub struct ZeroRecord {
    pub point: Vec<f64>,
    pub index: Option<i8>,
    pub abs_det: f64,
    pub cond: f64,
}

/// How the degree in a report was computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DegreeMethod {
    SignSum,
    Winding2d,
    Both,
}

impl DegreeMethod {
    fn name(self) -> &'static str {
        match self {
            DegreeMethod::SignSum => "sign_sum",
            DegreeMethod::Winding2d => "winding2d",
            DegreeMethod::Both => "both",
        }
    }
}

/// Degree of a map over a box, with the zero evidence that produced it.
#[derive(Debug, Clone, Serialize)]
pub struct DegreeReport {
    pub dim: usize,
    #[serde(rename = "box")]
    pub bounds: Vec<(f64, f64)>,
    pub method: DegreeMethod,
    pub degree: i64,
    /// Pinned `sign det B` of the manifold, present for augmented maps.
    pub s_sign: Option<i8>,
    /// `s_sign * degree`: the degree of the tangent field on `M` itself.
    pub manifold_degree: Option<i64>,
    pub zeros: Vec<ZeroRecord>,
    pub boundary_zeros: Vec<Vec<f64>>,
    pub boundary_min_norm: f64,
    pub admissible: bool,
    pub warnings: Vec<String>,
}

impl DegreeReport {
    /// Structured text form, one `key: value` line per fact.
    pub fn write_text(&self, out: &mut impl std::io::Write) -> Result<()> {
        let io_err = |e: std::io::Error| Error::Io {
            path: "<degree report>".into(),
            msg: e.to_string(),
        };
        writeln!(out, "dimension: {}", self.dim).map_err(io_err)?;
        let box_str = self
            .bounds
            .iter()
            .map(|(lo, hi)| format!("[{lo}, {hi}]"))
            .collect::<Vec<_>>()
            .join(" x ");
        writeln!(out, "box: {box_str}").map_err(io_err)?;
        writeln!(out, "method: {}", self.method.name()).map_err(io_err)?;
        writeln!(out, "admissible: {}", self.admissible).map_err(io_err)?;
        writeln!(out, "boundary_min_norm: {:.6e}", self.boundary_min_norm).map_err(io_err)?;
        writeln!(out, "degree: {}", self.degree).map_err(io_err)?;
        if let Some(s) = self.s_sign {
            writeln!(out, "s_sign: {s:+}").map_err(io_err)?;
        }
        if let Some(d) = self.manifold_degree {
            writeln!(out, "manifold_degree: {d}").map_err(io_err)?;
        }
        writeln!(out, "zeros: {}", self.zeros.len()).map_err(io_err)?;
        for z in &self.zeros {
            let point = z
                .point
                .iter()
                .map(|v| format!("{v:.17e}"))
                .collect::<Vec<_>>()
                .join(", ");
            let index = match z.index {
                Some(i) => format!("{i:+}"),
                None => "degenerate".into(),
            };
            writeln!(
                out,
                "zero: ({point}) index: {index} abs_det: {:.6e} cond: {:.6e}",
                z.abs_det, z.cond
            )
            .map_err(io_err)?;
        }
        writeln!(out, "boundary_zeros: {}", self.boundary_zeros.len()).map_err(io_err)?;
        for z in &self.boundary_zeros {
            let point = z
                .iter()
                .map(|v| format!("{v:.17e}"))
                .collect::<Vec<_>>()
                .join(", ");
            writeln!(out, "boundary_zero: ({point})").map_err(io_err)?;
        }
        for w in &self.warnings {
            writeln!(out, "warning: {w}").map_err(io_err)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_text(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("report text is ASCII")
    }

    /// CSV zero table: `x1..,y1..,index,detDF,cond`, one row per zero.
    pub fn write_zeros_csv(&self, m: usize, s: usize, out: &mut impl std::io::Write) -> Result<()> {
        let io_err = |e: std::io::Error| Error::Io {
            path: "<degree zeros csv>".into(),
            msg: e.to_string(),
        };
        let mut header = position_vars(m, s);
        header.extend(["index".into(), "detDF".into(), "cond".into()]);
        writeln!(out, "{}", header.join(",")).map_err(io_err)?;
        for z in &self.zeros {
            let mut row: Vec<String> = z.point.iter().map(|v| format!("{v:.17e}")).collect();
            row.push(z.index.map(|i| i.to_string()).unwrap_or_default());
            row.push(format!("{:.17e}", z.abs_det));
            row.push(format!("{:.17e}", z.cond));
            writeln!(out, "{}", row.join(",")).map_err(io_err)?;
        }
        Ok(())
    }
}

/// `sign det DF` at an isolated zero, with `|det|` and the condition number
/// as evidence. Degeneracy here is judged against the local Jacobian scale
/// only; the degree computations also compare against a box-wide probe.
pub fn index_at(map: &dyn SquareMap, zero: &DVector<f64>) -> Result<ZeroIndex> {
    let (det, fro, cond) = jacobian_stats(map, zero)?;
    if is_degenerate(det, fro, map.dim()) {
        return Err(degenerate_error(zero, det));
    }
    Ok(ZeroIndex {
        sign: if det > 0.0 { 1 } else { -1 },
        abs_det: det.abs(),
        cond,
    })
}

fn jacobian_stats(map: &dyn SquareMap, x: &DVector<f64>) -> Result<(f64, f64, f64)> {
    let (_, jac) = map.jacobian(x)?;
    let det = jac.determinant();
    let fro = jac.norm();
    let sv = jac.singular_values();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0_f64);
    for &s in sv.iter() {
        lo = lo.min(s);
        hi = hi.max(s);
    }
    let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    Ok((det, fro, cond))
}

fn is_degenerate(det: f64, scale: f64, k: usize) -> bool {
    det.abs() <= DEGENERATE_DET_FACTOR * scale.powi(k as i32)
}

fn degenerate_error(zero: &DVector<f64>, det: f64) -> Error {
    let point = zero
        .iter()
        .map(|v| format!("{v:.6e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Error::DegenerateZero {
        location: format!("({point})"),
        det,
    }
}

/// Largest Jacobian norm over a fixed probe set (box centre plus corners,
/// or face centres in high dimension), the reference scale that keeps the
/// degeneracy test meaningful at zeros where the Jacobian itself vanishes.
fn jacobian_probe_scale(map: &dyn SquareMap, bounds: &[(f64, f64)]) -> f64 {
    let k = bounds.len();
    let mut probes: Vec<DVector<f64>> = Vec::new();
    let centre = DVector::from_iterator(k, bounds.iter().map(|&(lo, hi)| 0.5 * (lo + hi)));
    probes.push(centre.clone());
    if k <= 6 {
        for mask in 0..(1usize << k) {
            probes.push(DVector::from_iterator(
                k,
                bounds
                    .iter()
                    .enumerate()
                    .map(|(i, &(lo, hi))| if mask >> i & 1 == 1 { hi } else { lo }),
            ));
        }
    } else {
        for i in 0..k {
            for v in [bounds[i].0, bounds[i].1] {
                let mut p = centre.clone();
                p[i] = v;
                probes.push(p);
            }
        }
    }
    probes
        .iter()
        .filter_map(|p| map.jacobian(p).ok().map(|(_, j)| j.norm()))
        .fold(0.0, f64::max)
}

/// Degeneracy test used inside the degree pipeline, comparing `det` against
/// both the local Jacobian norm and the box-wide probe scale.
fn degenerate_at(map: &dyn SquareMap, x: &DVector<f64>, probe_scale: f64) -> bool {
    match map.jacobian(x) {
        Ok((_, jac)) => {
            let det = jac.determinant();
            is_degenerate(det, jac.norm().max(probe_scale), map.dim())
        }
        Err(_) => true,
    }
}

const MISSED_ZERO_WARNING: &str = "zero enumeration is heuristic: a zero attracting \
     none of the multistart grid points would be missed and change the degree; boundary \
     evidence bounds zeros away from the boundary at sampled points only";

/// Degree by summing `sign det DF` over the enumerated interior zeros.
///
/// The boundary is scanned first and the whole computation refuses to
/// proceed when the map comes within `1e-8` of zero there, or when the zero
/// search finds a zero inside the boundary band. A degenerate zero has no
/// index; in the plane the degree then falls back to the boundary winding
/// number, otherwise it is an error.
pub fn degree_sign_sum(
    map: &dyn SquareMap,
    bounds: &[(f64, f64)],
    opts: &ZeroSearchOpts,
) -> Result<DegreeReport> {
    zeros::validate_bounds(map.dim(), bounds)?;
    let boundary_min_norm = boundary_min_scan(map, bounds)?;
    if boundary_min_norm <= ADMISSIBLE_MIN_NORM {
        return Err(Error::NotAdmissible {
            min_norm: boundary_min_norm,
        });
    }
    let search = find_zeros(map, bounds, opts)?;
    if !search.boundary.is_empty() {
        let min_norm = search
            .boundary
            .iter()
            .filter_map(|z| map.eval(z).ok().map(|f| f.norm()))
            .fold(f64::INFINITY, f64::min);
        return Err(Error::NotAdmissible { min_norm });
    }

    let probe = jacobian_probe_scale(map, bounds);
    let mut zeros_out = Vec::with_capacity(search.interior.len());
    let mut first_degenerate: Option<Error> = None;
    for z in &search.interior {
        let (det, fro, cond) = jacobian_stats(map, z)?;
        if is_degenerate(det, fro.max(probe), map.dim()) {
            first_degenerate.get_or_insert_with(|| degenerate_error(z, det));
            zeros_out.push(ZeroRecord {
                point: z.as_slice().to_vec(),
                index: None,
                abs_det: det.abs(),
                cond,
            });
        } else {
            zeros_out.push(ZeroRecord {
                point: z.as_slice().to_vec(),
                index: Some(if det > 0.0 { 1 } else { -1 }),
                abs_det: det.abs(),
                cond,
            });
        }
    }

    let mut warnings = vec![MISSED_ZERO_WARNING.to_string()];
    let (method, degree) = if let Some(err) = first_degenerate {
        if map.dim() != 2 {
            return Err(err);
        }
        warnings.push(
            "a degenerate zero carries no index; the degree was computed by boundary \
             winding instead of the sign sum"
                .to_string(),
        );
        (DegreeMethod::Winding2d, degree_winding2d(map, bounds)?)
    } else {
        (
            DegreeMethod::SignSum,
            zeros_out
                .iter()
                .map(|z| i64::from(z.index.expect("nondegenerate zeros all carry an index")))
                .sum(),
        )
    };

    Ok(DegreeReport {
        dim: map.dim(),
        bounds: bounds.to_vec(),
        method,
        degree,
        s_sign: None,
        manifold_degree: None,
        zeros: zeros_out,
        boundary_zeros: search.boundary.iter().map(|z| z.as_slice().to_vec()).collect(),
        boundary_min_norm,
        admissible: true,
        warnings,
    })
}

/// Degree with an independent completeness cross-check: the boundary
/// winding in the plane, a refined start grid otherwise. Disagreement is an
/// error, never averaged away.
pub fn degree_verified(
    map: &dyn SquareMap,
    bounds: &[(f64, f64)],
    opts: &ZeroSearchOpts,
) -> Result<DegreeReport> {
    let mut report = degree_sign_sum(map, bounds, opts)?;
    if map.dim() == 2 {
        let winding = degree_winding2d(map, bounds)?;
        if winding != report.degree {
            return Err(Error::NoConvergence {
                what: format!(
                    "sign-sum degree {} disagrees with boundary winding {winding}; \
                     the multistart grid likely missed a zero",
                    report.degree
                ),
                iters: opts.grid_per_axis,
            });
        }
        report.method = DegreeMethod::Both;
    } else {
        let mut denser = opts.clone();
        denser.grid_per_axis *= 2;
        let again = find_zeros(map, bounds, &denser)?;
        if !zero_sets_match(&report, &again, opts.cluster_radius) {
            return Err(Error::NoConvergence {
                what: format!(
                    "zero set changed when the start grid was refined from {} to {} \
                     points per axis",
                    opts.grid_per_axis, denser.grid_per_axis
                ),
                iters: denser.grid_per_axis,
            });
        }
        report.warnings.push(format!(
            "zero set unchanged under start-grid refinement from {} to {} points per axis",
            opts.grid_per_axis, denser.grid_per_axis
        ));
    }
    Ok(report)
}

fn zero_sets_match(report: &DegreeReport, again: &ZeroSearch, radius: f64) -> bool {
    if report.zeros.len() != again.interior.len() || !again.boundary.is_empty() {
        return false;
    }
    report.zeros.iter().zip(&again.interior).all(|(a, b)| {
        a.point
            .iter()
            .zip(b.iter())
            .all(|(x, y)| (x - y).abs() <= 10.0 * radius)
    })
}

/// Degree of a tangent field on `M` over a box, through the augmented map.
///
/// Computes `deg(F, box)` by sign sum, then pins the constraint sign `s` at
/// the enumerated zeros (or at the box centre when there are none) and
/// attaches `s` and the manifold degree `s * deg(F, box)` to the report.
pub fn tangent_field_degree(
    man: &ImplicitManifold,
    first: FirstBlock<'_>,
    bounds: &[(f64, f64)],
    opts: &ZeroSearchOpts,
) -> Result<DegreeReport> {
    let map = AugmentedMap::new(man, first)?;
    let mut report = degree_sign_sum(&map, bounds, opts)?;
    if report.zeros.is_empty() {
        let centre =
            DVector::from_iterator(bounds.len(), bounds.iter().map(|&(lo, hi)| 0.5 * (lo + hi)));
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
    Ok(report)
}

/// Minimum `|F|` over sampled boundary points, doubling the per-axis
/// density until the minimum stabilizes or the budget is reached.
fn boundary_min_scan(map: &dyn SquareMap, bounds: &[(f64, f64)]) -> Result<f64> {
    use rayon::prelude::*;

    let k = map.dim();
    let mut density = BOUNDARY_SCAN_START;
    let mut prev: Option<f64> = None;
    loop {
        let mut points: Vec<DVector<f64>> = Vec::new();
        for face_axis in 0..k {
            for &face_value in &[bounds[face_axis].0, bounds[face_axis].1] {
                let mut idx = vec![0usize; k];
                loop {
                    let p = DVector::from_iterator(
                        k,
                        (0..k).map(|a| {
                            if a == face_axis {
                                face_value
                            } else {
                                let (lo, hi) = bounds[a];
                                lo + idx[a] as f64 * (hi - lo) / density as f64
                            }
                        }),
                    );
                    points.push(p);
                    let mut carry = true;
                    for a in (0..k).filter(|&a| a != face_axis) {
                        if !carry {
                            break;
                        }
                        idx[a] += 1;
                        if idx[a] > density {
                            idx[a] = 0;
                        } else {
                            carry = false;
                        }
                    }
                    if carry {
                        break;
                    }
                }
            }
        }
        let min = points
            .par_iter()
            .map(|p| map.eval(p).map(|f| f.norm()))
            .try_reduce(|| f64::INFINITY, |a, b| Ok(a.min(b)))?;
        if let Some(p) = prev {
            if (p - min).abs() <= BOUNDARY_SCAN_STABLE * min.abs() {
                return Ok(min);
            }
        }
        if density >= BOUNDARY_SCAN_MAX {
            return Ok(min);
        }
        prev = Some(min);
        density *= 2;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::Tangency;
    use crate::manifold::phase_vars;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn expr_map(comps: &[&str], vars: &[String]) -> ExprMap {
        let comps: Vec<String> = comps.iter().map(|s| s.to_string()).collect();
        ExprMap::parse(&comps, vars).unwrap()
    }

    fn spring_map() -> ExprMap {
        expr_map(
            &["-(y1 + 1)*x1/(x1^2 + 1)", "x1^2/2 - y1 - 2"],
            &position_vars(1, 1),
        )
    }

    fn spring_manifold() -> ImplicitManifold {
        let g = VectorExpr::parse_components(&["x1^2/2 - y1 - 2".into()], &position_vars(1, 1))
            .unwrap();
        ImplicitManifold::new(g, 1, 1, vec![(-3.0, 3.0), (-3.0, 3.0)]).unwrap()
    }

    fn spring_field() -> ForceField {
        let expr = VectorExpr::parse_components(
            &[
                "-(y1 + 1)*x1/(x1^2 + 1)".into(),
                "-(y1 + 1)*x1^2/(x1^2 + 1)".into(),
            ],
            &phase_vars(1, 1, true),
        )
        .unwrap();
        ForceField::from_expr(expr, 1, 1, None, Tangency::DeclaredTangent, false).unwrap()
    }

    fn gravita_closed_form() -> ExprMap {
        expr_map(
            &[
                "3*(y1^2 + 3*x1^2 + 3)*(2*x1*y1 + 3) / ((6*x1*y1 + 9)^2 + (y1^2 + 3*x1^2 + 3)^2)",
                "(x1^2 + 1)*y1/3 + y1^3/27 + x1",
            ],
            &position_vars(1, 1),
        )
    }

    fn gravita_manifold() -> ImplicitManifold {
        let g = VectorExpr::parse_components(
            &["(x1^2 + 1)*y1/3 + y1^3/27 + x1".into()],
            &position_vars(1, 1),
        )
        .unwrap();
        ImplicitManifold::new(g, 1, 1, vec![(-3.0, -1e-3), (-4.0, 4.0)]).unwrap()
    }

    fn gravity_projected() -> ForceField {
        let expr =
            VectorExpr::parse_components(&["0".into(), "-1".into()], &phase_vars(1, 1, true))
                .unwrap();
        ForceField::from_expr(expr, 1, 1, None, Tangency::DeclaredTangent, true).unwrap()
    }

    fn cubic_manifold() -> ImplicitManifold {
        let g = VectorExpr::parse_components(
            &["x1^2/2 - y1^3 - y1".into()],
            &position_vars(1, 1),
        )
        .unwrap();
        ImplicitManifold::new(g, 1, 1, vec![(-2.0, 2.0), (-2.0, 2.0)]).unwrap()
    }

    fn dae3_map() -> ExprMap {
        expr_map(
            &["x1 - 2*y1", "y2^3 + y2 - x1", "y2 - y1 + x1^2"],
            &position_vars(1, 2),
        )
    }

    const GRAVITA_BOX: [(f64, f64); 2] = [(-3.0, -1e-3), (-4.0, 4.0)];
    const PLANE_BOX: [(f64, f64); 2] = [(-3.0, 3.0), (-3.0, 3.0)];

    fn bisect(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
        assert!(f(a) * f(b) < 0.0, "bracket does not straddle a root");
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if f(a) * f(m) <= 0.0 {
                b = m;
            } else {
                a = m;
            }
        }
        0.5 * (a + b)
    }

    #[test]
    fn identity_map_has_one_positive_zero() {
        let map = expr_map(&["x1", "x2"], &position_vars(2, 0));
        let found = find_zeros(&map, &[(-1.0, 1.0), (-1.0, 1.0)], &ZeroSearchOpts::default())
            .unwrap();
        assert_eq!(found.interior.len(), 1);
        assert!(found.boundary.is_empty());
        assert!(found.interior[0].amax() < 1e-12);
        let ix = index_at(&map, &found.interior[0]).unwrap();
        assert_eq!(ix.sign, 1);
        let report =
            degree_sign_sum(&map, &[(-1.0, 1.0), (-1.0, 1.0)], &ZeroSearchOpts::default())
                .unwrap();
        assert_eq!(report.degree, 1);
        assert_eq!(degree_winding2d(&map, &[(-1.0, 1.0), (-1.0, 1.0)]).unwrap(), 1);
    }

    #[test]
    fn spring_equilibria_are_enumerated_in_order() {
        let map = spring_map();
        let found = find_zeros(&map, &PLANE_BOX, &ZeroSearchOpts::default()).unwrap();
        assert_eq!(found.interior.len(), 3);
        assert!(found.boundary.is_empty());
        let root2 = 2.0_f64.sqrt();
        let expected = [(-root2, -1.0), (0.0, -2.0), (root2, -1.0)];
        for (z, (x, y)) in found.interior.iter().zip(expected) {
            assert!((z[0] - x).abs() < 1e-10, "x: {} vs {x}", z[0]);
            assert!((z[1] - y).abs() < 1e-10, "y: {} vs {y}", z[1]);
        }
    }

    #[test]
    fn spring_indices_sum_to_one() {
        let map = spring_map();
        let report = degree_sign_sum(&map, &PLANE_BOX, &ZeroSearchOpts::default()).unwrap();
        assert_eq!(report.method, DegreeMethod::SignSum);
        assert_eq!(report.degree, 1);
        assert!(report.admissible);
        assert!(report.boundary_min_norm > ADMISSIBLE_MIN_NORM);
        let indices: Vec<i8> = report.zeros.iter().map(|z| z.index.unwrap()).collect();
        assert_eq!(indices, vec![1, -1, 1]);
        assert!(report.zeros.iter().all(|z| z.abs_det > 0.1 && z.cond.is_finite()));
        assert!(!report.warnings.is_empty());
    }

    #[test]
    fn spring_degree_through_the_manifold_pipeline() {
        let man = spring_manifold();
        let field = spring_field();
        let report = tangent_field_degree(
            &man,
            FirstBlock::Frozen(&field),
            &PLANE_BOX,
            &ZeroSearchOpts::default(),
        )
        .unwrap();
        assert_eq!(report.degree, 1);
        assert_eq!(report.s_sign, Some(-1));
        assert_eq!(report.manifold_degree, Some(-1));
        let map = AugmentedMap::new(&man, FirstBlock::Frozen(&field)).unwrap();
        assert_eq!(map.kind(), AugmentedKind::FOfField);
    }

    #[test]
    fn hanging_point_matches_the_quartic_root() {
        let man = gravita_manifold();
        let field = gravity_projected();
        let report = tangent_field_degree(
            &man,
            FirstBlock::Frozen(&field),
            &GRAVITA_BOX,
            &ZeroSearchOpts::default(),
        )
        .unwrap();
        assert_eq!(report.degree, 1);
        assert_eq!(report.s_sign, Some(1));
        assert_eq!(report.manifold_degree, Some(1));
        assert_eq!(report.zeros.len(), 1);
        let x_star = bisect(|x| 4.0 * x.powi(4) - 4.0 * x * x - 1.0, -2.0, -1.0);
        let y_star = -3.0 / (2.0 * x_star);
        assert!((report.zeros[0].point[0] - x_star).abs() < 1e-8);
        assert!((report.zeros[0].point[1] - y_star).abs() < 1e-8);
        assert_eq!(report.zeros[0].index, Some(1));
    }

    #[test]
    fn projected_block_equals_closed_form_everywhere() {
        let man = gravita_manifold();
        let field = gravity_projected();
        let augmented = AugmentedMap::new(&man, FirstBlock::Frozen(&field)).unwrap();
        let closed = gravita_closed_form();
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0020);
        for _ in 0..200 {
            let p = DVector::from_vec(vec![
                rng.gen_range(-3.0..-1e-3),
                rng.gen_range(-4.0..4.0),
            ]);
            let a = augmented.eval(&p).unwrap();
            let b = closed.eval(&p).unwrap();
            assert!((&a - &b).amax() < 1e-12 * (1.0 + b.amax()));
            let (_, ja) = augmented.jacobian(&p).unwrap();
            let (_, jb) = closed.jacobian(&p).unwrap();
            assert!((&ja - &jb).amax() < 1e-9 * (1.0 + jb.amax()));
        }
    }

    fn periodic_field(man: &ImplicitManifold, comp: &str) -> ForceField {
        let expr = VectorExpr::parse_components(
            &[comp.to_string()],
            &phase_vars(man.m(), man.s(), true),
        )
        .unwrap();
        ForceField::from_expr(
            expr,
            man.m(),
            man.s(),
            Some(2.0 * std::f64::consts::PI),
            Tangency::XOnly,
            false,
        )
        .unwrap()
    }

    #[test]
    fn time_average_of_sin_coupling_is_the_identity_block() {
        let man = cubic_manifold();
        let h = periodic_field(&man, "x1 + sin(t)*y1");
        let mean = MeanField::new(&man, &h).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0021);
        for _ in 0..100 {
            let p = DVector::from_vec(vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]);
            let w = mean.eval(&p).unwrap();
            assert!((w[0] - p[0]).abs() <= 1e-12 * (1.0 + p[0].abs()));
        }
    }

    #[test]
    fn time_average_of_autonomous_field_is_itself() {
        let man = cubic_manifold();
        let h = periodic_field(&man, "x1*y1 - 2");
        let mean = MeanField::new(&man, &h).unwrap();
        let p = DVector::from_vec(vec![0.7, -0.3]);
        let w = mean.eval(&p).unwrap();
        let direct = h.frozen_value(&man, 0.0, &p).unwrap();
        assert!((w[0] - direct[0]).abs() < 1e-13);
    }

    #[test]
    fn time_average_of_zero_mean_field_vanishes() {
        let man = cubic_manifold();
        let h = periodic_field(&man, "cos(t)*(x1^2 + 1)");
        let mean = MeanField::new(&man, &h).unwrap();
        for x in [-1.5, 0.0, 0.9] {
            let p = DVector::from_vec(vec![x, 0.4]);
            assert!(mean.eval(&p).unwrap().amax() <= 1e-12);
        }
    }

    #[test]
    fn mean_field_degree_on_the_cubic_constraint() {
        let man = cubic_manifold();
        let h = periodic_field(&man, "x1 + sin(t)*y1");
        let mean = MeanField::new(&man, &h).unwrap();
        let map = AugmentedMap::new(&man, FirstBlock::Mean(&mean)).unwrap();
        assert_eq!(map.kind(), AugmentedKind::PhiOfMean);
        let report = tangent_field_degree(
            &man,
            FirstBlock::Mean(&mean),
            &[(-2.0, 2.0), (-2.0, 2.0)],
            &ZeroSearchOpts::default(),
        )
        .unwrap();
        assert_eq!(report.degree, -1);
        assert_eq!(report.zeros.len(), 1);
        assert!(report.zeros[0].point.iter().all(|v| v.abs() < 1e-9));
        assert_eq!(report.zeros[0].index, Some(-1));
        assert_eq!(report.s_sign, Some(-1));
        assert_eq!(report.manifold_degree, Some(1));
    }

    #[test]
    fn coupled_cubic_map_has_two_zeros_of_opposite_index() {
        let map = dae3_map();
        let bounds = [(-2.0, 2.0), (-2.0, 2.0), (-2.0, 2.0)];
        let report = degree_verified(&map, &bounds, &ZeroSearchOpts::default()).unwrap();
        assert_eq!(report.zeros.len(), 2);
        let x2 = bisect(
            |x| (x / 2.0 - x * x).powi(3) - x * x - x / 2.0,
            -1.0,
            -0.1,
        );
        let second = &report.zeros[0];
        assert!((second.point[0] - x2).abs() < 1e-8);
        assert!((second.point[1] - x2 / 2.0).abs() < 1e-8);
        assert!((second.point[2] - (x2 / 2.0 - x2 * x2)).abs() < 1e-8);
        assert_eq!(second.index, Some(1));
        let origin = &report.zeros[1];
        assert!(origin.point.iter().all(|v| v.abs() < 1e-10));
        assert_eq!(origin.index, Some(-1));
        assert_eq!(report.degree, 0);
        assert!(report
            .warnings
            .iter()
            .any(|w| w.contains("start-grid refinement")));
    }

    #[test]
    fn index_at_the_crossing_of_the_coupled_cubic() {
        let map = dae3_map();
        let origin = DVector::zeros(3);
        let ix = index_at(&map, &origin).unwrap();
        assert_eq!(ix.sign, -1);
        assert!((ix.abs_det - 1.0).abs() < 1e-12);
    }

    #[test]
    fn winding_cross_checks_the_sign_sum() {
        let spring = spring_map();
        let report = degree_verified(&spring, &PLANE_BOX, &ZeroSearchOpts::default()).unwrap();
        assert_eq!(report.method, DegreeMethod::Both);
        assert_eq!(report.degree, 1);
        let gravita = gravita_closed_form();
        let report =
            degree_verified(&gravita, &GRAVITA_BOX, &ZeroSearchOpts::default()).unwrap();
        assert_eq!(report.method, DegreeMethod::Both);
        assert_eq!(report.degree, 1);
    }

    #[test]
    fn winding_counts_the_complex_square_twice() {
        let map = expr_map(&["x1^2 - x2^2", "2*x1*x2"], &position_vars(2, 0));
        let unit = [(-1.0, 1.0), (-1.0, 1.0)];
        assert_eq!(degree_winding2d(&map, &unit).unwrap(), 2);
        let flip = expr_map(&["x1", "-x2"], &position_vars(2, 0));
        assert_eq!(degree_winding2d(&flip, &unit).unwrap(), -1);
    }

    #[test]
    fn degenerate_zero_falls_back_to_winding_in_the_plane() {
        let map = expr_map(&["x1^2 - x2^2", "2*x1*x2"], &position_vars(2, 0));
        let unit = [(-1.0, 1.0), (-1.0, 1.0)];
        let report = degree_sign_sum(&map, &unit, &ZeroSearchOpts::default()).unwrap();
        assert_eq!(report.method, DegreeMethod::Winding2d);
        assert_eq!(report.degree, 2);
        assert_eq!(report.zeros.len(), 1);
        assert_eq!(report.zeros[0].index, None);
        assert!(report.zeros[0].point.iter().all(|v| v.abs() < 1e-3));
        assert!(report.warnings.iter().any(|w| w.contains("winding")));
        let err = index_at(&map, &DVector::zeros(2)).unwrap_err();
        assert!(matches!(err, Error::DegenerateZero { .. }));
    }

    #[test]
    fn degenerate_zero_off_the_plane_is_an_error() {
        let map = expr_map(
            &["x1^2 - x2^2", "2*x1*x2", "x3"],
            &["x1".into(), "x2".into(), "x3".into()],
        );
        let bounds = [(-1.0, 1.0), (-1.0, 1.0), (-1.0, 1.0)];
        let err = degree_sign_sum(&map, &bounds, &ZeroSearchOpts::default()).unwrap_err();
        assert!(matches!(err, Error::DegenerateZero { .. }));
    }

    #[test]
    fn degree_adds_over_random_partitions() {
        let map = spring_map();
        let zero_x = [-(2.0_f64.sqrt()), 0.0, 2.0_f64.sqrt()];
        let zero_y = [-1.0, -2.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0022);
        let mut done = 0;
        while done < 20 {
            let vertical = rng.gen_bool(0.5);
            let c = rng.gen_range(-2.5..2.5);
            let clear = if vertical {
                zero_x.iter().all(|z| (z - c).abs() > 0.15)
            } else {
                zero_y.iter().all(|z| (z - c).abs() > 0.15)
            };
            if !clear {
                continue;
            }
            let (first, second) = if vertical {
                (
                    [(-3.0, c), (-3.0, 3.0)],
                    [(c, 3.0), (-3.0, 3.0)],
                )
            } else {
                (
                    [(-3.0, 3.0), (-3.0, c)],
                    [(-3.0, 3.0), (c, 3.0)],
                )
            };
            let a = degree_sign_sum(&map, &first, &ZeroSearchOpts::default()).unwrap();
            let b = degree_sign_sum(&map, &second, &ZeroSearchOpts::default()).unwrap();
            assert_eq!(a.degree + b.degree, 1, "split at {c}, vertical {vertical}");
            done += 1;
        }
    }

    #[test]
    fn positive_scaling_leaves_indices_and_degree_alone() {
        for scale in ["1e-3", "1e3"] {
            let map = expr_map(
                &[
                    &format!("{scale}*(-(y1 + 1)*x1/(x1^2 + 1))"),
                    "x1^2/2 - y1 - 2",
                ],
                &position_vars(1, 1),
            );
            let report = degree_sign_sum(&map, &PLANE_BOX, &ZeroSearchOpts::default()).unwrap();
            assert_eq!(report.degree, 1, "scale {scale}");
            let indices: Vec<i8> = report.zeros.iter().map(|z| z.index.unwrap()).collect();
            assert_eq!(indices, vec![1, -1, 1], "scale {scale}");
        }
    }

    #[test]
    fn zero_free_box_has_degree_zero() {
        let map = spring_map();
        let bounds = [(0.5, 1.0), (-3.0, -0.5)];
        let report = degree_sign_sum(&map, &bounds, &ZeroSearchOpts::default()).unwrap();
        assert_eq!(report.degree, 0);
        assert!(report.zeros.is_empty());
        assert!(report.admissible);

        let man = spring_manifold();
        let field = spring_field();
        let report = tangent_field_degree(
            &man,
            FirstBlock::Frozen(&field),
            &bounds,
            &ZeroSearchOpts::default(),
        )
        .unwrap();
        assert_eq!(report.manifold_degree, Some(0));
        assert_eq!(report.s_sign, Some(-1));
    }

    #[test]
    fn zero_on_the_boundary_is_not_admissible() {
        let map = spring_map();
        let err = degree_sign_sum(
            &map,
            &[(-3.0, 3.0), (-3.0, -2.0)],
            &ZeroSearchOpts::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NotAdmissible { .. }));
    }

    #[test]
    fn chart_reduction_agrees_in_absolute_value() {
        let chart = expr_map(&["-(x1^2/2 - 1)*x1/(x1^2 + 1)"], &["x1".into()]);
        let left = chart.eval(&DVector::from_vec(vec![-3.0])).unwrap()[0];
        let right = chart.eval(&DVector::from_vec(vec![3.0])).unwrap()[0];
        let chart_degree = ((right.signum() - left.signum()) / 2.0) as i64;
        let man = spring_manifold();
        let field = spring_field();
        let report = tangent_field_degree(
            &man,
            FirstBlock::Frozen(&field),
            &PLANE_BOX,
            &ZeroSearchOpts::default(),
        )
        .unwrap();
        assert_eq!(chart_degree.abs(), report.degree.abs());
        assert_eq!(chart_degree.abs(), report.manifold_degree.unwrap().abs());
    }

    #[test]
    fn report_serializes_to_text_csv_and_json() {
        let man = spring_manifold();
        let field = spring_field();
        let report = tangent_field_degree(
            &man,
            FirstBlock::Frozen(&field),
            &PLANE_BOX,
            &ZeroSearchOpts::default(),
        )
        .unwrap();
        let text = report.to_text();
        assert!(text.contains("degree: 1"));
        assert!(text.contains("s_sign: -1"));
        assert!(text.contains("manifold_degree: -1"));
        assert!(text.contains("method: sign_sum"));
        assert!(text.contains("warning:"));
        let mut csv = Vec::new();
        report.write_zeros_csv(1, 1, &mut csv).unwrap();
        let csv = String::from_utf8(csv).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("x1,y1,index,detDF,cond"));
        assert_eq!(lines.count(), 3);
        let json = serde_json::to_value(&report).unwrap();
        assert_eq!(json["degree"], 1);
        assert_eq!(json["method"], "sign_sum");
        assert_eq!(json["s_sign"], -1);
        assert!(json["box"].is_array());
    }

    #[test]
    fn oversized_start_grids_are_rejected() {
        let map = dae3_map();
        let opts = ZeroSearchOpts {
            grid_per_axis: 1000,
            ..ZeroSearchOpts::default()
        };
        let err = find_zeros(&map, &[(-1.0, 1.0), (-1.0, 1.0), (-1.0, 1.0)], &opts).unwrap_err();
        assert!(matches!(err, Error::BudgetExceeded { .. }));
    }

    #[test]
    fn augmented_map_rejects_bad_first_blocks() {
        let man = cubic_manifold();
        let expr = VectorExpr::parse_components(
            &["x1 + sin(t)*y1".into()],
            &phase_vars(1, 1, true),
        )
        .unwrap();
        let time_dependent = ForceField::from_expr(
            expr,
            1,
            1,
            Some(2.0 * std::f64::consts::PI),
            Tangency::XOnly,
            false,
        )
        .unwrap();
        assert!(AugmentedMap::new(&man, FirstBlock::Frozen(&time_dependent)).is_err());

        let other = spring_manifold();
        let h = periodic_field(&man, "x1 + sin(t)*y1");
        let mean = MeanField::new(&man, &h).unwrap();
        assert!(AugmentedMap::new(&other, FirstBlock::Mean(&mean)).is_err());

        let rect = VectorExpr::parse_components(&["x1 + y1".into()], &position_vars(1, 1)).unwrap();
        assert!(ExprMap::new(rect).is_err());
    }
}
