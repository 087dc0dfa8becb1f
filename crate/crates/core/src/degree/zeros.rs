//! Multistart damped Newton search for all zeros of a square map in a box.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{Error, Result};

use super::SquareMap;

/// Controls for the zero search and the degree computations built on it.
#[derive(Debug, Clone)]
pub struct ZeroSearchOpts {
    /// Start points per axis; starts form a uniform grid of cell centres.
    pub grid_per_axis: usize,
    /// Newton is converged when the step or the residual drops below this.
    pub newton_tol: f64,
    /// Converged points closer than this in the max norm are one zero.
    pub cluster_radius: f64,
    /// A candidate is only accepted when its residual is below this.
    pub residual_tol: f64,
    /// Newton iterations per start before the start is abandoned.
    pub max_newton_iter: usize,
    /// Hard cap on the total number of starts.
    pub max_starts: usize,
}

impl Default for ZeroSearchOpts {
    fn default() -> Self {
        Self {
            grid_per_axis: 16,
            newton_tol: 1e-12,
            cluster_radius: 1e-7,
            residual_tol: 1e-10,
            max_newton_iter: 60,
            max_starts: 200_000,
        }
    }
}

/// Zeros found in a box, split by distance to the boundary.
///
/// Points within `1e-6` of the box diameter from a face land in `boundary`;
/// degree computations treat those as inadmissible rather than counting or
/// discarding them silently.
#[derive(Debug, Clone)]
pub struct ZeroSearch {
    pub interior: Vec<DVector<f64>>,
    pub boundary: Vec<DVector<f64>>,
}

/// Relative width of the boundary band.
const BOUNDARY_BAND: f64 = 1e-6;
/// How far outside the box an iterate may wander before the start is
/// abandoned, as a fraction of each axis width.
const BOX_MARGIN: f64 = 0.5;
/// Backtracking halvings before a start is abandoned.
const MAX_BACKTRACK: usize = 30;
/// Post-convergence confirmation: fresh Newton iterates must stay within
/// this relative distance of the candidate.
const BASIN_RADIUS: f64 = 1e-4;
/// Degenerate candidates may cluster this far apart: a zero with singular
/// Jacobian is only located to roughly the square root of the residual
/// tolerance, so the tight radius would report one flat zero many times.
const DEGENERATE_CLUSTER_RADIUS: f64 = 1e-4;

pub(super) fn validate_bounds(dim: usize, bounds: &[(f64, f64)]) -> Result<()> {
    if bounds.len() != dim {
        return Err(Error::invalid(format!(
            "map of dimension {dim} searched over a box of dimension {}",
            bounds.len()
        )));
    }
    for &(lo, hi) in bounds {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::invalid(format!(
                "box side [{lo}, {hi}] is not a bounded interval"
            )));
        }
    }
    Ok(())
}

/// Largest axis width of the box.
pub(super) fn box_diameter(bounds: &[(f64, f64)]) -> f64 {
    bounds
        .iter()
        .map(|&(lo, hi)| hi - lo)
        .fold(0.0, f64::max)
}

/// Find the zeros of `map` inside `bounds` by damped Newton iteration from
/// a uniform grid of starts, clustering the converged points.
///
/// Starts whose iterates leave an inflated box, hit a singular Jacobian, or
/// stop making progress are dropped; candidates must pass a residual test
/// and a basin confirmation (a few fresh undamped Newton steps stay put).
/// The enumeration is heuristic: a zero attracting none of the starts is
/// missed, which is why degree reports carry boundary evidence and a risk
/// statement rather than a completeness claim.
pub fn find_zeros(
    map: &dyn SquareMap,
    bounds: &[(f64, f64)],
    opts: &ZeroSearchOpts,
) -> Result<ZeroSearch> {
    let k = map.dim();
    validate_bounds(k, bounds)?;
    if opts.grid_per_axis == 0 {
        return Err(Error::invalid("zero search needs at least one start per axis"));
    }
    let total = opts
        .grid_per_axis
        .checked_pow(k as u32)
        .filter(|&n| n <= opts.max_starts)
        .ok_or(Error::BudgetExceeded {
            what: "multistart grid".into(),
            limit: opts.max_starts,
        })?;

    let probe_scale = super::jacobian_probe_scale(map, bounds);
    let candidates: Vec<Candidate> = (0..total)
        .into_par_iter()
        .filter_map(|flat| {
            let start = grid_point(flat, opts.grid_per_axis, bounds);
            newton_from(map, start, bounds, opts, probe_scale)
        })
        .collect();

    let zeros = cluster(candidates, opts);
    let band = BOUNDARY_BAND * box_diameter(bounds);
    let mut interior = Vec::new();
    let mut boundary = Vec::new();
    for z in zeros {
        let d = boundary_distance(&z, bounds);
        if d > band {
            interior.push(z);
        } else if d >= -band {
            boundary.push(z);
        }
    }
    Ok(ZeroSearch { interior, boundary })
}

struct Candidate {
    point: DVector<f64>,
    residual: f64,
    degenerate: bool,
}

fn grid_point(flat: usize, per_axis: usize, bounds: &[(f64, f64)]) -> DVector<f64> {
    let mut rest = flat;
    DVector::from_iterator(
        bounds.len(),
        bounds.iter().map(|&(lo, hi)| {
            let i = rest % per_axis;
            rest /= per_axis;
            lo + (i as f64 + 0.5) * (hi - lo) / per_axis as f64
        }),
    )
}

fn in_inflated_box(x: &DVector<f64>, bounds: &[(f64, f64)]) -> bool {
    x.iter().zip(bounds).all(|(&xi, &(lo, hi))| {
        let margin = BOX_MARGIN * (hi - lo);
        xi >= lo - margin && xi <= hi + margin
    })
}

/// Signed distance to the nearest face: negative outside the box.
fn boundary_distance(x: &DVector<f64>, bounds: &[(f64, f64)]) -> f64 {
    x.iter()
        .zip(bounds)
        .map(|(&xi, &(lo, hi))| (xi - lo).min(hi - xi))
        .fold(f64::INFINITY, f64::min)
}

fn newton_from(
    map: &dyn SquareMap,
    mut x: DVector<f64>,
    bounds: &[(f64, f64)],
    opts: &ZeroSearchOpts,
    probe_scale: f64,
) -> Option<Candidate> {
    let mut converged = false;
    for _ in 0..opts.max_newton_iter {
        let (f, j) = map.jacobian(&x).ok()?;
        let f_norm = f.amax();
        if f_norm <= opts.newton_tol {
            converged = true;
            break;
        }
        let delta = j.lu().solve(&-&f)?;
        if delta.amax() <= opts.newton_tol * (1.0 + x.amax()) {
            converged = true;
            break;
        }
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..MAX_BACKTRACK {
            let cand = &x + &delta * alpha;
            if in_inflated_box(&cand, bounds) {
                if let Ok(fc) = map.eval(&cand) {
                    if fc.amax() < (1.0 - 1e-4 * alpha) * f_norm {
                        x = cand;
                        accepted = true;
                        break;
                    }
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            return None;
        }
    }
    if !converged {
        return None;
    }
    let residual = map.eval(&x).ok()?.amax();
    if residual > opts.residual_tol {
        return None;
    }
    confirm_basin(map, &x, opts, probe_scale).map(|degenerate| Candidate {
        point: x,
        residual,
        degenerate,
    })
}

/// A genuine zero keeps fresh Newton iterates nearby; a point where damping
/// merely stalled drifts away. Returns whether the Jacobian looked
/// degenerate, which only affects the clustering radius.
fn confirm_basin(
    map: &dyn SquareMap,
    z: &DVector<f64>,
    opts: &ZeroSearchOpts,
    probe_scale: f64,
) -> Option<bool> {
    let scale = BASIN_RADIUS * (1.0 + z.amax());
    let mut x = z.clone();
    let mut degenerate = false;
    for _ in 0..3 {
        let Ok((f, j)) = map.jacobian(&x) else {
            return None;
        };
        if f.amax() <= opts.newton_tol {
            break;
        }
        let Some(delta) = j.lu().solve(&-&f) else {
            degenerate = true;
            break;
        };
        if !delta.amax().is_finite() {
            degenerate = true;
            break;
        }
        x += &delta;
        if (&x - z).amax() > scale {
            return None;
        }
    }
    if super::degenerate_at(map, z, probe_scale) {
        degenerate = true;
    }
    Some(degenerate)
}

/// Merge converged points into distinct zeros. Points within the cluster
/// radius collapse to the member with the smallest residual; degenerate
/// candidates use the wider radius. The result is sorted lexicographically.
fn cluster(mut candidates: Vec<Candidate>, opts: &ZeroSearchOpts) -> Vec<DVector<f64>> {
    candidates.sort_by(|a, b| lex_cmp(&a.point, &b.point));
    let mut reps: Vec<Candidate> = Vec::new();
    for cand in candidates {
        let radius = |other: &Candidate| {
            if cand.degenerate && other.degenerate {
                DEGENERATE_CLUSTER_RADIUS
            } else {
                opts.cluster_radius
            }
        };
        match reps
            .iter_mut()
            .find(|rep| (&rep.point - &cand.point).amax() <= radius(rep))
        {
            Some(rep) => {
                if cand.residual < rep.residual {
                    *rep = cand;
                }
            }
            None => reps.push(cand),
        }
    }
    let mut zeros: Vec<DVector<f64>> = reps.into_iter().map(|c| c.point).collect();
    zeros.sort_by(|a, b| lex_cmp(a, b));
    zeros
}

fn lex_cmp(a: &DVector<f64>, b: &DVector<f64>) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b.iter()) {
        match x.partial_cmp(y) {
            Some(std::cmp::Ordering::Equal) | None => continue,
            Some(other) => return other,
        }
    }
    std::cmp::Ordering::Equal
}
