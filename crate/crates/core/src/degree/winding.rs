//! Brouwer degree of a planar map by total argument variation along the
//! positively oriented box boundary. Independent of the sign-sum route: no
//! zero finding, no Jacobians, only values of the map on the boundary.

use nalgebra::DVector;

use crate::error::{Error, Result};

use super::zeros::validate_bounds;
use super::SquareMap;

/// Initial segments per box edge before adaptive bisection.
const INITIAL_SEGMENTS: usize = 16;
/// Bisection depth cap per segment.
const MAX_DEPTH: usize = 48;
/// Boundary values with norm at or below this cannot certify a winding.
const NORM_FLOOR: f64 = 1e-13;
/// The summed argument variation must land this close to a multiple of
/// `2 pi` (relative to a full turn).
const CLOSURE_TOL: f64 = 1e-6;

/// Winding number of `map` along the boundary of a planar box, equal to the
/// Brouwer degree when the map has no boundary zeros.
///
/// Each edge starts from a uniform sampling and every sub-arc is bisected
/// until the argument of the map turns by less than a quarter turn across
/// it, which pins the branch of the angle difference. A sampled value too
/// close to zero, or an arc that refuses to settle, is reported as an
/// inadmissible boundary rather than guessed around.
pub fn degree_winding2d(map: &dyn SquareMap, bounds: &[(f64, f64)]) -> Result<i64> {
    if map.dim() != 2 {
        return Err(Error::invalid(
            "winding degree is defined for planar maps only",
        ));
    }
    validate_bounds(2, bounds)?;
    let (x0, x1) = bounds[0];
    let (y0, y1) = bounds[1];
    let corners = [
        DVector::from_vec(vec![x0, y0]),
        DVector::from_vec(vec![x1, y0]),
        DVector::from_vec(vec![x1, y1]),
        DVector::from_vec(vec![x0, y1]),
    ];

    let mut total = 0.0;
    for e in 0..4 {
        let a = &corners[e];
        let b = &corners[(e + 1) % 4];
        let mut prev_point = a.clone();
        let mut prev_value = eval_checked(map, &prev_point)?;
        for i in 1..=INITIAL_SEGMENTS {
            let s = i as f64 / INITIAL_SEGMENTS as f64;
            let point = a * (1.0 - s) + b * s;
            let value = eval_checked(map, &point)?;
            total += arc_variation(map, &prev_point, &point, &prev_value, &value, MAX_DEPTH)?;
            prev_point = point;
            prev_value = value;
        }
    }

    let turns = total / std::f64::consts::TAU;
    let degree = turns.round();
    if (turns - degree).abs() > CLOSURE_TOL {
        return Err(Error::domain(format!(
            "boundary argument variation {turns:.3e} turns does not close up to an integer"
        )));
    }
    Ok(degree as i64)
}

fn eval_checked(map: &dyn SquareMap, point: &DVector<f64>) -> Result<DVector<f64>> {
    let value = map.eval(point)?;
    if value.norm() <= NORM_FLOOR {
        return Err(Error::NotAdmissible {
            min_norm: value.norm(),
        });
    }
    Ok(value)
}

/// Signed argument variation of the map across one boundary arc, bisecting
/// until each piece turns by less than `pi / 2`.
fn arc_variation(
    map: &dyn SquareMap,
    a: &DVector<f64>,
    b: &DVector<f64>,
    fa: &DVector<f64>,
    fb: &DVector<f64>,
    depth: usize,
) -> Result<f64> {
    let d = signed_angle(fa, fb);
    if d.abs() < std::f64::consts::FRAC_PI_2 {
        return Ok(d);
    }
    if depth == 0 {
        return Err(Error::NotAdmissible {
            min_norm: fa.norm().min(fb.norm()),
        });
    }
    let mid = (a + b) * 0.5;
    let fm = eval_checked(map, &mid)?;
    Ok(arc_variation(map, a, &mid, fa, &fm, depth - 1)?
        + arc_variation(map, &mid, b, &fm, fb, depth - 1)?)
}

/// Angle from `u` to `v` in `(-pi, pi]`.
fn signed_angle(u: &DVector<f64>, v: &DVector<f64>) -> f64 {
    let cross = u[0] * v[1] - u[1] * v[0];
    let dot = u[0] * v[0] + u[1] * v[1];
    cross.atan2(dot)
}
