//! Constrained second-order dynamics on implicitly defined manifolds:
//! constraint geometry, reactive forces, differential-algebraic lifts,
//! topological degree of tangent fields, and continuation of periodic
//! orbits under periodic forcing.
//!
//! The crate is organized bottom-up:
//!
//! * [`expr`] — expression parsing and one-pass second-order forward AD;
//! * [`manifold`] — the zero set of a constraint map with an invertible
//!   second-block Jacobian, its projections and chart solves;
//! * [`dynamics`] — reactive force, tangent second-order fields, lifts of
//!   differential-algebraic systems, and projected integrators;
//! * [`degree`] — zero finding and Brouwer degree via index sums and
//!   winding numbers, plus period-averaged fields;
//! * [`continuation`] — single shooting and pseudo-arclength tracing of
//!   branches of periodic orbits;
//! * [`problem`] / [`cli`] — the problem-file format and the command-line
//!   front end built on it.

pub mod cli;
pub mod continuation;
pub mod degree;
pub mod dynamics;
pub mod error;
pub mod expr;
pub mod manifold;
pub mod problem;

pub use error::{Error, Result};
