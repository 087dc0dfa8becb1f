//! Crate-wide error type.
//!
//! Every fallible operation returns [`Error`]. The variants split into two
//! broad classes: problems with the *input* (bad expressions, malformed
//! problem files, shape mismatches) and *numerical* failures encountered by
//! an otherwise well-posed computation. [`Error::exit_class`] maps the two
//! classes onto the process exit codes used by the command-line front end.

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, Error)]
pub enum Error {
    /// The expression text does not conform to the grammar. `offset` is a
    /// byte offset into the source string.
    #[error("syntax error at byte {offset}: {msg}")]
    SyntaxError { offset: usize, msg: String },

    /// An identifier that is neither a known function nor one of the
    /// variables the caller declared.
    #[error("unknown variable `{name}` at byte {offset}")]
    UnknownVariable { name: String, offset: usize },

    /// A function call with the wrong number of arguments.
    #[error("`{name}` takes {expected} argument(s), got {got}")]
    ArityError {
        name: String,
        expected: usize,
        got: usize,
    },

    /// Evaluation left the domain of a function (log of a non-positive
    /// number, division by zero, fractional power of a negative base, ...).
    #[error("domain error: {what}")]
    DomainError { what: String },

    /// A derivative was requested at a point where the expression is not
    /// differentiable (currently only `abs` at zero).
    #[error("not differentiable: {what}")]
    NonSmoothPoint { what: String },

    /// The second-block Jacobian of the constraint map is singular or too
    /// ill-conditioned to trust, so the manifold structure breaks down.
    #[error("second-block constraint Jacobian is singular or near-singular (cond ~ {cond:.3e})")]
    SingularB { cond: f64 },

    /// The sign of `det B` disagreed with the value pinned at the first
    /// evaluation; the working region strays across a singularity.
    #[error("sign of det B flipped: pinned {pinned}, found {found}")]
    SignFlip { pinned: i8, found: i8 },

    /// An iterative solve ran out of iterations or diverged.
    #[error("{what} did not converge after {iters} iteration(s)")]
    NoConvergence { what: String, iters: usize },

    /// A field that must be tangent to the manifold is not.
    #[error("tangency violation: {what}")]
    TangencyViolation { what: String },

    /// A step-size control shrank the step below its floor.
    #[error("step size underflow in {what} (step {step:.3e})")]
    StepUnderflow { what: String, step: f64 },

    /// The map vanishes (or nearly vanishes) on the boundary of the region,
    /// so the degree over that region is not defined.
    #[error("region not admissible: min |F| on boundary = {min_norm:.3e}")]
    NotAdmissible { min_norm: f64 },

    /// A zero where the Jacobian determinant is too small to assign a sign.
    #[error("degenerate zero at {location}: |det DF| = {det:.3e} below threshold")]
    DegenerateZero { location: String, det: f64 },

    /// The quadrature doubling loop exhausted its budget before the
    /// requested tolerance was met.
    #[error("quadrature did not converge: last change {last_change:.3e} with {nodes} nodes")]
    QuadratureNotConverged { nodes: usize, last_change: f64 },

    /// The finite-difference Jacobian of the shooting residual is singular
    /// (e.g. the period sits at a linearization resonance).
    #[error("shooting Jacobian is singular (cond ~ {cond:.3e})")]
    SingularShootJacobian { cond: f64 },

    /// Time integration failed; carries the time at which it happened.
    #[error("integration failure at t = {t:.6}: {source}")]
    IntegrationFailure {
        t: f64,
        #[source]
        source: Box<Error>,
    },

    /// An evaluation budget (starts, samples, subdivisions) was exhausted.
    #[error("budget exceeded in {what} ({limit} evaluations)")]
    BudgetExceeded { what: String, limit: usize },

    /// A problem file that parses as TOML but violates the format contract.
    #[error("invalid problem file: {msg}")]
    InvalidProblem { msg: String },

    /// Filesystem trouble while reading or writing artifacts.
    #[error("i/o error on {path}: {msg}")]
    Io { path: String, msg: String },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidProblem { msg: msg.into() }
    }

    pub fn domain(what: impl Into<String>) -> Self {
        Error::DomainError { what: what.into() }
    }

    /// Process exit code class: 2 for input errors, 1 for numerical
    /// failures. Success (0) never reaches this function.
    pub fn exit_class(&self) -> i32 {
        match self {
            Error::SyntaxError { .. }
            | Error::UnknownVariable { .. }
            | Error::ArityError { .. }
            | Error::InvalidProblem { .. }
            | Error::Io { .. } => 2,
            _ => 1,
        }
    }

    /// Wrap an inner failure with the integration time at which it surfaced.
    pub fn at_time(self, t: f64) -> Self {
        Error::IntegrationFailure {
            t,
            source: Box::new(self),
        }
    }
}
