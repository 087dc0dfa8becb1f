//! Expression parsing and automatic differentiation.
//!
//! The grammar covers the usual arithmetic operators (`^` for powers,
//! right-associative and binding tighter than unary minus), the functions
//! `neg sin cos tan exp log sqrt abs` and two-argument `pow`, decimal
//! literals with optional exponent, and parentheses. Variable names are
//! supplied by the caller; anything else is rejected with a byte offset.
//!
//! Derivatives come from one-pass forward mode carrying value, gradient and
//! packed Hessian per node, so a single evaluation yields everything the
//! constraint geometry needs.

pub mod ast;
mod dual;
mod eval;
mod parser;
mod vector;

pub use ast::{BinOp, ExprAst, Node, UnaryFn};
pub use parser::parse;
pub use vector::VectorExpr;
