//! Bang-singular-bang minimum-time extremals for single-input
//! control-affine systems `xdot = f0(x, r) + u f1(x, r)`, `|u| <= 1`.
//!
//! The crate is organised bottom-up:
//!
//! * [`symexpr`] parses and differentiates the vector-field components.
//! * [`geometry`] builds Lie brackets, Hamiltonian lifts and the singular feedback.
//! * [`flows`] integrates Hamiltonian fields with variational equations.
//! * [`extremal`] assembles a candidate extremal and certifies it.
//! * [`secondvar`] tests coercivity of the second variation on the singular arc.
//! * [`shooting`] solves the shooting equations, continues in `r` and scans for other zeros.
//! * [`problems_io`] loads problem files, holds the built-ins and writes results.

pub mod extremal;
pub mod flows;
pub mod geometry;
pub mod problems_io;
pub mod secondvar;
pub mod shooting;
pub mod symexpr;

#[doc(hidden)]
pub mod testing;

use thiserror::Error;

pub use symexpr::{EvalError, ParseError};

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(#[from] ParseError),
    #[error("parse error in `{field}`: {source}")]
    FieldParse {
        field: String,
        #[source]
        source: ParseError,
    },
    #[error("evaluation error: {0}")]
    Eval(#[from] EvalError),
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch { what: &'static str, expected: usize, got: usize },
    #[error("strengthened Legendre condition violated: F101 = {value:e} <= {tol:e}")]
    SglcViolated { value: f64, tol: f64 },
    #[error("integration step underflow at t = {t} (h = {h:e})")]
    StepFailure { t: f64, h: f64 },
    #[error("invalid extremal structure: {0}")]
    InvalidStructure(String),
    #[error("Newton did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("singular shooting Jacobian (condition number {cond:e})")]
    SingularJacobian { cond: f64 },
    #[error("iterate left the bang-singular-bang structure: {0}")]
    StructureBroken(String),
    #[error("constraint matrix has rank {rank} < {needed}")]
    RankDeficientConstraints { rank: usize, needed: usize },
    #[error("invalid problem: {0}")]
    Validation(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
