//! Solvers for optimal control of mode-switching processes in which the mode
//! is observed only occasionally: belief propagation for the mode chain,
//! upwind finite-difference value solvers on a 2D grid over finite,
//! infinite, indefinite, and randomly-terminated horizons, observation
//! schemes (scheduled, bounded on-demand, paid on-demand), policy extraction
//! and trajectory simulation, and a JSON scenario format.

// `!(x > 0.0)`-style guards are used on purpose: unlike `x <= 0.0` they
// also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod chain;
pub mod eikonal;
pub mod error;
pub mod grid;
pub mod results;
pub mod scenario;
pub mod sim;
pub mod solver;

pub use error::{Error, Result};
