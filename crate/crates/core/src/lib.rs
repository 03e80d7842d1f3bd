//! Model predictive control with a terminal cost learned by approximate
//! value iteration.
//!
//! The crate is organised along the pipeline it implements:
//!
//! - [`models`]: discrete-time systems, stage cost, constraint boxes, the
//!   normalized orbital rendezvous benchmark and an LQR baseline.
//! - [`approximator`]: polynomial value-function approximator on a
//!   duplicate-free monomial basis with ridge least-squares fitting.
//! - [`value_iteration`]: fitted value iteration, measured error constants,
//!   policy extraction and the one-step decrease check.
//! - [`horizon_cert`]: data-driven estimates of the cost-bound and
//!   sublevel constants plus the closed-form stabilizing horizons.
//! - [`ocp_solver`]: single-shooting finite-horizon OCP with projected
//!   gradient descent and shifted warm starts.
//! - [`closed_loop`]: receding-horizon simulation, value-decrease checks and
//!   run comparison.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod approximator;
pub mod closed_loop;
mod error;
pub mod horizon_cert;
pub mod models;
pub mod ocp_solver;
mod optim;
pub mod plot;
pub mod value_iteration;

pub use error::{Error, Result};

/// Dense column vector used for states and inputs.
pub type Vector = nalgebra::DVector<f64>;
/// Dense matrix.
pub type Matrix = nalgebra::DMatrix<f64>;
