//! Online maximum-likelihood parameter estimation for continuously monitored
//! quantum systems.
//!
//! The library propagates a quantum filter together with per-parameter
//! sensitivity (tangent) states from a single diffusive measurement record,
//! accumulates the record's log-likelihood, and updates parameter estimates
//! by stochastic gradient ascent — in real time, one pass over the data. An
//! offline (fixed-parameter) likelihood evaluator and batch gradient-ascent
//! driver, plus a trajectory simulator, complete the toolbox.
//!
//! Modules:
//! - [`algebra`]: dense complex-matrix kernel, density/tangent operators,
//!   superoperator building blocks;
//! - [`model`]: diffusive measurement models and the one-step Kraus map;
//! - [`sim`]: seeded trajectory simulation with slowly drifting truth;
//! - [`filter`]: quantum filter + sensitivity propagation, log-likelihood and
//!   gradient increments;
//! - [`estimator`]: the online (streaming) gradient-ascent estimator;
//! - [`offline`]: fixed-parameter likelihood, exact batch gradient,
//!   finite-difference oracle and batch ascent.

pub mod algebra;
pub mod error;
pub mod estimator;
pub mod filter;
pub mod model;
pub mod offline;
pub mod sim;

pub use error::{Error, Result};
