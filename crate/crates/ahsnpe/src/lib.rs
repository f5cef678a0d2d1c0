//! Amortised hierarchical simulation-based inference for multi-network
//! exponential random graph models.
//!
//! The crate provides the network representation and ERGM summary statistics,
//! an MH network simulator, reference Bayesian fitters (exchange algorithm
//! and exchange-within-Gibbs), neural conditional density estimators (MDN and
//! masked autoregressive flow) trained with an atomic proposal-corrected
//! loss, and the variational EM driver that alternates estimator training
//! with closed-form Normal-inverse-Wishart updates of the group-level
//! parameters.

pub mod config;
pub mod diagnostics;
pub mod driver;
pub mod error;
pub mod exchange;
pub mod flow;
pub mod gauss;
pub mod graph;
pub mod mixture;
pub mod niw;
pub mod report;
pub mod sim;
pub mod stats;

pub use error::{Error, Result};
