//! Finite depth-and-width neural tangent kernel laboratory.
//!
//! The crate measures the on-diagonal NTK `K(x, x)` of randomly initialized
//! fully connected ReLU networks and its first SGD update, evaluates the
//! closed-form mean, second-moment and update envelopes, and cross-checks
//! both against exact path enumeration and a two-state transfer chain.
//!
//! Module map:
//! - [`net`]: architectures, weight distributions, initialization, forward pass.
//! - [`ntk`]: parameter gradients, kernel decomposition, Hessian contractions,
//!   one-step SGD kernel update.
//! - [`theory`]: closed-form mean and envelope evaluators.
//! - [`oracle`]: exact sum-over-paths expectations and combinatorial checks.
//! - [`chain`]: transfer-chain dynamic program for pair-of-paths expectations.
//! - [`mc`]: reproducible parallel Monte Carlo harness.
//! - [`stats`]: mergeable moment accumulators and jackknife intervals.
//! - [`cli`]: the `ntklab` command-line front end.

pub mod chain;
pub mod cli;
pub mod error;
pub mod mc;
pub mod net;
pub mod ntk;
pub mod oracle;
pub mod stats;
pub mod theory;

pub use error::{Error, Result};
