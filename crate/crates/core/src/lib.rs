//! Differentially private perturbation mechanisms with exact Bayesian and
//! likelihood inference on their outputs.
//!
//! * [`mechanisms`]: additive Laplace and Gaussian mechanisms calibrated by
//!   global or smooth sensitivity, plus arbitrary bounded mechanisms.
//! * [`abc`]: rejection and importance-sampling ABC whose kernel is the
//!   privacy mechanism, which makes rejection draws exact.
//! * [`mcem`]: Monte Carlo EM with importance-sampled E-steps, observed
//!   score and observed information.
//! * [`oracle_gp`]: closed-form and brute-force ground truth for the
//!   Gamma-Poisson model behind a Laplace-privatized count.

// `!(x > 0.0)` style guards deliberately reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod abc;
pub mod error;
pub mod mcem;
pub mod mechanisms;
pub mod model;
pub mod optim;
pub mod oracle_gp;
pub mod rngkit;
pub mod stats;

pub use error::{Error, Result};
