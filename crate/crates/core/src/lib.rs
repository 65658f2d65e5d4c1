//! Rough paths in p-variation scale, rough stochastic integration by sewing,
//! and solvers for backward SDEs driven by a rough drift.
//!
//! Every stochastic object lives on a [`ProbabilityModel`]: either an exact
//! binomial tree (conditional expectations by block averaging) or a Monte Carlo
//! Brownian ensemble (conditional expectations by polynomial regression).

pub mod bsde;
pub mod controlled;
pub mod error;
pub mod flow;
pub mod integral;
pub mod linear;
pub mod models;
pub mod par;
pub mod pde;
pub mod process;
pub mod rates;
pub mod rough_path;
pub mod sewing;

pub use error::{Error, Result};
pub use models::{BinomialTree, BrownianEnsemble, ProbabilityModel};
pub use process::Process;
pub use rough_path::{RoughPath, SampledPath, TimeGrid};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
