//! Bayesian inference for the Poisson stochastic block model with pair covariates.
//!
//! The pipeline is:
//!
//! 1. [`vem::fit_vem`] computes a variational EM estimate `(tau, theta)`.
//! 2. [`proxy::build_proxy`] turns that fit into a factorized approximate posterior
//!    (categorical memberships, Gaussian block/regression effects, Dirichlet proportions).
//! 3. [`smc::run_smc`] tempers from the approximation to the exact posterior with an
//!    adaptive sequential Monte Carlo sampler, producing weighted particles and two
//!    estimates of the marginal likelihood.
//! 4. [`posterior`] summarizes particle systems (posterior over the number of blocks,
//!    model averaging, residual graphon, latent coordinates, mutual information) and
//!    [`validation`] checks calibration through rank statistics.

pub mod error;
pub mod io;
pub mod math;
pub mod model;
pub mod posterior;
pub mod proxy;
pub mod smc;
pub mod validation;
pub mod vem;
pub mod workflow;

pub use error::{Result, SbmError};
pub use model::{
    Covariates, LatentAssignment, ModelParams, ObservedNetwork, PriorHyper,
};
pub use proxy::ProxyPosterior;
pub use smc::{SmcConfig, SmcOutput, StartDistribution};
pub use vem::{VariationalFit, VemConfig};
