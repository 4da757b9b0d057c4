//! Bayesian mixed models for mass cytometry.
//!
//! Two complementary models are provided:
//!
//! * [`plmm`]: a multivariate Poisson log-normal mixed model that explains
//!   marker counts from the experimental condition, with condition-specific
//!   cell-level random effects and a donor-level random effect.
//! * [`llmm`]: a logistic linear mixed model that predicts the condition from
//!   transformed marker expression, with per-donor random coefficients, plus a
//!   fast method-of-moments approximation.
//!
//! Both are fitted with the Hamiltonian Monte Carlo engine in [`sampler`],
//! which operates on unconstrained parameter vectors built by [`prob`].
//! [`simgen`] generates synthetic data from the models and from the
//! no-confounder / pipe / collider causal graphs.

pub mod data;
pub mod error;
pub mod llmm;
pub mod plmm;
pub mod prob;
pub mod sampler;
pub mod simgen;
pub mod summary;

pub use data::{CellTable, Marker, MarkerRole, Schema, TransformedTable};
pub use error::{Error, Result};
pub use sampler::{Diagnostics, LogDensity, Model, PosteriorDraws, SamplerConfig};

