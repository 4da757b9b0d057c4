//! Logistic linear mixed model: predicts the condition of each cell from its
//! transformed markers, with donor-level random coefficients.
//!
//! ```text
//! y_i ~ Bernoulli(logit⁻¹(x̃_iᵀ(β + u_d))),   x̃_i = (1, x_i)
//! u_d ~ N(0, diag(σ) Ω diag(σ))
//! β ~ N(0, 7²),  σ ~ Half-Cauchy(0, 2.5),  Ω ~ LKJ(1)
//! ```
//!
//! Predictors are standardized before fitting; every reported quantity is
//! mapped back to the transformed-expression scale.

mod data;
mod model;
mod mom;
mod summary;

pub use data::{LlmmData, Standardization};
pub use model::{Llmm, LlmmParams, LlmmPriors};
pub use mom::{llmm_mom_fit, DonorFit, MomEstimate, MomRow, SEPARATION_RIDGE};
pub use summary::{llmm_fixed_effect_summary, llmm_scale_summary};
