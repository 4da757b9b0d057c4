//! Densities, random draws and constrained ↔ unconstrained transforms shared
//! by both models.

mod density;
pub mod linalg;
mod rng;
mod transform;

pub use density::{
    bernoulli_logit_log_pmf, half_cauchy_log_density, half_cauchy_log_density_log_scale_grad,
    lkj_diag_coefficients, lkj_log_density, ln_factorial, log1p_exp, mvn_log_density_chol,
    mvn_log_density_chol_grad, normal_prior_log_density, poisson_log_pmf, sigmoid, MvnGrad,
};
pub use rng::{half_cauchy_sample, lkj_cholesky_sample, mvn_chol_sample};
pub use transform::{
    BlockKind, BlockValue, CorrTransform, CorrelationCholesky, ParamLayout, ScaleVector,
};

/// Number of free coordinates of a `dim × dim` correlation Cholesky factor.
pub const fn n_corr_free(dim: usize) -> usize {
    dim * dim.saturating_sub(1) / 2
}
