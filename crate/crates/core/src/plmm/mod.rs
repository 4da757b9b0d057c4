//! Poisson log-normal mixed model for marker counts.
//!
//! For cell `i` in condition `c` from donor `d`, marker `j`:
//!
//! ```text
//! y_ij ~ Poisson(exp(β_cj + b_ij + u_dj))
//! b_i  ~ N(0, diag(σ_c) Ω_c diag(σ_c))
//! u_d  ~ N(0, diag(σ_D) Ω_D diag(σ_D))
//! β ~ N(0, 7²),  σ ~ Half-Cauchy(0, 2.5),  Ω ~ LKJ(1)
//! ```

mod model;
mod ppc;
mod summary;

pub use model::{Parameterization, Plmm, PlmmParams, PlmmPriors};
pub use ppc::{posterior_predictive, save_ppc_csv, write_ppc_csv, PpcResult, Predicate, SubsetSpec, MAX_LOG_MU};
pub use summary::{
    corr_increase_probability, fixed_effect_summary, save_summary_csv, scale_summary,
    write_summary_csv, CorrIncreaseSummary, HistogramBin, CORR_HISTOGRAM_BINS,
};
