//! Hamiltonian Monte Carlo: leapfrog integration, dual-averaged step size,
//! diagonal metric adaptation, parallel chains and convergence diagnostics.

mod chain;
mod config;
mod diagnostics;
mod draws;
mod hmc;

pub use chain::{run_chains, ChainRunner, ChainState, Checkpointing};
pub use config::{MassMatrix, SamplerConfig};
pub use diagnostics::{
    compute_ess, compute_rhat, ess, mcse_mean, rhat, split_rhat_basic, ChainStats, Diagnostics,
};
pub use draws::PosteriorDraws;
pub use hmc::{leapfrog, DualAveraging, Divergence, DIVERGENCE_THRESHOLD};

/// Log density on unconstrained space, with its gradient.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    /// Writes the gradient into `grad` and returns the log density. A
    /// non-finite return marks a point outside the support.
    fn log_density_grad(&self, q: &[f64], grad: &mut [f64]) -> f64;
}

/// A target whose draws are reported on a named, constrained scale.
pub trait Model: LogDensity {
    fn output_names(&self) -> Vec<String>;

    /// Appends the reported quantities for unconstrained point `q` to `out`.
    fn constrain(&self, q: &[f64], out: &mut Vec<f64>);

    /// Names the first log-density term that is not finite at `q`, if the
    /// model can tell.
    fn describe_nonfinite(&self, _q: &[f64]) -> Option<String> {
        None
    }
}

/// Reports the unconstrained coordinates of any [`LogDensity`] as `q[i]`.
pub struct Unconstrained<T>(pub T);

impl<T: LogDensity> LogDensity for Unconstrained<T> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn log_density_grad(&self, q: &[f64], grad: &mut [f64]) -> f64 {
        self.0.log_density_grad(q, grad)
    }
}

impl<T: LogDensity> Model for Unconstrained<T> {
    fn output_names(&self) -> Vec<String> {
        (0..self.0.dim()).map(|i| format!("q[{i}]")).collect()
    }

    fn constrain(&self, q: &[f64], out: &mut Vec<f64>) {
        out.extend_from_slice(q);
    }
}

impl<F> LogDensity for (usize, F)
where
    F: Fn(&[f64], &mut [f64]) -> f64 + Sync,
{
    fn dim(&self) -> usize {
        self.0
    }

    fn log_density_grad(&self, q: &[f64], grad: &mut [f64]) -> f64 {
        (self.1)(q, grad)
    }
}
