use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::LogDensity;

/// Energy error above which a trajectory is declared divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Divergence;

/// Runs `n` leapfrog steps in place with diagonal inverse metric `inv_metric`.
///
/// `grad` must hold the gradient at `q` on entry and holds the gradient at the
/// final position on return. Returns the log density at the final position,
/// or [`Divergence`] as soon as a non-finite density or gradient appears.
pub fn leapfrog<F>(
    q: &mut [f64],
    p: &mut [f64],
    grad: &mut [f64],
    eps: f64,
    n: usize,
    inv_metric: &[f64],
    mut log_density_grad: F,
) -> Result<f64, Divergence>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let mut logp = f64::NAN;
    for _ in 0..n {
        for (pi, gi) in p.iter_mut().zip(grad.iter()) {
            *pi += 0.5 * eps * gi;
        }
        for ((qi, pi), mi) in q.iter_mut().zip(p.iter()).zip(inv_metric) {
            *qi += eps * mi * pi;
        }
        logp = log_density_grad(q, grad);
        if !logp.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Divergence);
        }
        for (pi, gi) in p.iter_mut().zip(grad.iter()) {
            *pi += 0.5 * eps * gi;
        }
    }
    Ok(logp)
}

pub(crate) fn kinetic(p: &[f64], inv_metric: &[f64]) -> f64 {
    0.5 * p.iter().zip(inv_metric).map(|(a, m)| a * a * m).sum::<f64>()
}

pub(crate) fn sample_momentum<R: Rng>(rng: &mut R, inv_metric: &[f64], p: &mut [f64]) {
    for (pi, m) in p.iter_mut().zip(inv_metric) {
        let e: f64 = rng.sample(StandardNormal);
        *pi = e / m.sqrt();
    }
}

/// Nesterov dual averaging of `ln eps` toward a target acceptance rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualAveraging {
    target: f64,
    mu: f64,
    log_eps: f64,
    log_eps_bar: f64,
    h_bar: f64,
    count: u64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    pub fn new(eps: f64, target: f64) -> Self {
        DualAveraging {
            target,
            mu: (10.0 * eps).ln(),
            log_eps: eps.ln(),
            log_eps_bar: 0.0,
            h_bar: 0.0,
            count: 0,
        }
    }

    /// Feeds one acceptance statistic; returns the next (primal) step size.
    pub fn update(&mut self, accept_stat: f64) -> f64 {
        self.count += 1;
        let m = self.count as f64;
        let w = 1.0 / (m + Self::T0);
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept_stat);
        self.log_eps = self.mu - m.sqrt() / Self::GAMMA * self.h_bar;
        let eta = m.powf(-Self::KAPPA);
        self.log_eps_bar = eta * self.log_eps + (1.0 - eta) * self.log_eps_bar;
        self.log_eps.exp()
    }

    pub fn current(&self) -> f64 {
        self.log_eps.exp()
    }

    /// Averaged step size, used once warmup ends.
    pub fn final_step_size(&self) -> f64 {
        if self.count == 0 {
            self.current()
        } else {
            self.log_eps_bar.exp()
        }
    }
}

/// Doubles or halves `eps` until a single leapfrog step crosses acceptance 0.5.
pub(crate) fn find_reasonable_step_size<T: LogDensity + ?Sized, R: Rng>(
    target: &T,
    q0: &[f64],
    logp0: f64,
    grad0: &[f64],
    inv_metric: &[f64],
    start: f64,
    rng: &mut R,
) -> f64 {
    let d = q0.len();
    let mut eps = start;
    let mut q = vec![0.0; d];
    let mut p = vec![0.0; d];
    let mut g = vec![0.0; d];
    let mut p0 = vec![0.0; d];
    sample_momentum(rng, inv_metric, &mut p0);
    let h0 = -logp0 + kinetic(&p0, inv_metric);
    let log_accept = |eps: f64, q: &mut Vec<f64>, p: &mut Vec<f64>, g: &mut Vec<f64>| {
        q.copy_from_slice(q0);
        p.copy_from_slice(&p0);
        g.copy_from_slice(grad0);
        match leapfrog(q, p, g, eps, 1, inv_metric, |x, gr| target.log_density_grad(x, gr)) {
            Ok(lp) => {
                let h = -lp + kinetic(p, inv_metric);
                if h.is_finite() {
                    h0 - h
                } else {
                    f64::NEG_INFINITY
                }
            }
            Err(_) => f64::NEG_INFINITY,
        }
    };
    let first = log_accept(eps, &mut q, &mut p, &mut g);
    let up = first > 0.5f64.ln();
    for _ in 0..60 {
        let la = log_accept(eps, &mut q, &mut p, &mut g);
        if up && !(la > 0.5f64.ln()) || !up && la > 0.5f64.ln() {
            break;
        }
        eps = if up { eps * 2.0 } else { eps * 0.5 };
    }
    eps.clamp(1e-10, 1e3)
}

pub(crate) struct Transition {
    pub accept_stat: f64,
    pub divergent: bool,
    pub steps: usize,
}

/// One Metropolis-corrected HMC transition. `q`, `logp` and `grad` are
/// updated in place when the proposal is accepted.
#[allow(clippy::too_many_arguments)]
pub(crate) fn transition<T: LogDensity + ?Sized, R: Rng>(
    target: &T,
    q: &mut Vec<f64>,
    logp: &mut f64,
    grad: &mut Vec<f64>,
    eps: f64,
    steps: usize,
    inv_metric: &[f64],
    rng: &mut R,
) -> Transition {
    let d = q.len();
    let mut p = vec![0.0; d];
    sample_momentum(rng, inv_metric, &mut p);
    let h0 = -*logp + kinetic(&p, inv_metric);
    let mut q1 = q.clone();
    let mut g1 = grad.clone();
    let result = leapfrog(&mut q1, &mut p, &mut g1, eps, steps, inv_metric, |x, g| {
        target.log_density_grad(x, g)
    });
    let u: f64 = rng.random();
    let (lp1, h1) = match result {
        Ok(lp) => (lp, -lp + kinetic(&p, inv_metric)),
        Err(Divergence) => {
            return Transition {
                accept_stat: 0.0,
                divergent: true,
                steps,
            }
        }
    };
    let delta = h1 - h0;
    if !delta.is_finite() || delta > DIVERGENCE_THRESHOLD {
        return Transition {
            accept_stat: 0.0,
            divergent: true,
            steps,
        };
    }
    let accept_stat = (-delta).exp().min(1.0);
    if u < accept_stat {
        *q = q1;
        *logp = lp1;
        *grad = g1;
    }
    Transition {
        accept_stat,
        divergent: false,
        steps,
    }
}
