use std::io::Write;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::draws::PosteriorDraws;
use crate::error::{Error, Result};

/// Per-chain sampler statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainStats {
    pub chain: usize,
    /// Mean Metropolis acceptance probability over retained iterations.
    pub accept_rate: f64,
    pub divergences: usize,
    pub warmup_divergences: usize,
    pub step_size: f64,
    pub leapfrog_steps: u64,
    pub inv_metric: Vec<f64>,
}

/// Convergence diagnostics for a set of draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub names: Vec<String>,
    /// Rank-normalized split R-hat; NaN with fewer than two chains or for a
    /// constant parameter.
    pub rhat: Vec<f64>,
    pub ess: Vec<f64>,
    pub chains: Vec<ChainStats>,
}

impl Diagnostics {
    pub fn compute(draws: &PosteriorDraws, chains: Vec<ChainStats>) -> Self {
        let rhat = compute_rhat(draws)
            .unwrap_or_else(|_| vec![f64::NAN; draws.n_params()]);
        Diagnostics {
            names: draws.names().to_vec(),
            rhat,
            ess: compute_ess(draws),
            chains,
        }
    }

    /// Largest finite R-hat, if any.
    pub fn max_rhat(&self) -> Option<f64> {
        self.rhat.iter().copied().filter(|r| r.is_finite()).reduce(f64::max)
    }

    pub fn min_ess(&self) -> Option<f64> {
        self.ess.iter().copied().filter(|r| r.is_finite()).reduce(f64::min)
    }

    /// Parameters whose R-hat exceeds `threshold`.
    pub fn rhat_above(&self, threshold: f64) -> Vec<(&str, f64)> {
        self.names
            .iter()
            .zip(&self.rhat)
            .filter(|(_, r)| **r > threshold)
            .map(|(n, r)| (n.as_str(), *r))
            .collect()
    }

    pub fn total_divergences(&self) -> usize {
        self.chains.iter().map(|c| c.divergences).sum()
    }

    /// CSV with columns `parameter,rhat,ess`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["parameter", "rhat", "ess"])?;
        for ((n, r), e) in self.names.iter().zip(&self.rhat).zip(&self.ess) {
            w.write_record([n.as_str(), &r.to_string(), &e.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<diagnostics>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// Per-parameter rank-normalized split R-hat.
pub fn compute_rhat(draws: &PosteriorDraws) -> Result<Vec<f64>> {
    (0..draws.n_params()).map(|j| rhat(&draws.by_chain(j))).collect()
}

/// Per-parameter effective sample size.
pub fn compute_ess(draws: &PosteriorDraws) -> Vec<f64> {
    (0..draws.n_params()).map(|j| ess(&draws.by_chain(j))).collect()
}

fn check_chains(chains: &[Vec<f64>]) -> Result<usize> {
    if chains.len() < 2 {
        return Err(Error::RhatUnavailable(format!(
            "R-hat needs at least 2 chains, got {}",
            chains.len()
        )));
    }
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    if n < 4 {
        return Err(Error::RhatUnavailable(format!(
            "R-hat needs at least 4 draws per chain, got {n}"
        )));
    }
    Ok(n)
}

/// Splits every chain in half; the middle draw of an odd-length chain is
/// dropped, and chains are truncated to the shortest length.
fn split(chains: &[Vec<f64>]) -> Vec<&[f64]> {
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    let h = n / 2;
    chains
        .iter()
        .flat_map(|c| [&c[..h], &c[n - h..n]])
        .collect()
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)
}

fn rhat_of_parts(parts: &[&[f64]]) -> f64 {
    let n = parts[0].len() as f64;
    let means: Vec<f64> = parts.iter().map(|p| mean(p)).collect();
    let b = n * var(&means);
    let w = mean(&parts.iter().map(|p| var(p)).collect::<Vec<_>>());
    let var_plus = (n - 1.0) / n * w + b / n;
    (var_plus / w).sqrt()
}

/// Classic split R-hat on the raw values.
pub fn split_rhat_basic(chains: &[Vec<f64>]) -> Result<f64> {
    check_chains(chains)?;
    Ok(rhat_of_parts(&split(chains)))
}

/// Maps pooled values to normal scores of their fractional ranks; ties get
/// their average rank.
fn rank_normalize(parts: &[&[f64]]) -> Vec<Vec<f64>> {
    let all: Vec<f64> = parts.iter().flat_map(|p| p.iter().copied()).collect();
    let s = all.len();
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| all[a].total_cmp(&all[b]));
    let mut ranks = vec![0.0; s];
    let mut i = 0;
    while i < s {
        let mut k = i;
        while k + 1 < s && all[order[k + 1]] == all[order[i]] {
            k += 1;
        }
        let r = (i + k) as f64 / 2.0 + 1.0;
        for &o in &order[i..=k] {
            ranks[o] = r;
        }
        i = k + 1;
    }
    let z = Normal::standard();
    let mut out = Vec::with_capacity(parts.len());
    let mut pos = 0;
    for p in parts {
        out.push(
            ranks[pos..pos + p.len()]
                .iter()
                .map(|r| z.inverse_cdf((r - 0.375) / (s as f64 + 0.25)))
                .collect(),
        );
        pos += p.len();
    }
    out
}

/// Rank-normalized split R-hat: the larger of the bulk and folded versions.
pub fn rhat(chains: &[Vec<f64>]) -> Result<f64> {
    check_chains(chains)?;
    let parts = split(chains);
    let mut sorted: Vec<f64> = parts.iter().flat_map(|p| p.iter().copied()).collect();
    sorted.sort_by(f64::total_cmp);
    let med = crate::summary::quantile_sorted(&sorted, 0.5);
    let folded: Vec<Vec<f64>> = parts
        .iter()
        .map(|p| p.iter().map(|v| (v - med).abs()).collect())
        .collect();
    let folded_refs: Vec<&[f64]> = folded.iter().map(Vec::as_slice).collect();
    let bulk = rank_normalize(&parts);
    let fold = rank_normalize(&folded_refs);
    let bulk_refs: Vec<&[f64]> = bulk.iter().map(Vec::as_slice).collect();
    let fold_refs: Vec<&[f64]> = fold.iter().map(Vec::as_slice).collect();
    Ok(rhat_of_parts(&bulk_refs).max(rhat_of_parts(&fold_refs)))
}

/// Biased autocovariance at every lag, computed with an FFT.
fn autocovariance(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let m = mean(x);
    let size = 2 * n;
    let mut buf: Vec<Complex<f64>> = x
        .iter()
        .map(|v| Complex::new(v - m, 0.0))
        .chain(std::iter::repeat_n(Complex::new(0.0, 0.0), size - n))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(size).process(&mut buf);
    for c in buf.iter_mut() {
        *c = Complex::new(c.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(size).process(&mut buf);
    buf[..n].iter().map(|c| c.re / (size as f64 * n as f64)).collect()
}

/// Multi-chain effective sample size on split chains, with Geyer's initial
/// positive sequence and monotone truncation. Capped at the total draw count.
/// Returns NaN for a constant parameter or fewer than 4 draws per chain.
pub fn ess(chains: &[Vec<f64>]) -> f64 {
    let n_min = chains.iter().map(Vec::len).min().unwrap_or(0);
    if chains.is_empty() || n_min < 4 {
        return f64::NAN;
    }
    let parts = split(chains);
    let m = parts.len();
    let n = parts[0].len();
    let acov: Vec<Vec<f64>> = parts.iter().map(|p| autocovariance(p)).collect();
    let means: Vec<f64> = parts.iter().map(|p| mean(p)).collect();
    let nf = n as f64;
    let w = acov.iter().map(|a| a[0] * nf / (nf - 1.0)).sum::<f64>() / m as f64;
    let b_over_n = if m > 1 { var(&means) } else { 0.0 };
    let var_plus = w * (nf - 1.0) / nf + b_over_n;
    if !(var_plus > 0.0) || !var_plus.is_finite() {
        return f64::NAN;
    }
    let rho = |t: usize| {
        let mean_acov = acov.iter().map(|a| a[t]).sum::<f64>() / m as f64;
        1.0 - (w - mean_acov) / var_plus
    };
    let mut rho_hat = vec![0.0; n];
    rho_hat[0] = 1.0;
    if n > 1 {
        rho_hat[1] = rho(1);
    }
    let mut t = 0;
    let (mut even, mut odd) = (1.0, rho_hat[1]);
    while t + 3 < n && even + odd > 0.0 {
        even = rho(t + 2);
        odd = rho(t + 3);
        if even + odd >= 0.0 {
            rho_hat[t + 2] = even;
            rho_hat[t + 3] = odd;
        }
        t += 2;
    }
    let max_t = t;
    if rho_hat[max_t] > 0.0 && max_t + 1 < n {
        rho_hat[max_t + 1] = rho_hat[max_t];
    }
    let mut k = 1;
    while k + 2 < max_t {
        let prev = rho_hat[k - 1] + rho_hat[k];
        if rho_hat[k + 1] + rho_hat[k + 2] > prev {
            rho_hat[k + 1] = prev / 2.0;
            rho_hat[k + 2] = prev / 2.0;
        }
        k += 2;
    }
    let total = (m * n) as f64;
    let tail = if max_t + 1 < n { rho_hat[max_t + 1] } else { 0.0 };
    let tau = -1.0 + 2.0 * rho_hat[..max_t].iter().sum::<f64>() + tail;
    let tau = tau.max(1.0 / total.log10().max(1.0));
    (total / tau).min(total)
}

/// Monte Carlo standard error of the mean.
pub fn mcse_mean(chains: &[Vec<f64>]) -> f64 {
    let all: Vec<f64> = chains.iter().flat_map(|c| c.iter().copied()).collect();
    (var(&all) / ess(chains)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn iid(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Vec<Vec<f64>> {
        (0..m)
            .map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect())
            .collect()
    }

    fn ar1(rng: &mut ChaCha8Rng, n: usize, rho: f64) -> Vec<f64> {
        let s = (1.0 - rho * rho).sqrt();
        let mut x: f64 = rng.sample(StandardNormal);
        (0..n)
            .map(|_| {
                let e: f64 = rng.sample(StandardNormal);
                x = rho * x + s * e;
                x
            })
            .collect()
    }

    #[test]
    fn iid_chains_have_rhat_near_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = iid(&mut rng, 4, 2500);
        let r = rhat(&c).unwrap();
        assert!((1.0 - 1e-3..=1.01).contains(&r), "{r}");
        assert!(split_rhat_basic(&c).unwrap() < 1.01);
    }

    #[test]
    fn offset_chain_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut c = iid(&mut rng, 4, 1000);
        c[2].iter_mut().for_each(|v| *v += 10.0);
        assert!(rhat(&c).unwrap() > 1.1);
    }

    #[test]
    fn single_chain_rhat_is_unavailable() {
        let err = rhat(&[vec![0.0, 1.0, 2.0, 3.0, 4.0]]).unwrap_err();
        assert!(matches!(err, Error::RhatUnavailable(_)));
    }

    #[test]
    fn ar1_ess_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rho = 0.9;
        let c = vec![ar1(&mut rng, 100_000, rho)];
        let ratio = ess(&c) / 100_000.0;
        let expected = (1.0 - rho) / (1.0 + rho);
        assert!((ratio / expected - 1.0).abs() < 0.3, "{ratio} vs {expected}");
    }

    #[test]
    fn iid_ess_is_near_total_and_capped() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = iid(&mut rng, 4, 1000);
        let e = ess(&c);
        assert!(e > 3000.0 && e <= 4000.0, "{e}");
        let alt: Vec<f64> = (0..1000).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert!(ess(&[alt.clone(), alt]) <= 2000.0);
    }

    #[test]
    fn autocovariance_matches_direct_sum() {
        let x = [1.0, 3.0, -2.0, 0.5, 4.0, 2.0];
        let m = mean(&x);
        let a = autocovariance(&x);
        for t in 0..x.len() {
            let direct: f64 = (0..x.len() - t).map(|i| (x[i] - m) * (x[i + t] - m)).sum::<f64>()
                / x.len() as f64;
            assert!((a[t] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_parameter_gives_nan() {
        assert!(ess(&[vec![2.0; 10], vec![2.0; 10]]).is_nan());
    }
}
