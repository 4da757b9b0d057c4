use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{LlmmData, Standardization};
use crate::error::{Error, Result};
use crate::plmm::PlmmPriors;
use crate::prob::linalg::{lower_mul, lower_t_mul};
use crate::prob::{
    half_cauchy_log_density_log_scale_grad, lkj_diag_coefficients, log1p_exp, n_corr_free, sigmoid,
    CorrTransform, CorrelationCholesky, ScaleVector,
};
use crate::sampler::{LogDensity, Model};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// The LLMM uses the same hyperparameters as the PLMM.
pub type LlmmPriors = PlmmPriors;

/// Population parameters on the standardized predictor scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmmParams {
    /// Intercept then one coefficient per marker.
    pub beta: Vec<f64>,
    pub sigma_donor: ScaleVector,
    pub l_donor: CorrelationCholesky,
}

/// The logistic linear mixed model: the condition of each cell regressed on
/// its standardized transformed markers, with a donor random effect on the
/// intercept and every slope.
///
/// ```text
/// y_i ~ Bernoulli(logit⁻¹(x̃_iᵀ(β + u_d)))    x̃_i = (1, x_i)
/// u_d ~ N(0, diag(σ) Ω diag(σ))
/// ```
///
/// Unconstrained layout: `β` plus the mean donor effect (K = J+1), donor
/// latents (D×K), `ln σ` (K), CPC coordinates of Ω (K(K−1)/2).
#[derive(Debug, Clone)]
pub struct Llmm {
    data: LlmmData,
    std: Standardization,
    design: Vec<f64>,
    priors: LlmmPriors,
    k: usize,
    d: usize,
}

impl Llmm {
    pub fn new(data: LlmmData, priors: LlmmPriors) -> Result<Self> {
        priors.validate()?;
        if !data.is_paired() {
            return Err(Error::Design(
                "LLMM is limited to paired samples: every donor needs cells in both conditions".into(),
            ));
        }
        let std = data.standardization()?;
        let design = data.design(&std);
        Ok(Llmm {
            k: data.n_markers() + 1,
            d: data.n_donors(),
            std,
            design,
            data,
            priors,
        })
    }

    pub fn data(&self) -> &LlmmData {
        &self.data
    }

    pub fn standardization(&self) -> &Standardization {
        &self.std
    }

    /// Term names: `intercept` followed by the markers.
    pub fn terms(&self) -> Vec<String> {
        std::iter::once("intercept".to_string()).chain(self.data.markers().iter().cloned()).collect()
    }

    /// Refit specification with the named markers removed.
    pub fn exclude_markers(&self, exclude: &[String]) -> Result<Self> {
        Llmm::new(self.data.exclude_markers(exclude)?, self.priors)
    }

    fn o_z(&self) -> usize {
        self.k
    }

    fn o_sigma(&self) -> usize {
        self.k + self.d * self.k
    }

    fn o_corr(&self) -> usize {
        self.o_sigma() + self.k
    }

    fn globals(&self, q: &[f64]) -> (Vec<f64>, CorrTransform) {
        let (k, s, c) = (self.k, self.o_sigma(), self.o_corr());
        let sigma = q[s..s + k].iter().map(|v| v.exp()).collect();
        (sigma, CorrTransform::forward(k, &q[c..c + n_corr_free(k)]))
    }

    /// Donor effects (D×K) and β on the standardized scale.
    fn effects(&self, q: &[f64], sigma: &[f64], corr: &CorrTransform) -> (Vec<f64>, Vec<f64>) {
        let (k, o) = (self.k, self.o_z());
        let l = corr.cholesky().as_slice();
        let mut u = vec![0.0; self.d * k];
        let mut beta = q[..k].to_vec();
        let inv_d = 1.0 / self.d as f64;
        for (dd, ud) in u.chunks_exact_mut(k).enumerate() {
            lower_mul(l, k, &q[o + dd * k..o + (dd + 1) * k], ud);
            for m in 0..k {
                ud[m] *= sigma[m];
                beta[m] -= ud[m] * inv_d;
            }
        }
        (beta, u)
    }

    /// Standardized-scale population parameters at `q`.
    pub fn params(&self, q: &[f64]) -> Result<LlmmParams> {
        let (sigma, corr) = self.globals(q);
        let (beta, _) = self.effects(q, &sigma, &corr);
        Ok(LlmmParams {
            beta,
            sigma_donor: ScaleVector::new(sigma)?,
            l_donor: corr.into_cholesky(),
        })
    }

    /// Unconstrained vector with donor latents at zero.
    pub fn unconstrain(&self, p: &LlmmParams) -> Result<Vec<f64>> {
        let k = self.k;
        if p.beta.len() != k || p.sigma_donor.len() != k || p.l_donor.dim() != k {
            return Err(Error::Dimension { expected: k, got: p.beta.len() });
        }
        let mut q = vec![0.0; self.dim()];
        q[..k].copy_from_slice(&p.beta);
        let s = self.o_sigma();
        for (t, v) in p.sigma_donor.as_slice().iter().enumerate() {
            q[s + t] = v.ln();
        }
        let c = self.o_corr();
        q[c..].copy_from_slice(&p.l_donor.unconstrain());
        Ok(q)
    }

    /// Per-chain initial vectors: intercept at the pooled log-odds, slopes
    /// and latents at zero, σ near 1 with seeded jitter, identity Ω.
    pub fn initial_values(&self, chains: usize, seed: u64) -> Vec<Vec<f64>> {
        let y = self.data.response();
        let p = (y.iter().map(|&v| v as f64).sum::<f64>() + 0.5) / (y.len() as f64 + 1.0);
        let mut base = vec![0.0; self.dim()];
        base[0] = (p / (1.0 - p)).ln();
        (0..chains)
            .map(|chain| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream((1u64 << 32) | chain as u64);
                let mut q = base.clone();
                for v in &mut q[self.o_sigma()..self.o_corr()] {
                    *v = rng.random_range(-0.1..0.1);
                }
                q
            })
            .collect()
    }

    /// Named log-density terms at `q`; they sum to the log density.
    pub fn log_density_terms(&self, q: &[f64]) -> Vec<(String, f64)> {
        let mut g = vec![0.0; self.dim()];
        let mut terms = Vec::new();
        self.evaluate(q, &mut g, Some(&mut terms));
        terms
    }

    fn evaluate(&self, q: &[f64], grad: &mut [f64], mut terms: Option<&mut Vec<(String, f64)>>) -> f64 {
        let (k, d) = (self.k, self.d);
        let (oz, os, oc) = (self.o_z(), self.o_sigma(), self.o_corr());
        grad.fill(0.0);
        let mut record = |name: &str, v: f64| {
            if let Some(t) = terms.as_deref_mut() {
                t.push((name.to_string(), v));
            }
            v
        };
        let (sigma, corr) = self.globals(q);
        let (beta, u) = self.effects(q, &sigma, &corr);
        let mut lp = 0.0;

        let sd = self.priors.beta_sd;
        let mut prior_beta = 0.0;
        for m in 0..k {
            prior_beta += -HALF_LN_2PI - sd.ln() - 0.5 * (beta[m] / sd).powi(2);
            grad[m] = -beta[m] / (sd * sd);
        }
        lp += record("beta prior", prior_beta);

        let mut prior_sigma = 0.0;
        for t in os..oc {
            let (v, gv) = half_cauchy_log_density_log_scale_grad(q[t], self.priors.sigma_scale);
            prior_sigma += v;
            grad[t] = gv;
        }
        lp += record("sigma prior", prior_sigma);

        let l = corr.cholesky();
        let coef = lkj_diag_coefficients(k, self.priors.lkj_eta);
        let mut gl = vec![0.0; k * k];
        let mut prior_corr = corr.log_jacobian();
        for i in 1..k {
            let lii = l.get(i, i);
            prior_corr += coef[i] * lii.ln();
            gl[i * k + i] += coef[i] / lii;
        }
        lp += record("correlation prior", prior_corr);

        let mut gu = vec![0.0; d * k];
        let mut ll = 0.0;
        let y = self.data.response();
        let donor = self.data.donor_index();
        for (i, xi) in self.design.chunks_exact(k).enumerate() {
            let dd = donor[i];
            let ud = &u[dd * k..(dd + 1) * k];
            let eta: f64 = (0..k).map(|m| xi[m] * (beta[m] + ud[m])).sum();
            let yi = y[i] as f64;
            ll += yi * eta - log1p_exp(eta);
            let r = yi - sigmoid(eta);
            let gud = &mut gu[dd * k..(dd + 1) * k];
            for m in 0..k {
                grad[m] += r * xi[m];
                gud[m] += r * xi[m];
            }
        }
        lp += record("bernoulli likelihood", ll);

        // Stored β carries the mean donor effect.
        let inv_d = 1.0 / d as f64;
        for m in 0..k {
            let gbar = -grad[m] * inv_d;
            gu.chunks_exact_mut(k).for_each(|g| g[m] += gbar);
        }

        let ls = l.as_slice();
        let mut lz = vec![0.0; k];
        let mut scaled = vec![0.0; k];
        let mut tmp = vec![0.0; k];
        let mut gsigma = vec![0.0; k];
        let mut re = 0.0;
        for dd in 0..d {
            let z = &q[oz + dd * k..oz + (dd + 1) * k];
            let gud = &gu[dd * k..(dd + 1) * k];
            lower_mul(ls, k, z, &mut lz);
            for m in 0..k {
                gsigma[m] += gud[m] * lz[m];
                scaled[m] = gud[m] * sigma[m];
                re += -HALF_LN_2PI - 0.5 * z[m] * z[m];
            }
            lower_t_mul(ls, k, &scaled, &mut tmp);
            for m in 0..k {
                grad[oz + dd * k + m] = tmp[m] - z[m];
            }
            for a in 0..k {
                for b in 0..=a {
                    gl[a * k + b] += scaled[a] * z[b];
                }
            }
        }
        lp += record("donor effects", re);

        for m in 0..k {
            grad[os + m] += gsigma[m] * sigma[m];
        }
        corr.backward(&gl, &mut grad[oc..]);
        lp
    }
}

impl LogDensity for Llmm {
    fn dim(&self) -> usize {
        self.o_corr() + n_corr_free(self.k)
    }

    fn log_density_grad(&self, q: &[f64], grad: &mut [f64]) -> f64 {
        self.evaluate(q, grad, None)
    }
}

impl Model for Llmm {
    /// On the transformed-expression scale: `beta[t]`, `sigma_donor[t]`,
    /// `omega_donor[s,t]` for term pairs in order, then `u_donor[donor,t]`.
    /// Terms are `intercept` and the marker names.
    fn output_names(&self) -> Vec<String> {
        let terms = self.terms();
        let mut out: Vec<String> = terms.iter().map(|t| format!("beta[{t}]")).collect();
        out.extend(terms.iter().map(|t| format!("sigma_donor[{t}]")));
        for a in 0..self.k {
            for b in a + 1..self.k {
                out.push(format!("omega_donor[{},{}]", terms[a], terms[b]));
            }
        }
        for donor in self.data.donors() {
            out.extend(terms.iter().map(|t| format!("u_donor[{donor},{t}]")));
        }
        out
    }

    fn constrain(&self, q: &[f64], out: &mut Vec<f64>) {
        let k = self.k;
        let (sigma, corr) = self.globals(q);
        let (beta, u) = self.effects(q, &sigma, &corr);
        out.extend(self.std.destandardize(&beta));
        let omega = corr.cholesky().correlation();
        let cov_s: Vec<f64> = (0..k * k).map(|t| omega[t] * sigma[t / k] * sigma[t % k]).collect();
        let cov = self.std.destandardize_cov(&cov_s);
        let sd: Vec<f64> = (0..k).map(|m| cov[m * k + m].sqrt()).collect();
        out.extend_from_slice(&sd);
        for a in 0..k {
            for b in a + 1..k {
                out.push(cov[a * k + b] / (sd[a] * sd[b]));
            }
        }
        for ud in u.chunks_exact(k) {
            out.extend(self.std.destandardize(ud));
        }
    }

    fn describe_nonfinite(&self, q: &[f64]) -> Option<String> {
        self.log_density_terms(q).into_iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    pub(crate) fn random_data(n: usize, j: usize, d: usize, seed: u64) -> LlmmData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = (0..n * j).map(|_| rng.random_range(0.0..4.0)).collect();
        let y = (0..n).map(|i| (i % 2) as u8).collect();
        let donors: Vec<String> = (0..n).map(|i| format!("d{}", (i / 2) % d)).collect();
        let markers = (0..j).map(|m| format!("m{m}")).collect();
        LlmmData::new(markers, x, y, &donors, ["a".into(), "b".into()]).unwrap()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let model = Llmm::new(random_data(40, 3, 4, 3), LlmmPriors::default()).unwrap();
        let dim = model.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-5;
        for _ in 0..10 {
            let q: Vec<f64> = (0..dim).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
            let mut g = vec![0.0; dim];
            model.log_density_grad(&q, &mut g);
            let mut scratch = vec![0.0; dim];
            for t in 0..dim {
                let (mut a, mut b) = (q.clone(), q.clone());
                a[t] += h;
                b[t] -= h;
                let fd = (model.log_density_grad(&a, &mut scratch) - model.log_density_grad(&b, &mut scratch)) / (2.0 * h);
                let rel = (fd - g[t]).abs() / g[t].abs().max(1.0);
                assert!(rel < 1e-5, "coordinate {t}: {fd} vs {}", g[t]);
            }
        }
    }

    #[test]
    fn single_cell_at_zero() {
        let data = LlmmData::new(
            vec!["m".into()],
            vec![1.0, 3.0],
            vec![0, 1],
            &["d".into(), "d".into()],
            ["a".into(), "b".into()],
        )
        .unwrap();
        let model = Llmm::new(data, LlmmPriors::default()).unwrap();
        let mut q = vec![0.0; model.dim()];
        q[model.o_sigma()..model.o_corr()].fill(0.0);
        let terms = model.log_density_terms(&q);
        let ll = terms.iter().find(|(n, _)| n == "bernoulli likelihood").unwrap().1;
        assert!((ll - 2.0 * -std::f64::consts::LN_2).abs() < 1e-12);
        let total: f64 = terms.iter().map(|(_, v)| v).sum();
        let mut g = vec![0.0; model.dim()];
        assert!((model.log_density_grad(&q, &mut g) - total).abs() < 1e-12);
    }

    #[test]
    fn label_flip_negates_effects() {
        let data = random_data(30, 2, 3, 5);
        let a = Llmm::new(data.clone(), LlmmPriors::default()).unwrap();
        let b = Llmm::new(data.flip_response(), LlmmPriors::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q: Vec<f64> = (0..a.dim()).map(|_| rng.sample(StandardNormal)).collect();
        let mut neg = q.clone();
        neg[..a.o_sigma()].iter_mut().for_each(|v| *v = -*v);
        let ll = |m: &Llmm, q: &[f64]| m.log_density_terms(q).iter().find(|(n, _)| n == "bernoulli likelihood").unwrap().1;
        assert!((ll(&a, &q) - ll(&b, &neg)).abs() < 1e-10);
    }

    #[test]
    fn unpaired_design_is_rejected() {
        let data = LlmmData::new(
            vec!["m".into()],
            vec![1.0, 2.0, 3.0],
            vec![0, 1, 0],
            &["d1".into(), "d1".into(), "d2".into()],
            ["a".into(), "b".into()],
        )
        .unwrap();
        let err = Llmm::new(data, LlmmPriors::default()).unwrap_err();
        assert!(err.to_string().contains("paired"));
    }

    #[test]
    fn outputs_are_destandardized() {
        let model = Llmm::new(random_data(40, 2, 4, 9), LlmmPriors::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q: Vec<f64> = (0..model.dim()).map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
        let mut out = Vec::new();
        model.constrain(&q, &mut out);
        assert_eq!(out.len(), model.output_names().len());
        let (sigma, corr) = model.globals(&q);
        let (bs, us) = model.effects(&q, &sigma, &corr);
        let x = model.data().x();
        let donor = model.data().donor_index();
        let k = 3;
        let u_off = k + k + 3;
        for i in 0..model.data().n_cells() {
            let xs = &model.design[i * k..(i + 1) * k];
            let dd = donor[i];
            let eta_s: f64 = (0..k).map(|m| xs[m] * (bs[m] + us[dd * k + m])).sum();
            let ud = &out[u_off + dd * k..u_off + (dd + 1) * k];
            let eta = out[0] + ud[0] + (out[1] + ud[1]) * x[i * 2] + (out[2] + ud[2]) * x[i * 2 + 1];
            assert!((eta - eta_s).abs() < 1e-10);
        }
        let p = model.params(&q).unwrap();
        let back = model.unconstrain(&p).unwrap();
        assert_eq!(model.params(&back).unwrap().beta.len(), k);
    }
}
