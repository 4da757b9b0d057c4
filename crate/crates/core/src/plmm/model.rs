use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::CellTable;
use crate::error::{Error, Result};
use crate::prob::linalg::{lower_mul, lower_t_mul};
use crate::prob::{
    half_cauchy_log_density_log_scale_grad, lkj_diag_coefficients, ln_factorial,
    mvn_log_density_chol_grad, n_corr_free, CorrTransform, CorrelationCholesky, ScaleVector,
};
use crate::sampler::{LogDensity, Model};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Prior hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlmmPriors {
    /// Standard deviation of the normal prior on every β.
    pub beta_sd: f64,
    /// Scale of the half-Cauchy prior on every σ.
    pub sigma_scale: f64,
    /// LKJ shape for all three correlation matrices.
    pub lkj_eta: f64,
}

impl Default for PlmmPriors {
    fn default() -> Self {
        PlmmPriors {
            beta_sd: 7.0,
            sigma_scale: 2.5,
            lkj_eta: 1.0,
        }
    }
}

impl PlmmPriors {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("beta_sd", self.beta_sd),
            ("sigma_scale", self.sigma_scale),
            ("lkj_eta", self.lkj_eta),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// How the latent random-effect blocks are stored in the unconstrained vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Parameterization {
    /// Standard-normal latents mapped through `σ ⊙ (L z)`.
    #[default]
    NonCentered,
    /// The effects themselves, with a multivariate normal density.
    Centered,
}

/// Population-level PLMM parameters (everything except the latent effects).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlmmParams {
    /// `beta[c][j]`: condition `c` (0 = reference), marker `j`, log-count scale.
    pub beta: [Vec<f64>; 2],
    pub sigma_cond: [ScaleVector; 2],
    pub l_cond: [CorrelationCholesky; 2],
    pub sigma_donor: ScaleVector,
    pub l_donor: CorrelationCholesky,
}

impl PlmmParams {
    pub fn n_markers(&self) -> usize {
        self.beta[0].len()
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.n_markers();
        let dims = [
            self.beta[1].len(),
            self.sigma_cond[0].len(),
            self.sigma_cond[1].len(),
            self.l_cond[0].dim(),
            self.l_cond[1].dim(),
            self.sigma_donor.len(),
            self.l_donor.dim(),
        ];
        if let Some(&got) = dims.iter().find(|&&d| d != j) {
            return Err(Error::Dimension { expected: j, got });
        }
        if self.beta.iter().flatten().any(|b| !b.is_finite()) {
            return Err(Error::Parameter("non-finite beta".into()));
        }
        Ok(())
    }
}

/// Offsets of each block in the unconstrained vector.
#[derive(Debug, Clone, Copy)]
struct Offsets {
    beta: usize,
    z_cell: usize,
    z_donor: usize,
    log_sigma_cond: usize,
    log_sigma_donor: usize,
    y_cond: usize,
    y_donor: usize,
    dim: usize,
}

impl Offsets {
    fn new(n: usize, j: usize, d: usize) -> Self {
        let p = n_corr_free(j);
        let beta = 0;
        let z_cell = beta + 2 * j;
        let z_donor = z_cell + n * j;
        let log_sigma_cond = z_donor + d * j;
        let log_sigma_donor = log_sigma_cond + 2 * j;
        let y_cond = log_sigma_donor + j;
        let y_donor = y_cond + 2 * p;
        Offsets {
            beta,
            z_cell,
            z_donor,
            log_sigma_cond,
            log_sigma_donor,
            y_cond,
            y_donor,
            dim: y_donor + p,
        }
    }
}

/// The Poisson log-normal mixed model bound to a count table.
///
/// Unconstrained layout: `β` (2J, condition-major), cell latents (NJ), donor
/// latents (DJ), `ln σ` for condition 1, condition 2 and donor (J each), then
/// the CPC coordinates of the three correlation factors (J(J−1)/2 each).
#[derive(Debug, Clone)]
pub struct Plmm {
    n: usize,
    j: usize,
    d: usize,
    y: Vec<f64>,
    cond: Vec<u8>,
    n_cond: [usize; 2],
    donor: Vec<usize>,
    lnfact_total: f64,
    markers: Vec<String>,
    donors: Vec<String>,
    levels: [String; 2],
    priors: PlmmPriors,
    param: Parameterization,
    off: Offsets,
}

/// Gradient accumulators for the likelihood loops.
struct Accum<'a> {
    grad: &'a mut [f64],
    gu: &'a mut [f64],
    gsigma: &'a mut [Vec<f64>; 3],
    gl: &'a mut [Vec<f64>; 3],
}

/// Decoded scale and correlation blocks.
struct Globals {
    sigma: [Vec<f64>; 3],
    corr: [CorrTransform; 3],
}

impl Plmm {
    pub fn new(table: &CellTable, priors: PlmmPriors, param: Parameterization) -> Result<Self> {
        priors.validate()?;
        let (n, j, d) = (table.n_cells(), table.n_markers(), table.n_donors());
        if n == 0 || j == 0 {
            return Err(Error::Design("PLMM needs at least one cell and one marker".into()));
        }
        let lnfact_total = table.counts().iter().map(|&k| ln_factorial(k)).sum();
        Ok(Plmm {
            n,
            j,
            d,
            y: table.counts().iter().map(|&k| k as f64).collect(),
            cond: table.condition().to_vec(),
            n_cond: [0u8, 1].map(|c| table.condition().iter().filter(|&&k| k == c).count()),
            donor: table.donor_index().to_vec(),
            lnfact_total,
            markers: table.marker_names(),
            donors: table.donors().to_vec(),
            levels: table.levels().clone(),
            priors,
            param,
            off: Offsets::new(n, j, d),
        })
    }

    pub fn n_cells(&self) -> usize {
        self.n
    }

    pub fn n_markers(&self) -> usize {
        self.j
    }

    pub fn n_donors(&self) -> usize {
        self.d
    }

    pub fn markers(&self) -> &[String] {
        &self.markers
    }

    pub fn donors(&self) -> &[String] {
        &self.donors
    }

    pub fn levels(&self) -> &[String; 2] {
        &self.levels
    }

    pub fn priors(&self) -> &PlmmPriors {
        &self.priors
    }

    pub fn parameterization(&self) -> Parameterization {
        self.param
    }

    fn globals(&self, q: &[f64]) -> Globals {
        let (j, p, o) = (self.j, n_corr_free(self.j), &self.off);
        let scales = |start: usize| q[start..start + j].iter().map(|v| v.exp()).collect::<Vec<_>>();
        Globals {
            sigma: [
                scales(o.log_sigma_cond),
                scales(o.log_sigma_cond + j),
                scales(o.log_sigma_donor),
            ],
            corr: [
                CorrTransform::forward(j, &q[o.y_cond..o.y_cond + p]),
                CorrTransform::forward(j, &q[o.y_cond + p..o.y_cond + 2 * p]),
                CorrTransform::forward(j, &q[o.y_donor..o.y_donor + p]),
            ],
        }
    }

    /// Donor effects `u` (D×J) at `q`.
    pub fn donor_effects(&self, q: &[f64]) -> Vec<f64> {
        let g = self.globals(q);
        self.donor_effects_with(q, &g)
    }

    fn donor_effects_with(&self, q: &[f64], g: &Globals) -> Vec<f64> {
        let (j, o) = (self.j, &self.off);
        let zd = &q[o.z_donor..o.z_donor + self.d * j];
        match self.param {
            Parameterization::Centered => zd.to_vec(),
            Parameterization::NonCentered => {
                let mut u = vec![0.0; self.d * j];
                let l = g.corr[2].cholesky().as_slice();
                for dd in 0..self.d {
                    let out = &mut u[dd * j..(dd + 1) * j];
                    lower_mul(l, j, &zd[dd * j..(dd + 1) * j], out);
                    out.iter_mut().zip(&g.sigma[2]).for_each(|(a, s)| *a *= s);
                }
                u
            }
        }
    }

    /// Per condition, the mean latent coordinate `z̄` and the mean cell
    /// effect `b̄` (equal under the centered parameterization).
    fn cell_means(&self, q: &[f64], g: &Globals) -> [(Vec<f64>, Vec<f64>); 2] {
        let (j, o) = (self.j, &self.off);
        let mut zbar = [vec![0.0; j], vec![0.0; j]];
        for (i, zi) in q[o.z_cell..o.z_cell + self.n * j].chunks_exact(j).enumerate() {
            let acc = &mut zbar[self.cond[i] as usize];
            acc.iter_mut().zip(zi).for_each(|(a, z)| *a += z);
        }
        [0, 1].map(|c| {
            let mut z = std::mem::take(&mut zbar[c]);
            let nc = self.n_cond[c].max(1) as f64;
            z.iter_mut().for_each(|v| *v /= nc);
            let b = match self.param {
                Parameterization::NonCentered => {
                    let mut b = vec![0.0; j];
                    lower_mul(g.corr[c].cholesky().as_slice(), j, &z, &mut b);
                    b.iter_mut().zip(&g.sigma[c]).for_each(|(v, s)| *v *= s);
                    b
                }
                Parameterization::Centered => z.clone(),
            };
            (z, b)
        })
    }

    /// β from the stored coordinates, which hold β plus the mean donor
    /// effect and the mean cell effect of the condition. The shift has unit
    /// Jacobian and decouples β from the latent effects.
    fn shifted_beta(&self, q: &[f64], u: &[f64], means: &[(Vec<f64>, Vec<f64>); 2]) -> Vec<f64> {
        let (j, o) = (self.j, &self.off);
        let mut beta = q[o.beta..o.beta + 2 * j].to_vec();
        for c in 0..2 {
            for m in 0..j {
                beta[c * j + m] -= means[c].1[m];
            }
        }
        let inv_d = 1.0 / self.d as f64;
        for ud in u.chunks_exact(j) {
            for m in 0..j {
                beta[m] -= ud[m] * inv_d;
                beta[j + m] -= ud[m] * inv_d;
            }
        }
        beta
    }

    /// Population parameters encoded in `q`.
    pub fn params(&self, q: &[f64]) -> Result<PlmmParams> {
        let j = self.j;
        let g = self.globals(q);
        let beta = self.shifted_beta(q, &self.donor_effects_with(q, &g), &self.cell_means(q, &g));
        let [s0, s1, s2] = g.sigma;
        let [c0, c1, c2] = g.corr;
        Ok(PlmmParams {
            beta: [beta[..j].to_vec(), beta[j..].to_vec()],
            sigma_cond: [ScaleVector::new(s0)?, ScaleVector::new(s1)?],
            l_cond: [c0.into_cholesky(), c1.into_cholesky()],
            sigma_donor: ScaleVector::new(s2)?,
            l_donor: c2.into_cholesky(),
        })
    }

    /// Unconstrained vector for the given population parameters with all
    /// latent effects at zero.
    pub fn unconstrain(&self, p: &PlmmParams) -> Result<Vec<f64>> {
        p.validate()?;
        if p.n_markers() != self.j {
            return Err(Error::Dimension {
                expected: self.j,
                got: p.n_markers(),
            });
        }
        let (j, np, o) = (self.j, n_corr_free(self.j), &self.off);
        let mut q = vec![0.0; o.dim];
        q[o.beta..o.beta + j].copy_from_slice(&p.beta[0]);
        q[o.beta + j..o.beta + 2 * j].copy_from_slice(&p.beta[1]);
        for (k, s) in [&p.sigma_cond[0], &p.sigma_cond[1], &p.sigma_donor].iter().enumerate() {
            let start = o.log_sigma_cond + k * j;
            for (t, v) in s.as_slice().iter().enumerate() {
                q[start + t] = v.ln();
            }
        }
        for (k, l) in [&p.l_cond[0], &p.l_cond[1], &p.l_donor].iter().enumerate() {
            let start = o.y_cond + k * np;
            q[start..start + np].copy_from_slice(&l.unconstrain());
        }
        Ok(q)
    }

    /// Per-chain initial vectors: β at the intercept-only Poisson MLE per
    /// condition and marker, latents at zero, σ near 1 with seeded jitter and
    /// identity correlations. Returns the vectors and any warnings.
    pub fn initial_values(&self, chains: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<String>) {
        let (j, o) = (self.j, &self.off);
        let mut sums = [vec![0.0; j], vec![0.0; j]];
        let mut cells = [0usize; 2];
        for i in 0..self.n {
            let c = self.cond[i] as usize;
            cells[c] += 1;
            for (s, y) in sums[c].iter_mut().zip(&self.y[i * j..(i + 1) * j]) {
                *s += y;
            }
        }
        let mut warnings = Vec::new();
        let mut base = vec![0.0; o.dim];
        for c in 0..2 {
            for m in 0..j {
                let mean = sums[c][m] / cells[c].max(1) as f64;
                base[o.beta + c * j + m] = if mean > 0.0 {
                    mean.ln()
                } else {
                    warnings.push(format!(
                        "marker '{}' is all zero in condition '{}'; initializing from a 0.5 pseudo-count",
                        self.markers[m], self.levels[c]
                    ));
                    (mean + 0.5).ln()
                };
            }
        }
        let inits = (0..chains)
            .map(|chain| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream((1u64 << 32) | chain as u64);
                let mut q = base.clone();
                for v in &mut q[o.log_sigma_cond..o.y_cond] {
                    *v = rng.random_range(-0.1..0.1);
                }
                q
            })
            .collect();
        (inits, warnings)
    }

    /// Named log-density terms at `q`, in evaluation order. Their sum equals
    /// the value returned by [`LogDensity::log_density_grad`].
    pub fn log_density_terms(&self, q: &[f64]) -> Vec<(String, f64)> {
        let mut grad = vec![0.0; self.off.dim];
        let mut terms = Vec::new();
        self.evaluate(q, &mut grad, Some(&mut terms));
        terms
    }

    fn evaluate(&self, q: &[f64], grad: &mut [f64], mut terms: Option<&mut Vec<(String, f64)>>) -> f64 {
        let (j, o) = (self.j, self.off);
        grad.fill(0.0);
        let g = self.globals(q);
        let mut record = |name: &str, v: f64| {
            if let Some(t) = terms.as_deref_mut() {
                t.push((name.to_string(), v));
            }
            v
        };
        let mut lp = 0.0;
        let u = self.donor_effects_with(q, &g);
        let means = self.cell_means(q, &g);
        let beta = self.shifted_beta(q, &u, &means);

        // Priors on β.
        let sd = self.priors.beta_sd;
        let mut prior_beta = 0.0;
        for k in 0..2 * j {
            let b = beta[k];
            prior_beta += -HALF_LN_2PI - sd.ln() - 0.5 * (b / sd) * (b / sd);
            grad[o.beta + k] = -b / (sd * sd);
        }
        lp += record("beta prior", prior_beta);

        // Half-Cauchy on every σ, on the log scale with its Jacobian.
        let mut prior_sigma = 0.0;
        for k in o.log_sigma_cond..o.y_cond {
            let (v, gv) = half_cauchy_log_density_log_scale_grad(q[k], self.priors.sigma_scale);
            prior_sigma += v;
            grad[k] = gv;
        }
        lp += record("sigma prior", prior_sigma);

        // LKJ on each correlation factor, plus the CPC Jacobian.
        let coef = lkj_diag_coefficients(j, self.priors.lkj_eta);
        let mut gl: [Vec<f64>; 3] = [vec![0.0; j * j], vec![0.0; j * j], vec![0.0; j * j]];
        let mut prior_corr = 0.0;
        for k in 0..3 {
            let l = g.corr[k].cholesky();
            for i in 1..j {
                let lii = l.get(i, i);
                prior_corr += coef[i] * lii.ln();
                gl[k][i * j + i] += coef[i] / lii;
            }
            prior_corr += g.corr[k].log_jacobian();
        }
        lp += record("correlation prior", prior_corr);

        let mut gsigma: [Vec<f64>; 3] = [vec![0.0; j], vec![0.0; j], vec![0.0; j]];
        let mut gu = vec![0.0; self.d * j];
        let mut lz = vec![0.0; j];
        let mut scaled = vec![0.0; j];
        let mut tmp = vec![0.0; j];

        // Likelihood and cell effects.
        let mut acc = Accum {
            grad: &mut *grad,
            gu: &mut gu,
            gsigma: &mut gsigma,
            gl: &mut gl,
        };
        let (ll, re_cell) = match self.param {
            Parameterization::NonCentered => {
                macro_rules! dispatch {
                    ($($k:literal)*) => {
                        match j {
                            $($k => self.cells_non_centered($k, q, &beta, &g, &u, &mut acc),)*
                            _ => self.cells_non_centered(j, q, &beta, &g, &u, &mut acc),
                        }
                    };
                }
                dispatch!(1 2 3 4 5 6 7 8 9 10 11 12)
            }
            Parameterization::Centered => match self.cells_centered(q, &beta, &g, &u, &mut acc) {
                Some(v) => v,
                None => return f64::NAN,
            },
        };
        lp += record("poisson likelihood", ll - self.lnfact_total);
        lp += record("cell effects", re_cell);

        // β is stored shifted by the mean latent effects.
        for c in 0..2 {
            if self.n_cond[c] == 0 {
                continue;
            }
            let gbar: Vec<f64> = (0..j).map(|m| -grad[o.beta + c * j + m]).collect();
            let inv_n = 1.0 / self.n_cond[c] as f64;
            let (zbar, _) = &means[c];
            let per_cell = match self.param {
                Parameterization::NonCentered => {
                    let l = g.corr[c].cholesky().as_slice();
                    lower_mul(l, j, zbar, &mut lz);
                    for m in 0..j {
                        gsigma[c][m] += gbar[m] * lz[m];
                        scaled[m] = gbar[m] * g.sigma[c][m];
                    }
                    for a in 0..j {
                        for b in 0..=a {
                            gl[c][a * j + b] += scaled[a] * zbar[b];
                        }
                    }
                    lower_t_mul(l, j, &scaled, &mut tmp);
                    tmp.iter().map(|v| v * inv_n).collect::<Vec<f64>>()
                }
                Parameterization::Centered => gbar.iter().map(|v| v * inv_n).collect(),
            };
            let gz = &mut grad[o.z_cell..o.z_cell + self.n * j];
            for (i, gzi) in gz.chunks_exact_mut(j).enumerate() {
                if self.cond[i] as usize == c {
                    gzi.iter_mut().zip(&per_cell).for_each(|(a, b)| *a += b);
                }
            }
        }
        let inv_d = 1.0 / self.d as f64;
        for m in 0..j {
            let gbar = -(grad[o.beta + m] + grad[o.beta + j + m]) * inv_d;
            gu.chunks_exact_mut(j).for_each(|gd| gd[m] += gbar);
        }

        // Donor effects.
        let mut re_donor = 0.0;
        let ld = g.corr[2].cholesky().as_slice();
        let sd_ = &g.sigma[2];
        for dd in 0..self.d {
            let zd = &q[o.z_donor + dd * j..o.z_donor + (dd + 1) * j];
            let gzd = o.z_donor + dd * j;
            let gud = &gu[dd * j..(dd + 1) * j];
            match self.param {
                Parameterization::NonCentered => {
                    lower_mul(ld, j, zd, &mut lz);
                    for m in 0..j {
                        gsigma[2][m] += gud[m] * lz[m];
                        scaled[m] = gud[m] * sd_[m];
                        re_donor += -HALF_LN_2PI - 0.5 * zd[m] * zd[m];
                    }
                    lower_t_mul(ld, j, &scaled, &mut tmp);
                    for m in 0..j {
                        grad[gzd + m] = tmp[m] - zd[m];
                    }
                    for a in 0..j {
                        for b in 0..=a {
                            gl[2][a * j + b] += scaled[a] * zd[b];
                        }
                    }
                }
                Parameterization::Centered => {
                    let sv = ScaleVector::new(sd_.clone()).unwrap_or_else(|_| ScaleVector::ones(j));
                    let mg = match mvn_log_density_chol_grad(zd, &sv, g.corr[2].cholesky()) {
                        Ok(m) => m,
                        Err(_) => return f64::NAN,
                    };
                    re_donor += mg.value;
                    for m in 0..j {
                        grad[gzd + m] = gud[m] + mg.x[m];
                        gsigma[2][m] += mg.sigma[m];
                    }
                    gl[2].iter_mut().zip(&mg.chol).for_each(|(a, b)| *a += b);
                }
            }
        }
        lp += record("donor effects", re_donor);

        // Chain rule through σ = exp(v) and the CPC map.
        for k in 0..3 {
            for m in 0..j {
                grad[o.log_sigma_cond + k * j + m] += gsigma[k][m] * g.sigma[k][m];
            }
        }
        let p = n_corr_free(j);
        for k in 0..3 {
            let start = o.y_cond + k * p;
            g.corr[k].backward(&gl[k], &mut grad[start..start + p]);
        }
        lp
    }

    /// Poisson likelihood and standard-normal cell latents. Called with a
    /// literal `j` for small panels so the inner loops unroll.
    #[inline(always)]
    fn cells_non_centered(&self, j: usize, q: &[f64], beta_all: &[f64], g: &Globals, u: &[f64], acc: &mut Accum) -> (f64, f64) {
        let o = self.off;
        let mut ll = 0.0;
        let mut re = 0.0;
        let mut lz = vec![0.0; j];
        let mut r = vec![0.0; j];
        let mut tmp = vec![0.0; j];
        let zs = &q[o.z_cell..o.z_cell + self.n * j];
        let (gbeta, rest) = acc.grad.split_at_mut(o.z_cell);
        let gzs = &mut rest[..self.n * j];
        for (i, ((zi, yi), gz)) in zs
            .chunks_exact(j)
            .zip(self.y.chunks_exact(j))
            .zip(gzs.chunks_exact_mut(j))
            .enumerate()
        {
            let c = self.cond[i] as usize;
            let dd = self.donor[i];
            let lc = &g.corr[c].cholesky().as_slice()[..j * j];
            let sc = &g.sigma[c][..j];
            let beta = &beta_all[c * j..(c + 1) * j];
            let ud = &u[dd * j..(dd + 1) * j];
            lower_mul(lc, j, zi, &mut lz);
            let gb = &mut gbeta[o.beta + c * j..o.beta + (c + 1) * j];
            let gud = &mut acc.gu[dd * j..(dd + 1) * j];
            let gs = &mut acc.gsigma[c][..j];
            for m in 0..j {
                let eta = beta[m] + sc[m] * lz[m] + ud[m];
                let mu = eta.exp();
                ll += yi[m] * eta - mu;
                let rm = yi[m] - mu;
                gb[m] += rm;
                gud[m] += rm;
                gs[m] += rm * lz[m];
                r[m] = rm * sc[m];
                re -= 0.5 * zi[m] * zi[m];
            }
            lower_t_mul(lc, j, &r, &mut tmp);
            for m in 0..j {
                gz[m] = tmp[m] - zi[m];
            }
            let glc = &mut acc.gl[c][..j * j];
            for a in 0..j {
                for b in 0..=a {
                    glc[a * j + b] += r[a] * zi[b];
                }
            }
        }
        (ll, re - HALF_LN_2PI * (self.n * j) as f64)
    }

    fn cells_centered(&self, q: &[f64], beta: &[f64], g: &Globals, u: &[f64], acc: &mut Accum) -> Option<(f64, f64)> {
        let (j, o) = (self.j, self.off);
        let mut ll = 0.0;
        let mut re = 0.0;
        let sv = [ScaleVector::new(g.sigma[0].clone()).ok()?, ScaleVector::new(g.sigma[1].clone()).ok()?];
        for i in 0..self.n {
            let c = self.cond[i] as usize;
            let dd = self.donor[i];
            let bi = &q[o.z_cell + i * j..o.z_cell + (i + 1) * j];
            let mg = mvn_log_density_chol_grad(bi, &sv[c], g.corr[c].cholesky()).ok()?;
            re += mg.value;
            for m in 0..j {
                let eta = beta[c * j + m] + bi[m] + u[dd * j + m];
                let y = self.y[i * j + m];
                let mu = eta.exp();
                ll += y * eta - mu;
                let r = y - mu;
                acc.grad[o.beta + c * j + m] += r;
                acc.gu[dd * j + m] += r;
                acc.grad[o.z_cell + i * j + m] = r + mg.x[m];
                acc.gsigma[c][m] += mg.sigma[m];
            }
            acc.gl[c].iter_mut().zip(&mg.chol).for_each(|(a, b)| *a += b);
        }
        Some((ll, re))
    }

    fn corr_names(&self, prefix: &str, out: &mut Vec<String>) {
        for a in 0..self.j {
            for b in a + 1..self.j {
                out.push(format!("{prefix}{},{}]", a + 1, b + 1));
            }
        }
    }
}

impl LogDensity for Plmm {
    fn dim(&self) -> usize {
        self.off.dim
    }

    fn log_density_grad(&self, q: &[f64], grad: &mut [f64]) -> f64 {
        self.evaluate(q, grad, None)
    }
}

impl Model for Plmm {
    /// `beta[c,j]`, `sigma_cond[c,j]`, `sigma_donor[j]`, `omega_cond[c,i,j]`
    /// and `omega_donor[i,j]` for `i < j`, then `u_donor[d,j]`; indices are
    /// 1-based, condition 1 is the reference level.
    fn output_names(&self) -> Vec<String> {
        let j = self.j;
        let mut out = Vec::new();
        for c in 1..=2 {
            (1..=j).for_each(|m| out.push(format!("beta[{c},{m}]")));
        }
        for c in 1..=2 {
            (1..=j).for_each(|m| out.push(format!("sigma_cond[{c},{m}]")));
        }
        (1..=j).for_each(|m| out.push(format!("sigma_donor[{m}]")));
        for c in 1..=2 {
            self.corr_names(&format!("omega_cond[{c},"), &mut out);
        }
        self.corr_names("omega_donor[", &mut out);
        for d in 1..=self.d {
            (1..=j).for_each(|m| out.push(format!("u_donor[{d},{m}]")));
        }
        out
    }

    fn constrain(&self, q: &[f64], out: &mut Vec<f64>) {
        let j = self.j;
        let g = self.globals(q);
        let u = self.donor_effects_with(q, &g);
        out.extend(self.shifted_beta(q, &u, &self.cell_means(q, &g)));
        for s in &g.sigma {
            out.extend_from_slice(s);
        }
        for t in &g.corr {
            let omega = t.cholesky().correlation();
            for a in 0..j {
                for b in a + 1..j {
                    out.push(omega[a * j + b]);
                }
            }
        }
        out.extend(u);
    }

    fn describe_nonfinite(&self, q: &[f64]) -> Option<String> {
        self.log_density_terms(q)
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(name, _)| name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Marker;
    use std::f64::consts::{LN_2, PI};

    fn random_table(n: usize, j: usize, d: usize, seed: u64) -> CellTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let markers = (0..j).map(|m| Marker::functional(format!("m{m}"))).collect();
        let donor = (0..n).map(|i| format!("d{}", i % d)).collect();
        let cond = (0..n).map(|i| if (i / d) % 2 == 0 { "a" } else { "b" }.to_string()).collect();
        let counts = (0..n * j).map(|_| rng.random_range(0..15)).collect();
        CellTable::from_parts(markers, donor, cond, vec!["NK".into(); n], counts, None).unwrap()
    }

    fn check_gradient(model: &Plmm, seed: u64, points: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = model.dim();
        let h = 1e-5;
        for _ in 0..points {
            let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut g = vec![0.0; dim];
            model.log_density_grad(&q, &mut g);
            let mut scratch = vec![0.0; dim];
            for k in 0..dim {
                let mut qp = q.clone();
                qp[k] += h;
                let fp = model.log_density_grad(&qp, &mut scratch);
                qp[k] -= 2.0 * h;
                let fm = model.log_density_grad(&qp, &mut scratch);
                let fd = (fp - fm) / (2.0 * h);
                let err = (fd - g[k]).abs() / g[k].abs().max(1.0);
                assert!(err < 1e-5, "coordinate {k}: analytic {} vs fd {fd}", g[k]);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let t = random_table(20, 3, 2, 1);
        for param in [Parameterization::NonCentered, Parameterization::Centered] {
            let m = Plmm::new(&t, PlmmPriors::default(), param).unwrap();
            assert_eq!(m.dim(), 2 * 3 + 20 * 3 + 2 * 3 + 3 * 3 + 3 * 3);
            check_gradient(&m, 2, 10);
        }
    }

    #[test]
    fn single_cell_value_assembles_from_pieces() {
        let t = CellTable::from_parts(
            vec![Marker::functional("m")],
            vec!["d".into(), "d".into()],
            vec!["a".into(), "b".into()],
            vec!["NK".into(); 2],
            vec![0, 0],
            None,
        )
        .unwrap();
        let m = Plmm::new(&t, PlmmPriors::default(), Parameterization::NonCentered).unwrap();
        let q = vec![0.0; m.dim()];
        let mut g = vec![0.0; m.dim()];
        let lp = m.log_density_grad(&q, &mut g);
        let half_ln_2pi = 0.5 * (2.0 * PI).ln();
        let poisson = 2.0 * -1.0;
        let normals = 3.0 * -half_ln_2pi;
        let beta = 2.0 * -0.5 * (2.0 * PI * 49.0).ln();
        let sigma = 3.0 * (LN_2 - (PI * 2.5).ln() - 1.16f64.ln());
        assert!((lp - (poisson + normals + beta + sigma)).abs() < 1e-12, "{lp}");
        let terms = m.log_density_terms(&q);
        let total: f64 = terms.iter().map(|(_, v)| v).sum();
        assert!((total - lp).abs() < 1e-12);
        assert!(m.describe_nonfinite(&q).is_none());
    }

    #[test]
    fn doubling_counts_changes_likelihood_by_poisson_ratio() {
        let t = random_table(12, 2, 3, 5);
        let doubled = CellTable::from_parts(
            t.markers().to_vec(),
            (0..12).map(|i| t.donors()[t.donor_index()[i]].clone()).collect(),
            (0..12).map(|i| t.levels()[t.condition()[i] as usize].clone()).collect(),
            t.celltype().to_vec(),
            t.counts().iter().map(|k| 2 * k).collect(),
            None,
        )
        .unwrap();
        let m1 = Plmm::new(&t, PlmmPriors::default(), Parameterization::NonCentered).unwrap();
        let m2 = Plmm::new(&doubled, PlmmPriors::default(), Parameterization::NonCentered).unwrap();
        let mut q1 = vec![0.0; m1.dim()];
        let beta = [0.3, 1.2, -0.4, 2.0];
        q1[..4].copy_from_slice(&beta);
        let mut q2 = q1.clone();
        q2[..4].iter_mut().for_each(|b| *b += LN_2);
        let like = |m: &Plmm, q: &[f64]| {
            m.log_density_terms(q)
                .into_iter()
                .find(|(n, _)| n == "poisson likelihood")
                .unwrap()
                .1
        };
        let mut expected = 0.0;
        for i in 0..12 {
            let c = t.condition()[i] as usize;
            for mk in 0..2 {
                let y = t.count(i, mk);
                let b = beta[c * 2 + mk];
                expected += (2 * y) as f64 * (b + LN_2) - 2.0 * b.exp() - ln_factorial(2 * y)
                    - (y as f64 * b - b.exp() - ln_factorial(y));
            }
        }
        assert!((like(&m2, &q2) - like(&m1, &q1) - expected).abs() < 1e-9);
    }

    #[test]
    fn init_uses_poisson_mle_and_pseudo_counts() {
        let t = CellTable::from_parts(
            vec![Marker::functional("x"), Marker::functional("zero")],
            vec!["d".into(); 4],
            vec!["a".into(), "a".into(), "b".into(), "b".into()],
            vec!["NK".into(); 4],
            vec![8, 0, 12, 0, 3, 0, 5, 1],
            None,
        )
        .unwrap();
        let m = Plmm::new(&t, PlmmPriors::default(), Parameterization::NonCentered).unwrap();
        let (inits, warnings) = m.initial_values(3, 9);
        assert!((inits[0][0] - 10f64.ln()).abs() < 1e-12);
        assert!((inits[0][1] - 0.5f64.ln()).abs() < 1e-12);
        assert!((inits[0][3] - 0.5f64.ln()).abs() < 1e-12);
        assert_eq!(warnings.len(), 1);
        assert_ne!(inits[0], inits[1]);
        assert_eq!(inits, m.initial_values(3, 9).0);
        let mut g = vec![0.0; m.dim()];
        assert!(m.log_density_grad(&inits[2], &mut g).is_finite());
    }

    #[test]
    fn unconstrain_round_trips_population_parameters() {
        let t = random_table(8, 3, 2, 3);
        let m = Plmm::new(&t, PlmmPriors::default(), Parameterization::NonCentered).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q: Vec<f64> = (0..m.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p = m.params(&q).unwrap();
        let back = m.params(&m.unconstrain(&p).unwrap()).unwrap();
        for (a, b) in p.l_cond[1].as_slice().iter().zip(back.l_cond[1].as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(m.output_names().len(), 6 + 6 + 3 + 9 + 6);
        let mut out = Vec::new();
        m.constrain(&q, &mut out);
        assert_eq!(out.len(), m.output_names().len());
    }
}
