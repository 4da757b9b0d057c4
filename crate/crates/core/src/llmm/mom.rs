use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::LlmmData;
use crate::error::{Error, Result};
use crate::prob::{log1p_exp, sigmoid};

/// Ridge added to a donor's logistic fit when its MLE does not exist.
pub const SEPARATION_RIDGE: f64 = 1e-4;

const Z_975: f64 = 1.959_963_984_540_054;
const MAX_ITER: usize = 100;
/// A standardized coefficient beyond this size signals separation.
const DIVERGENT_COEF: f64 = 25.0;

/// One donor's logistic regression on the transformed-expression scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DonorFit {
    pub donor: String,
    pub beta: Vec<f64>,
    /// Inverse Fisher information, K×K row-major.
    pub cov: Vec<f64>,
    pub ridge: bool,
}

/// Method-of-moments estimate of the LLMM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomEstimate {
    /// `intercept` then the markers.
    pub terms: Vec<String>,
    pub beta_hat: Vec<f64>,
    /// Random-effect covariance estimate, K×K row-major, positive semidefinite.
    pub cov_hat: Vec<f64>,
    /// Standard error of each entry of `beta_hat`.
    pub se: Vec<f64>,
    pub donor_fits: Vec<DonorFit>,
    pub dropped_donors: Vec<String>,
    pub psd_projected: bool,
    pub warnings: Vec<String>,
}

impl MomEstimate {
    pub fn ridge_donors(&self) -> Vec<&str> {
        self.donor_fits.iter().filter(|f| f.ridge).map(|f| f.donor.as_str()).collect()
    }

    /// `ridge=…;dropped-donor=…;psd-projected`, empty when nothing applies.
    pub fn flags(&self) -> String {
        let mut out = Vec::new();
        let ridge = self.ridge_donors();
        if !ridge.is_empty() {
            out.push(format!("ridge={}", ridge.join("|")));
        }
        if !self.dropped_donors.is_empty() {
            out.push(format!("dropped-donor={}", self.dropped_donors.join("|")));
        }
        if self.psd_projected {
            out.push("psd-projected".to_string());
        }
        out.join(";")
    }

    /// Wald 95% interval for term `t`.
    pub fn interval(&self, t: usize) -> (f64, f64) {
        (self.beta_hat[t] - Z_975 * self.se[t], self.beta_hat[t] + Z_975 * self.se[t])
    }

    pub fn rows(&self) -> Vec<MomRow> {
        let flags = self.flags();
        (0..self.terms.len())
            .map(|t| {
                let (lo, hi) = self.interval(t);
                MomRow {
                    marker: self.terms[t].clone(),
                    quantity: "beta".into(),
                    median: self.beta_hat[t],
                    q025: lo,
                    q975: hi,
                    method: "mom".into(),
                    flags: flags.clone(),
                }
            })
            .collect()
    }

    /// `marker,quantity,median,q025,q975,method,flags`; the point estimate
    /// fills the median column.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in self.rows() {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io("<mom>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomRow {
    pub marker: String,
    pub quantity: String,
    pub median: f64,
    pub q025: f64,
    pub q975: f64,
    pub method: String,
    pub flags: String,
}

struct Fit {
    beta: DVector<f64>,
    cov: DMatrix<f64>,
}

fn penalized_loglik(x: &DMatrix<f64>, y: &DVector<f64>, b: &DVector<f64>, ridge: f64) -> f64 {
    let eta = x * b;
    let ll: f64 = eta.iter().zip(y.iter()).map(|(e, yi)| yi * e - log1p_exp(*e)).sum();
    ll - 0.5 * ridge * b.norm_squared()
}

/// `Xᵀ diag(w) X + ridge·I`.
fn fisher(x: &DMatrix<f64>, w: &DVector<f64>, ridge: f64) -> DMatrix<f64> {
    let mut xw = x.clone();
    for (mut row, wi) in xw.row_iter_mut().zip(w.iter()) {
        row *= *wi;
    }
    let k = x.ncols();
    x.transpose() * xw + DMatrix::identity(k, k) * ridge
}

/// Newton–Raphson with step halving. `None` when the fit fails to converge
/// or runs off towards infinity.
fn logistic_fit(x: &DMatrix<f64>, y: &DVector<f64>, ridge: f64) -> Option<Fit> {
    let k = x.ncols();
    let mut b = DVector::zeros(k);
    let mut f = penalized_loglik(x, y, &b, ridge);
    let iters = if ridge > 0.0 { 10 * MAX_ITER } else { MAX_ITER };
    for _ in 0..iters {
        let eta = x * &b;
        let p = eta.map(sigmoid);
        let w = p.map(|v| v * (1.0 - v));
        let grad = x.transpose() * (y - &p) - &b * ridge;
        let h = fisher(x, &w, ridge);
        let step = h.clone().cholesky()?.solve(&grad);
        let mut t = 1.0;
        let mut next = &b + &step * t;
        let mut fn_ = penalized_loglik(x, y, &next, ridge);
        while !(fn_ >= f - 1e-12) && t > 1e-10 {
            t *= 0.5;
            next = &b + &step * t;
            fn_ = penalized_loglik(x, y, &next, ridge);
        }
        let delta = (&next - &b).amax();
        b = next;
        f = fn_;
        if ridge == 0.0 && b.amax() > DIVERGENT_COEF {
            return None;
        }
        if delta < 1e-10 {
            let p = (x * &b).map(sigmoid);
            let w = p.map(|v| v * (1.0 - v));
            let cov = fisher(x, &w, ridge).cholesky()?.inverse();
            return Some(Fit { beta: b, cov });
        }
    }
    None
}

/// Fast approximate LLMM fit: a logistic regression per donor, the mean of
/// the donor estimates as β̂, and their empirical covariance minus the mean
/// sampling covariance as the random-effect covariance, projected onto the
/// positive semidefinite cone when needed.
///
/// Donors lacking either response class or with fewer than J+2 cells are
/// dropped with a warning. Donors whose MLE does not exist are refitted with
/// [`SEPARATION_RIDGE`] on the standardized scale and flagged.
pub fn llmm_mom_fit(data: &LlmmData) -> Result<MomEstimate> {
    let std = data.standardization()?;
    let design = data.design(&std);
    let k = data.n_markers() + 1;
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); data.n_donors()];
    for (i, &d) in data.donor_index().iter().enumerate() {
        rows[d].push(i);
    }
    let mut warnings = Vec::new();
    let mut dropped = Vec::new();
    let mut kept = Vec::new();
    for (d, r) in rows.iter().enumerate() {
        let ones = r.iter().filter(|&&i| data.response()[i] == 1).count();
        let name = &data.donors()[d];
        if ones == 0 || ones == r.len() {
            warnings.push(format!("donor '{name}' dropped: only one condition present"));
            dropped.push(name.clone());
        } else if r.len() < k + 1 {
            warnings.push(format!("donor '{name}' dropped: {} cells, need at least {}", r.len(), k + 1));
            dropped.push(name.clone());
        } else {
            kept.push(d);
        }
    }
    if kept.is_empty() {
        return Err(Error::Design("no donor has enough cells in both conditions".into()));
    }
    let fits: Vec<(Fit, bool)> = kept
        .par_iter()
        .map(|&d| {
            let r = &rows[d];
            let x = DMatrix::from_fn(r.len(), k, |a, b| design[r[a] * k + b]);
            let y = DVector::from_iterator(r.len(), r.iter().map(|&i| data.response()[i] as f64));
            match logistic_fit(&x, &y, 0.0) {
                Some(f) => Ok((f, false)),
                None => logistic_fit(&x, &y, SEPARATION_RIDGE)
                    .map(|f| (f, true))
                    .ok_or_else(|| Error::Design(format!("logistic fit failed for donor '{}'", data.donors()[d]))),
            }
        })
        .collect::<Result<_>>()?;
    for (&d, (_, ridge)) in kept.iter().zip(&fits) {
        if *ridge {
            warnings.push(format!(
                "donor '{}': separation, refitted with ridge {SEPARATION_RIDGE}",
                data.donors()[d]
            ));
        }
    }

    let n = fits.len() as f64;
    let mean: DVector<f64> = fits.iter().fold(DVector::zeros(k), |acc, (f, _)| acc + &f.beta) / n;
    let mean_v: DMatrix<f64> = fits.iter().fold(DMatrix::zeros(k, k), |acc, (f, _)| acc + &f.cov) / n;
    let empirical = if fits.len() > 1 {
        fits.iter().fold(DMatrix::zeros(k, k), |acc, (f, _)| {
            let e = &f.beta - &mean;
            acc + &e * e.transpose()
        }) / (n - 1.0)
    } else {
        DMatrix::zeros(k, k)
    };
    let raw = &empirical - &mean_v;
    let raw = (&raw + raw.transpose()) * 0.5;
    let eig = SymmetricEigen::new(raw.clone());
    let psd_projected = eig.eigenvalues.iter().any(|&l| l < 0.0);
    let cov_s = if psd_projected {
        let clipped = eig.eigenvalues.map(|l| l.max(0.0));
        &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose()
    } else {
        raw
    };
    // Sampling variance of the mean of donor estimates.
    let var_mean = if fits.len() > 1 { empirical / n } else { mean_v.clone() };

    let to_vec = |m: &DMatrix<f64>| (0..k * k).map(|t| m[(t / k, t % k)]).collect::<Vec<f64>>();
    let beta_hat = std.destandardize(mean.as_slice());
    let cov_hat = std.destandardize_cov(&to_vec(&cov_s));
    let vm = std.destandardize_cov(&to_vec(&var_mean));
    let se = (0..k).map(|t| vm[t * k + t].max(0.0).sqrt()).collect();
    let donor_fits = kept
        .iter()
        .zip(&fits)
        .map(|(&d, (f, ridge))| DonorFit {
            donor: data.donors()[d].clone(),
            beta: std.destandardize(f.beta.as_slice()),
            cov: std.destandardize_cov(&to_vec(&f.cov)),
            ridge: *ridge,
        })
        .collect();
    let terms = std::iter::once("intercept".to_string()).chain(data.markers().iter().cloned()).collect();
    Ok(MomEstimate {
        terms,
        beta_hat,
        cov_hat,
        se,
        donor_fits,
        dropped_donors: dropped,
        psd_projected,
        warnings,
    })
}
