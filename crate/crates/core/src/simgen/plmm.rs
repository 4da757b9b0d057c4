use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{CellTable, Marker};
use crate::error::{Error, Result};
use crate::plmm::{PlmmParams, MAX_LOG_MU};
use crate::prob::linalg::lower_mul;
use crate::prob::{CorrelationCholesky, ScaleVector};

/// Generative settings for a PLMM simulation. Standard deviations may be 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlmmSimSettings {
    pub markers: Vec<String>,
    /// `beta[c][j]` on the log-count scale.
    pub beta: [Vec<f64>; 2],
    pub sigma_cond: [Vec<f64>; 2],
    /// Row-major J×J correlation matrices.
    pub omega_cond: [Vec<f64>; 2],
    pub sigma_donor: Vec<f64>,
    pub omega_donor: Vec<f64>,
    pub donors: usize,
    pub cells_per_donor_condition: usize,
}

impl PlmmSimSettings {
    /// Identity correlations, unit scales and the given β.
    pub fn simple(beta: [Vec<f64>; 2], donors: usize, cells_per_donor_condition: usize) -> Self {
        let j = beta[0].len();
        let id = identity(j);
        PlmmSimSettings {
            markers: (1..=j).map(|m| format!("m{m}")).collect(),
            beta,
            sigma_cond: [vec![1.0; j], vec![1.0; j]],
            omega_cond: [id.clone(), id.clone()],
            sigma_donor: vec![1.0; j],
            omega_donor: id,
            donors,
            cells_per_donor_condition,
        }
    }

    pub fn n_markers(&self) -> usize {
        self.markers.len()
    }

    fn cholesky(&self) -> Result<[CorrelationCholesky; 3]> {
        let j = self.n_markers();
        let f = |o: &Vec<f64>| CorrelationCholesky::from_correlation(j, o);
        Ok([f(&self.omega_cond[0])?, f(&self.omega_cond[1])?, f(&self.omega_donor)?])
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.n_markers();
        if j == 0 {
            return Err(Error::Parameter("at least one marker is required".into()));
        }
        if self.donors == 0 || self.cells_per_donor_condition == 0 {
            return Err(Error::Parameter("donors and cells per donor must be positive".into()));
        }
        for v in [&self.beta[0], &self.beta[1], &self.sigma_cond[0], &self.sigma_cond[1], &self.sigma_donor] {
            if v.len() != j {
                return Err(Error::Dimension { expected: j, got: v.len() });
            }
        }
        for o in [&self.omega_cond[0], &self.omega_cond[1], &self.omega_donor] {
            if o.len() != j * j {
                return Err(Error::Dimension { expected: j * j, got: o.len() });
            }
        }
        let all_sd = self.sigma_cond.iter().flatten().chain(&self.sigma_donor);
        if let Some(s) = all_sd.into_iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
            return Err(Error::Parameter(format!("standard deviations must be >= 0, got {s}")));
        }
        if self.beta.iter().flatten().any(|b| !b.is_finite()) {
            return Err(Error::Parameter("non-finite beta".into()));
        }
        self.cholesky()?;
        Ok(())
    }

    /// The same settings as model parameters, when every scale is positive.
    pub fn to_params(&self) -> Result<PlmmParams> {
        self.validate()?;
        let [l0, l1, ld] = self.cholesky()?;
        Ok(PlmmParams {
            beta: self.beta.clone(),
            sigma_cond: [
                ScaleVector::new(self.sigma_cond[0].clone())?,
                ScaleVector::new(self.sigma_cond[1].clone())?,
            ],
            l_cond: [l0, l1],
            sigma_donor: ScaleVector::new(self.sigma_donor.clone())?,
            l_donor: ld,
        })
    }
}

fn identity(j: usize) -> Vec<f64> {
    let mut v = vec![0.0; j * j];
    (0..j).for_each(|i| v[i * j + i] = 1.0);
    v
}

/// A simulated count table with its latent effects.
#[derive(Debug, Clone)]
pub struct PlmmSimulation {
    pub table: CellTable,
    /// Cell effects `b` (N×J), in table row order.
    pub cell_effects: Vec<f64>,
    /// Donor effects `u` (D×J).
    pub donor_effects: Vec<f64>,
}

fn correlated<R: rand::Rng>(sd: &[f64], l: &CorrelationCholesky, rng: &mut R) -> Vec<f64> {
    let j = sd.len();
    let e: Vec<f64> = (0..j).map(|_| rng.sample(StandardNormal)).collect();
    let mut out = vec![0.0; j];
    lower_mul(l.as_slice(), j, &e, &mut out);
    out.iter_mut().zip(sd).for_each(|(o, s)| *o *= s);
    out
}

/// Forward simulation: donor effects, then per donor and condition the cell
/// effects and Poisson counts. Rows are ordered donor, condition, cell.
pub fn simulate_plmm(s: &PlmmSimSettings, seed: u64) -> Result<PlmmSimulation> {
    s.validate()?;
    let j = s.n_markers();
    let [l0, l1, ld] = s.cholesky()?;
    let lc = [l0, l1];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = s.donors.to_string().len().max(2);
    let donor_names: Vec<String> = (1..=s.donors).map(|d| format!("donor{d:0width$}")).collect();
    let donor_effects: Vec<f64> = (0..s.donors)
        .flat_map(|_| correlated(&s.sigma_donor, &ld, &mut rng))
        .collect();
    let n = 2 * s.donors * s.cells_per_donor_condition;
    let mut counts = Vec::with_capacity(n * j);
    let mut cell_effects = Vec::with_capacity(n * j);
    let (mut donor, mut cond) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for d in 0..s.donors {
        for c in 0..2 {
            for _ in 0..s.cells_per_donor_condition {
                let b = correlated(&s.sigma_cond[c], &lc[c], &mut rng);
                for m in 0..j {
                    let log_mu = s.beta[c][m] + b[m] + donor_effects[d * j + m];
                    if !(log_mu <= MAX_LOG_MU) {
                        return Err(Error::Simulation(format!(
                            "log mean {log_mu} exceeds {MAX_LOG_MU} (donor {}, marker {})",
                            donor_names[d], s.markers[m]
                        )));
                    }
                    let mu = log_mu.exp();
                    let y = if mu > 0.0 {
                        Poisson::new(mu).map_err(|e| Error::Simulation(e.to_string()))?.sample(&mut rng)
                    } else {
                        0.0
                    };
                    counts.push(y as u64);
                }
                cell_effects.extend(b);
                donor.push(donor_names[d].clone());
                cond.push(format!("cond{}", c + 1));
            }
        }
    }
    let markers = s.markers.iter().map(Marker::functional).collect();
    let table = CellTable::from_parts(markers, donor, cond, vec!["sim".into(); n], counts, Some("cond1"))?;
    Ok(PlmmSimulation {
        table,
        cell_effects,
        donor_effects,
    })
}
