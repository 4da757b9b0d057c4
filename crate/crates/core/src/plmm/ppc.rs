//! Marginal posterior predictive checks on subset fractions.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::CellTable;
use crate::error::{Error, Result};
use crate::prob::{mvn_chol_sample, CorrelationCholesky, ScaleVector};
use crate::sampler::PosteriorDraws;
use crate::summary::quantile_sorted;

/// Largest log-mean allowed when simulating counts.
pub const MAX_LOG_MU: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predicate {
    GtMedian,
    LeMedian,
    EqZero,
    GtZero,
}

impl Predicate {
    fn holds(self, y: f64, median: f64) -> bool {
        match self {
            Predicate::GtMedian => y > median,
            Predicate::LeMedian => y <= median,
            Predicate::EqZero => y == 0.0,
            Predicate::GtZero => y > 0.0,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Predicate::GtMedian => "gt_median",
            Predicate::LeMedian => "le_median",
            Predicate::EqZero => "eq_zero",
            Predicate::GtZero => "gt_zero",
        }
    }
}

impl FromStr for Predicate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gt_median" => Ok(Predicate::GtMedian),
            "le_median" => Ok(Predicate::LeMedian),
            "eq_zero" => Ok(Predicate::EqZero),
            "gt_zero" => Ok(Predicate::GtZero),
            other => Err(Error::Parameter(format!(
                "unknown predicate '{other}' (expected gt_median, le_median, eq_zero or gt_zero)"
            ))),
        }
    }
}

/// A conjunction of per-marker predicates defining a cell subset. Medians are
/// taken over both conditions pooled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetSpec {
    pub name: String,
    pub terms: Vec<(String, Predicate)>,
}

impl SubsetSpec {
    pub fn new(name: impl Into<String>, terms: Vec<(String, Predicate)>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::Parameter("subset needs at least one predicate".into()));
        }
        Ok(SubsetSpec {
            name: name.into(),
            terms,
        })
    }

    /// Parses `marker:predicate[&marker:predicate...]`, e.g.
    /// `pSTAT1:gt_median&pSTAT3:eq_zero`.
    pub fn parse(name: impl Into<String>, text: &str) -> Result<Self> {
        let terms = text
            .split('&')
            .map(|t| {
                let (m, p) = t.trim().rsplit_once(':').ok_or_else(|| {
                    Error::Parameter(format!("subset term '{t}' is not marker:predicate"))
                })?;
                Ok((m.trim().to_string(), p.trim().parse()?))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(name, terms)
    }

    fn resolve(&self, table: &CellTable) -> Result<Vec<(usize, Predicate)>> {
        self.terms
            .iter()
            .map(|(m, p)| {
                table
                    .marker_index(m)
                    .map(|j| (j, *p))
                    .ok_or_else(|| Error::NotFound(format!("marker '{m}' in subset '{}'", self.name)))
            })
            .collect()
    }
}

impl fmt::Display for SubsetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.terms.iter().map(|(m, p)| format!("{m}:{}", p.as_str())).collect();
        f.write_str(&parts.join("&"))
    }
}

/// Observed and replicated values of one subset statistic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpcResult {
    pub stat_name: String,
    pub observed: f64,
    pub replicated: Vec<f64>,
}

impl PpcResult {
    /// Whether the observed value lies in the central `level` interval of the
    /// replicated values.
    pub fn observed_within(&self, level: f64) -> bool {
        let mut r = self.replicated.clone();
        r.sort_by(f64::total_cmp);
        let a = (1.0 - level) / 2.0;
        quantile_sorted(&r, a) <= self.observed && self.observed <= quantile_sorted(&r, 1.0 - a)
    }

    /// Fraction of replicated values at or below the observed value.
    pub fn tail_probability(&self) -> f64 {
        let n = self.replicated.iter().filter(|&&r| r <= self.observed).count();
        n as f64 / self.replicated.len() as f64
    }
}

/// Writes `stat_name,observed,rep_index,replicated`.
pub fn write_ppc_csv<W: Write>(results: &[PpcResult], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["stat_name", "observed", "rep_index", "replicated"])?;
    for r in results {
        let obs = r.observed.to_string();
        for (k, v) in r.replicated.iter().enumerate() {
            w.write_record([r.stat_name.as_str(), &obs, &(k + 1).to_string(), &v.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io("<ppc>", e))?;
    Ok(())
}

pub fn save_ppc_csv(results: &[PpcResult], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_ppc_csv(results, std::io::BufWriter::new(f))
}

/// Parameters of one posterior draw needed to simulate a replicate.
struct DrawParams {
    beta: [Vec<f64>; 2],
    sigma: [ScaleVector; 2],
    chol: [CorrelationCholesky; 2],
    /// D×J donor effects.
    u: Vec<f64>,
}

struct Columns {
    beta: Vec<usize>,
    sigma: Vec<usize>,
    omega: Vec<usize>,
    u: Vec<usize>,
}

impl Columns {
    fn find(draws: &PosteriorDraws, j: usize, d: usize) -> Result<Self> {
        let idx = |n: String| draws.param_index(&n);
        let mut c = Columns {
            beta: Vec::new(),
            sigma: Vec::new(),
            omega: Vec::new(),
            u: Vec::new(),
        };
        for k in 1..=2 {
            for m in 1..=j {
                c.beta.push(idx(format!("beta[{k},{m}]"))?);
                c.sigma.push(idx(format!("sigma_cond[{k},{m}]"))?);
            }
            for a in 1..=j {
                for b in a + 1..=j {
                    c.omega.push(idx(format!("omega_cond[{k},{a},{b}]"))?);
                }
            }
        }
        for dd in 1..=d {
            for m in 1..=j {
                c.u.push(idx(format!("u_donor[{dd},{m}]"))?);
            }
        }
        Ok(c)
    }

    fn extract(&self, row: &[f64], j: usize) -> Result<DrawParams> {
        let p = j * (j - 1) / 2;
        let take = |ix: &[usize]| ix.iter().map(|&i| row[i]).collect::<Vec<_>>();
        let beta = take(&self.beta);
        let sigma = take(&self.sigma);
        let omega = take(&self.omega);
        let chol = |k: usize| -> Result<CorrelationCholesky> {
            let mut full = vec![0.0; j * j];
            let mut t = k * p;
            for a in 0..j {
                full[a * j + a] = 1.0;
                for b in a + 1..j {
                    full[a * j + b] = omega[t];
                    full[b * j + a] = omega[t];
                    t += 1;
                }
            }
            CorrelationCholesky::from_correlation(j, &full)
        };
        Ok(DrawParams {
            beta: [beta[..j].to_vec(), beta[j..].to_vec()],
            sigma: [ScaleVector::new(sigma[..j].to_vec())?, ScaleVector::new(sigma[j..].to_vec())?],
            chol: [chol(0)?, chol(1)?],
            u: take(&self.u),
        })
    }
}

/// Simulates counts for every cell of `table` under one draw: fresh cell
/// effects, the draw's donor effects.
fn replicate<R: Rng>(table: &CellTable, p: &DrawParams, rng: &mut R) -> Result<Vec<f64>> {
    let j = table.n_markers();
    let mut out = Vec::with_capacity(table.n_cells() * j);
    for i in 0..table.n_cells() {
        let c = table.condition()[i] as usize;
        let d = table.donor_index()[i];
        let b = mvn_chol_sample(&p.sigma[c], &p.chol[c], rng);
        for m in 0..j {
            let log_mu = p.beta[c][m] + b[m] + p.u[d * j + m];
            if !(log_mu <= MAX_LOG_MU) {
                return Err(Error::Simulation(format!(
                    "log mean {log_mu} exceeds {MAX_LOG_MU} for cell {i}, marker {m}"
                )));
            }
            let mu = log_mu.exp();
            let y = if mu > 0.0 {
                Poisson::new(mu)
                    .map_err(|e| Error::Simulation(e.to_string()))?
                    .sample(rng)
            } else {
                0.0
            };
            out.push(y);
        }
    }
    Ok(out)
}

/// Fraction of cells satisfying every term; medians recomputed on `counts`.
fn subset_fraction(counts: &[f64], j: usize, terms: &[(usize, Predicate)]) -> f64 {
    let n = counts.len() / j;
    let medians: Vec<f64> = terms
        .iter()
        .map(|&(m, _)| {
            let mut col: Vec<f64> = (0..n).map(|i| counts[i * j + m]).collect();
            col.sort_by(f64::total_cmp);
            quantile_sorted(&col, 0.5)
        })
        .collect();
    let hits = (0..n)
        .filter(|&i| {
            terms
                .iter()
                .zip(&medians)
                .all(|(&(m, p), &med)| p.holds(counts[i * j + m], med))
        })
        .count();
    hits as f64 / n as f64
}

/// Posterior predictive distribution of each subset fraction.
///
/// Replicate `r` uses a draw chosen uniformly at random and its own RNG
/// stream, so results do not depend on the thread count.
pub fn posterior_predictive(
    draws: &PosteriorDraws,
    table: &CellTable,
    specs: &[SubsetSpec],
    n_rep: usize,
    seed: u64,
) -> Result<Vec<PpcResult>> {
    if draws.n_draws() == 0 {
        return Err(Error::Parameter("no draws".into()));
    }
    let j = table.n_markers();
    let resolved: Vec<Vec<(usize, Predicate)>> =
        specs.iter().map(|s| s.resolve(table)).collect::<Result<_>>()?;
    let cols = Columns::find(draws, j, table.n_donors())?;
    let observed: Vec<f64> = table.counts().iter().map(|&k| k as f64).collect();
    let obs_stats: Vec<f64> = resolved.iter().map(|t| subset_fraction(&observed, j, t)).collect();
    let reps: Vec<Vec<f64>> = (0..n_rep)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let k = rng.random_range(0..draws.n_draws());
            let params = cols.extract(draws.row(k), j)?;
            let y = replicate(table, &params, &mut rng)?;
            Ok(resolved.iter().map(|t| subset_fraction(&y, j, t)).collect())
        })
        .collect::<Result<_>>()?;
    Ok(specs
        .iter()
        .enumerate()
        .map(|(s, spec)| PpcResult {
            stat_name: spec.name.clone(),
            observed: obs_stats[s],
            replicated: reps.iter().map(|r| r[s]).collect(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Marker;

    fn table() -> CellTable {
        CellTable::from_parts(
            vec![Marker::functional("a"), Marker::functional("b")],
            vec!["d1".into(), "d1".into(), "d1".into(), "d1".into()],
            vec!["x".into(), "x".into(), "y".into(), "y".into()],
            vec!["NK".into(); 4],
            vec![0, 5, 2, 0, 4, 1, 6, 3],
            None,
        )
        .unwrap()
    }

    #[test]
    fn parse_and_display() {
        let s = SubsetSpec::parse("A", "a:gt_median & b:eq_zero").unwrap();
        assert_eq!(s.terms, vec![("a".into(), Predicate::GtMedian), ("b".into(), Predicate::EqZero)]);
        assert_eq!(s.to_string(), "a:gt_median&b:eq_zero");
        assert!(SubsetSpec::parse("A", "a:bigger").is_err());
        assert!(SubsetSpec::parse("A", "a").is_err());
    }

    #[test]
    fn observed_fraction_uses_pooled_median() {
        let t = table();
        let y: Vec<f64> = t.counts().iter().map(|&k| k as f64).collect();
        // column a = [0, 2, 4, 6], median 3
        assert_eq!(subset_fraction(&y, 2, &[(0, Predicate::GtMedian)]), 0.5);
        assert_eq!(subset_fraction(&y, 2, &[(1, Predicate::EqZero)]), 0.25);
        assert_eq!(subset_fraction(&y, 2, &[(0, Predicate::GtMedian), (1, Predicate::GtZero)]), 0.5);
        let bad = SubsetSpec::parse("Z", "zzz:eq_zero").unwrap();
        assert!(bad.resolve(&t).is_err());
    }

    fn draws_for(beta: f64) -> PosteriorDraws {
        let names: Vec<String> = [
            "beta[1,1]", "beta[1,2]", "beta[2,1]", "beta[2,2]", "sigma_cond[1,1]", "sigma_cond[1,2]",
            "sigma_cond[2,1]", "sigma_cond[2,2]", "omega_cond[1,1,2]", "omega_cond[2,1,2]",
            "u_donor[1,1]", "u_donor[1,2]",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let mut d = PosteriorDraws::new(names);
        d.push(0, 1, &[beta, beta, beta, beta, 0.1, 0.1, 0.1, 0.1, 0.0, 0.0, 0.0, 0.0]);
        d
    }

    #[test]
    fn huge_mean_leaves_no_zeros() {
        let spec = SubsetSpec::parse("zeros", "a:eq_zero").unwrap();
        let r = posterior_predictive(&draws_for(8.0), &table(), &[spec], 20, 1).unwrap();
        assert!(r[0].replicated.iter().all(|&v| v == 0.0));
        assert_eq!(r[0].observed, 0.25);
        let again = posterior_predictive(&draws_for(8.0), &table(), &[SubsetSpec::parse("zeros", "a:eq_zero").unwrap()], 20, 1).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn overflow_is_rejected() {
        let spec = SubsetSpec::parse("A", "a:gt_zero").unwrap();
        assert!(matches!(
            posterior_predictive(&draws_for(40.0), &table(), &[spec], 2, 1),
            Err(Error::Simulation(_))
        ));
    }
}
