use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::PosteriorDraws;
use crate::summary::{Interval, SummaryRow};

/// Number of equal-width bins on [0, 1] in the p̂ histogram.
pub const CORR_HISTOGRAM_BINS: usize = 20;

/// Median and 95% interval of `β₁`, `β₂` and `β₂ − β₁` per marker.
pub fn fixed_effect_summary(draws: &PosteriorDraws, markers: &[String]) -> Result<Vec<SummaryRow>> {
    let mut rows = Vec::with_capacity(3 * markers.len());
    for (m, name) in markers.iter().enumerate() {
        let b1 = draws.column_by_name(&format!("beta[1,{}]", m + 1))?;
        let b2 = draws.column_by_name(&format!("beta[2,{}]", m + 1))?;
        let diff: Vec<f64> = b1.iter().zip(&b2).map(|(a, b)| b - a).collect();
        rows.push(SummaryRow::new(name, "beta_1", Interval::from_draws(&b1, 0.95)));
        rows.push(SummaryRow::new(name, "beta_2", Interval::from_draws(&b2, 0.95)));
        rows.push(SummaryRow::new(name, "beta_2_minus_beta_1", Interval::from_draws(&diff, 0.95)));
    }
    Ok(rows)
}

/// Median and 95% interval of the condition and donor standard deviations.
pub fn scale_summary(draws: &PosteriorDraws, markers: &[String]) -> Result<Vec<SummaryRow>> {
    let mut rows = Vec::with_capacity(3 * markers.len());
    for (m, name) in markers.iter().enumerate() {
        for (quantity, param) in [
            ("sigma_cond_1", format!("sigma_cond[1,{}]", m + 1)),
            ("sigma_cond_2", format!("sigma_cond[2,{}]", m + 1)),
            ("sigma_donor", format!("sigma_donor[{}]", m + 1)),
        ] {
            let x = draws.column_by_name(&param)?;
            rows.push(SummaryRow::new(name, quantity, Interval::from_draws(&x, 0.95)));
        }
    }
    Ok(rows)
}

/// Writes `marker,quantity,median,q025,q975`.
pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<summary>", e))?;
    Ok(())
}

pub fn save_summary_csv(rows: &[SummaryRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_summary_csv(rows, std::io::BufWriter::new(f))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

/// Posterior probabilities that the condition-2 correlation exceeds the
/// condition-1 correlation, per marker pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrIncreaseSummary {
    pub markers: Vec<String>,
    /// Row-major J×J, symmetric; the diagonal is NaN.
    pub p_hat: Vec<f64>,
    pub histogram: Vec<HistogramBin>,
}

impl CorrIncreaseSummary {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.p_hat[i * self.markers.len() + j]
    }

    /// Upper-triangle values, row by row.
    pub fn upper_triangle(&self) -> Vec<f64> {
        let j = self.markers.len();
        (0..j)
            .flat_map(|a| (a + 1..j).map(move |b| (a, b)))
            .map(|(a, b)| self.get(a, b))
            .collect()
    }

    /// Writes `marker_i,marker_j,p_hat` for `i < j`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["marker_i", "marker_j", "p_hat"])?;
        let j = self.markers.len();
        for a in 0..j {
            for b in a + 1..j {
                w.write_record([&self.markers[a], &self.markers[b], &self.get(a, b).to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io("<corr_increase>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// `p̂_ij = (1/K) Σ_k 1[Ω²_ijk > Ω¹_ijk]`; exact ties count as 0.
pub fn corr_increase_probability(
    draws: &PosteriorDraws,
    markers: &[String],
) -> Result<CorrIncreaseSummary> {
    let j = markers.len();
    let k = draws.n_draws();
    if k == 0 {
        return Err(Error::Parameter("no draws".into()));
    }
    let mut p_hat = vec![f64::NAN; j * j];
    for a in 0..j {
        for b in a + 1..j {
            let o1 = draws.column_by_name(&format!("omega_cond[1,{},{}]", a + 1, b + 1))?;
            let o2 = draws.column_by_name(&format!("omega_cond[2,{},{}]", a + 1, b + 1))?;
            let hits = o1.iter().zip(&o2).filter(|(x, y)| y > x).count();
            let p = hits as f64 / k as f64;
            p_hat[a * j + b] = p;
            p_hat[b * j + a] = p;
        }
    }
    let width = 1.0 / CORR_HISTOGRAM_BINS as f64;
    let mut histogram: Vec<HistogramBin> = (0..CORR_HISTOGRAM_BINS)
        .map(|i| HistogramBin {
            lower: i as f64 * width,
            upper: (i + 1) as f64 * width,
            count: 0,
        })
        .collect();
    let summary = CorrIncreaseSummary {
        markers: markers.to_vec(),
        p_hat,
        histogram: Vec::new(),
    };
    for p in summary.upper_triangle() {
        let bin = ((p / width) as usize).min(CORR_HISTOGRAM_BINS - 1);
        histogram[bin].count += 1;
    }
    Ok(CorrIncreaseSummary { histogram, ..summary })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn omega_draws(pairs: &[(f64, f64)]) -> PosteriorDraws {
        let mut d = PosteriorDraws::new(vec!["omega_cond[1,1,2]".into(), "omega_cond[2,1,2]".into()]);
        for (k, (a, b)) in pairs.iter().enumerate() {
            d.push(0, k + 1, &[*a, *b]);
        }
        d
    }

    #[test]
    fn indicator_mean() {
        let m = vec!["a".to_string(), "b".to_string()];
        let d = omega_draws(&[(0.1, 0.2), (0.0, 0.5), (-0.3, 0.3), (0.4, 0.1)]);
        let s = corr_increase_probability(&d, &m).unwrap();
        assert_eq!(s.get(0, 1), 0.75);
        assert_eq!(s.get(1, 0), 0.75);
        assert!(s.get(0, 0).is_nan());
        assert_eq!(s.histogram[15].count, 1);
        assert_eq!(s.histogram.iter().map(|b| b.count).sum::<usize>(), 1);
    }

    #[test]
    fn ties_count_as_zero_and_swap_is_complementary() {
        let m = vec!["a".to_string(), "b".to_string()];
        let pairs = [(0.2, 0.2), (0.1, 0.3), (0.5, 0.4), (0.0, 0.9)];
        let s = corr_increase_probability(&omega_draws(&pairs), &m).unwrap();
        assert_eq!(s.get(0, 1), 0.5);
        let swapped: Vec<(f64, f64)> = pairs.iter().map(|(a, b)| (*b, *a)).collect();
        let t = corr_increase_probability(&omega_draws(&swapped), &m).unwrap();
        // 1 - 0.5 minus the single tie
        assert_eq!(t.get(0, 1), 0.25);
        let mut rev = pairs.to_vec();
        rev.reverse();
        assert_eq!(corr_increase_probability(&omega_draws(&rev), &m).unwrap().get(0, 1), 0.5);
    }

    #[test]
    fn constant_draws_give_degenerate_intervals() {
        let mut d = PosteriorDraws::new(vec!["beta[1,1]".into(), "beta[2,1]".into()]);
        for k in 0..5 {
            d.push(0, k, &[1.5, 2.0]);
        }
        let rows = fixed_effect_summary(&d, &["m".to_string()]).unwrap();
        assert_eq!(rows[2].median, 0.5);
        assert_eq!((rows[0].q025, rows[0].q975), (1.5, 1.5));
        let mut buf = Vec::new();
        write_summary_csv(&rows, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("marker,quantity,median,q025,q975\nm,beta_1,1.5,1.5,1.5\n"));
    }
}
