use serde::{Deserialize, Serialize};

use crate::data::TransformedTable;
use crate::error::{Error, Result};

/// Predictors, binary response and donor grouping for the logistic model.
///
/// `x` holds transformed expression (N×J, row-major); the response is the
/// condition code (0 = reference level).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmmData {
    markers: Vec<String>,
    x: Vec<f64>,
    y: Vec<u8>,
    donor: Vec<usize>,
    donors: Vec<String>,
    levels: [String; 2],
}

/// Pooled per-marker centring and scaling of the predictors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardization {
    /// Maps a standardized coefficient vector `(intercept, slopes)` to the
    /// transformed-expression scale.
    pub fn destandardize(&self, b: &[f64]) -> Vec<f64> {
        let mut out = b.to_vec();
        for (m, (c, s)) in self.center.iter().zip(&self.scale).enumerate() {
            out[m + 1] = b[m + 1] / s;
            out[0] -= b[m + 1] * c / s;
        }
        out
    }

    /// The matrix `A` (K×K, row-major) with `β = A β_std`.
    pub fn matrix(&self) -> Vec<f64> {
        let k = self.center.len() + 1;
        let mut a = vec![0.0; k * k];
        a[0] = 1.0;
        for m in 0..k - 1 {
            a[m + 1] = -self.center[m] / self.scale[m];
            a[(m + 1) * k + m + 1] = 1.0 / self.scale[m];
        }
        a
    }

    /// `A C Aᵀ` for a K×K covariance `C` on the standardized scale.
    pub fn destandardize_cov(&self, c: &[f64]) -> Vec<f64> {
        let k = self.center.len() + 1;
        let a = self.matrix();
        let mut ac = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                ac[i * k + j] = (0..k).map(|t| a[i * k + t] * c[t * k + j]).sum();
            }
        }
        let mut out = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                out[i * k + j] = (0..k).map(|t| ac[i * k + t] * a[j * k + t]).sum();
            }
        }
        out
    }
}

impl LlmmData {
    /// Builds the design from raw parts. Donor labels are indexed in order of
    /// first appearance.
    pub fn new(
        markers: Vec<String>,
        x: Vec<f64>,
        response: Vec<u8>,
        donor_labels: &[String],
        levels: [String; 2],
    ) -> Result<Self> {
        let (n, j) = (response.len(), markers.len());
        if j == 0 {
            return Err(Error::Design("at least one predictor marker is required".into()));
        }
        if x.len() != n * j {
            return Err(Error::Dimension { expected: n * j, got: x.len() });
        }
        if donor_labels.len() != n {
            return Err(Error::Dimension { expected: n, got: donor_labels.len() });
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation {
                row: i / j + 1,
                message: "non-finite predictor".into(),
            });
        }
        if let Some(i) = response.iter().position(|&v| v > 1) {
            return Err(Error::Validation {
                row: i + 1,
                message: "response must be 0 or 1".into(),
            });
        }
        let mut donors: Vec<String> = Vec::new();
        let donor = donor_labels
            .iter()
            .map(|l| match donors.iter().position(|d| d == l) {
                Some(p) => p,
                None => {
                    donors.push(l.clone());
                    donors.len() - 1
                }
            })
            .collect();
        Ok(LlmmData { markers, x, y: response, donor, donors, levels })
    }

    /// Predictors from a transformed table, response from its conditions.
    pub fn from_transformed(t: &TransformedTable) -> Result<Self> {
        let src = t.source();
        let labels: Vec<String> = src.donor_index().iter().map(|&d| src.donors()[d].clone()).collect();
        Self::new(
            src.marker_names(),
            t.values().to_vec(),
            src.condition().to_vec(),
            &labels,
            src.levels().clone(),
        )
    }

    pub fn n_cells(&self) -> usize {
        self.y.len()
    }

    pub fn n_markers(&self) -> usize {
        self.markers.len()
    }

    pub fn n_donors(&self) -> usize {
        self.donors.len()
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

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn response(&self) -> &[u8] {
        &self.y
    }

    pub fn donor_index(&self) -> &[usize] {
        &self.donor
    }

    /// True iff every donor has cells with both response values.
    pub fn is_paired(&self) -> bool {
        let mut seen = vec![[false; 2]; self.donors.len()];
        for (d, y) in self.donor.iter().zip(&self.y) {
            seen[*d][*y as usize] = true;
        }
        seen.iter().all(|s| s[0] && s[1])
    }

    /// Drops the named predictor columns.
    pub fn exclude_markers(&self, exclude: &[String]) -> Result<Self> {
        for e in exclude {
            if !self.markers.contains(e) {
                return Err(Error::NotFound(format!("marker '{e}'")));
            }
        }
        let keep: Vec<usize> = (0..self.n_markers()).filter(|&m| !exclude.contains(&self.markers[m])).collect();
        if keep.is_empty() {
            return Err(Error::Design("cannot exclude every marker".into()));
        }
        let j = self.n_markers();
        let x = (0..self.n_cells())
            .flat_map(|i| keep.iter().map(move |&m| (i, m)))
            .map(|(i, m)| self.x[i * j + m])
            .collect();
        Ok(LlmmData {
            markers: keep.iter().map(|&m| self.markers[m].clone()).collect(),
            x,
            ..self.clone()
        })
    }

    /// Same design with the response labels swapped.
    pub fn flip_response(&self) -> Self {
        LlmmData {
            y: self.y.iter().map(|v| 1 - v).collect(),
            levels: [self.levels[1].clone(), self.levels[0].clone()],
            ..self.clone()
        }
    }

    /// Pooled mean and sample standard deviation per marker.
    pub fn standardization(&self) -> Result<Standardization> {
        let (n, j) = (self.n_cells(), self.n_markers());
        if n < 2 {
            return Err(Error::Design("at least two cells are required".into()));
        }
        let mut center = vec![0.0; j];
        let mut scale = vec![0.0; j];
        for m in 0..j {
            let mean = (0..n).map(|i| self.x[i * j + m]).sum::<f64>() / n as f64;
            let ss: f64 = (0..n).map(|i| (self.x[i * j + m] - mean).powi(2)).sum();
            let sd = (ss / (n - 1) as f64).sqrt();
            if !(sd > 0.0) {
                return Err(Error::Design(format!("marker '{}' is constant", self.markers[m])));
            }
            center[m] = mean;
            scale[m] = sd;
        }
        Ok(Standardization { center, scale })
    }

    /// Standardized design rows `(1, (x − center) / scale)`, N×(J+1).
    pub fn design(&self, s: &Standardization) -> Vec<f64> {
        let j = self.n_markers();
        let mut out = Vec::with_capacity(self.n_cells() * (j + 1));
        for row in self.x.chunks_exact(j) {
            out.push(1.0);
            out.extend(row.iter().zip(s.center.iter().zip(&s.scale)).map(|(v, (c, sd))| (v - c) / sd));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> LlmmData {
        let x = vec![0.0, 1.0, 2.0, 3.0, 4.0, 8.0, 1.0, 0.0];
        let donors: Vec<String> = ["a", "a", "b", "b"].iter().map(|s| s.to_string()).collect();
        LlmmData::new(vec!["p".into(), "q".into()], x, vec![0, 1, 0, 1], &donors, ["c".into(), "t".into()]).unwrap()
    }

    #[test]
    fn destandardize_matches_linear_predictor() {
        let d = small();
        let s = d.standardization().unwrap();
        let z = d.design(&s);
        let bs = [0.3, -1.2, 0.7];
        let b = s.destandardize(&bs);
        for i in 0..d.n_cells() {
            let eta_s: f64 = (0..3).map(|k| z[i * 3 + k] * bs[k]).sum();
            let eta = b[0] + b[1] * d.x()[i * 2] + b[2] * d.x()[i * 2 + 1];
            assert!((eta - eta_s).abs() < 1e-12);
        }
        let a = s.matrix();
        for r in 0..3 {
            let v: f64 = (0..3).map(|k| a[r * 3 + k] * bs[k]).sum();
            assert!((v - b[r]).abs() < 1e-12);
        }
    }

    #[test]
    fn exclusion_and_pairing() {
        let d = small();
        assert!(d.is_paired());
        let e = d.exclude_markers(&["p".into()]).unwrap();
        assert_eq!(e.markers(), &["q".to_string()]);
        assert_eq!(e.x(), &[1.0, 3.0, 8.0, 0.0]);
        assert!(d.exclude_markers(&["zz".into()]).is_err());
        assert!(d.exclude_markers(&["p".into(), "q".into()]).is_err());
        let f = d.flip_response();
        assert_eq!(f.response(), &[1, 0, 1, 0]);
    }
}
