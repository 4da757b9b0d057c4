//! Posterior summaries: quantiles and interval tables.

use serde::{Deserialize, Serialize};

/// Type-7 (linear interpolation) quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Type-7 quantile of unsorted data.
pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, p)
}

/// Median with an equal-tailed interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    /// Median and central `level` interval of `values`.
    pub fn from_draws(values: &[f64], level: f64) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let a = (1.0 - level) / 2.0;
        Interval {
            median: quantile_sorted(&v, 0.5),
            lower: quantile_sorted(&v, a),
            upper: quantile_sorted(&v, 1.0 - a),
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }

    pub fn excludes_zero(&self) -> bool {
        !self.contains(0.0)
    }
}

/// One row of a per-marker summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub marker: String,
    pub quantity: String,
    pub median: f64,
    pub q025: f64,
    pub q975: f64,
}

impl SummaryRow {
    pub fn new(marker: impl Into<String>, quantity: impl Into<String>, iv: Interval) -> Self {
        SummaryRow {
            marker: marker.into(),
            quantity: quantity.into(),
            median: iv.median,
            q025: iv.lower,
            q975: iv.upper,
        }
    }

    pub fn interval(&self) -> Interval {
        Interval {
            median: self.median,
            lower: self.q025,
            upper: self.q975,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn type7_matches_reference_values() {
        // numpy.quantile([1, 2, 3, 4, 10], [0.1, 0.5, 0.975]) -> 1.4, 3.0, 9.4
        let x = [4.0, 1.0, 10.0, 3.0, 2.0];
        assert!((quantile(&x, 0.1) - 1.4).abs() < 1e-12);
        assert_eq!(quantile(&x, 0.5), 3.0);
        assert!((quantile(&x, 0.975) - 9.4).abs() < 1e-12);
        assert!(quantile(&[], 0.5).is_nan());
    }

    #[test]
    fn interval_on_uniform_grid() {
        let x: Vec<f64> = (0..=1000).map(|i| i as f64 / 1000.0).collect();
        let iv = Interval::from_draws(&x, 0.95);
        assert!((iv.lower - 0.025).abs() < 1e-12 && (iv.upper - 0.975).abs() < 1e-12);
        assert!(iv.excludes_zero());
    }
}
