use crate::error::Result;
use crate::sampler::PosteriorDraws;
use crate::summary::{Interval, SummaryRow};

/// Median and 95% interval of each fixed effect, log-odds per unit of
/// transformed expression. `terms` are `intercept` and the markers.
pub fn llmm_fixed_effect_summary(draws: &PosteriorDraws, terms: &[String]) -> Result<Vec<SummaryRow>> {
    terms
        .iter()
        .map(|t| {
            let x = draws.column_by_name(&format!("beta[{t}]"))?;
            Ok(SummaryRow::new(t, "beta", Interval::from_draws(&x, 0.95)))
        })
        .collect()
}

/// Median and 95% interval of each donor standard deviation.
pub fn llmm_scale_summary(draws: &PosteriorDraws, terms: &[String]) -> Result<Vec<SummaryRow>> {
    terms
        .iter()
        .map(|t| {
            let x = draws.column_by_name(&format!("sigma_donor[{t}]"))?;
            Ok(SummaryRow::new(t, "sigma_donor", Interval::from_draws(&x, 0.95)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_draws_give_degenerate_interval() {
        let mut d = PosteriorDraws::new(vec!["beta[intercept]".into(), "beta[m]".into()]);
        for i in 0..10 {
            d.push(0, i, &[0.5, i as f64]);
        }
        let rows = llmm_fixed_effect_summary(&d, &["intercept".into(), "m".into()]).unwrap();
        assert_eq!((rows[0].q025, rows[0].median, rows[0].q975), (0.5, 0.5, 0.5));
        assert_eq!(rows[1].median, 4.5);
        assert!(llmm_scale_summary(&d, &["m".into()]).is_err());
    }
}
