//! Tidy CSV data behind the standard figures: posterior predictive densities,
//! coefficient intervals, correlation heatmaps and the p̂ histogram/matrix.

use std::path::Path;

use cytomix_core::plmm::{CorrIncreaseSummary, PpcResult};
use cytomix_core::summary::{quantile, SummaryRow};
use cytomix_core::PosteriorDraws;
use serde::Serialize;

use crate::error::CliError;

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct PpcPoint<'a> {
    stat_name: &'a str,
    kind: &'static str,
    value: f64,
}

/// `stat_name,kind,value`: one `observed` row per statistic, then its
/// `replicated` values.
pub fn ppc_density(path: &Path, results: &[PpcResult]) -> Result<(), CliError> {
    let mut rows = Vec::new();
    for r in results {
        rows.push(PpcPoint { stat_name: &r.stat_name, kind: "observed", value: r.observed });
        rows.extend(r.replicated.iter().map(|&v| PpcPoint {
            stat_name: &r.stat_name,
            kind: "replicated",
            value: v,
        }));
    }
    write_rows(path, &rows)
}

#[derive(Serialize)]
struct PpcSummaryRow<'a> {
    stat_name: &'a str,
    observed: f64,
    rep_q025: f64,
    rep_median: f64,
    rep_q975: f64,
    tail_probability: f64,
    within_95: bool,
}

pub fn ppc_summary(path: &Path, results: &[PpcResult]) -> Result<(), CliError> {
    let rows: Vec<_> = results
        .iter()
        .map(|r| PpcSummaryRow {
            stat_name: &r.stat_name,
            observed: r.observed,
            rep_q025: quantile(&r.replicated, 0.025),
            rep_median: quantile(&r.replicated, 0.5),
            rep_q975: quantile(&r.replicated, 0.975),
            tail_probability: r.tail_probability(),
            within_95: r.observed_within(0.95),
        })
        .collect();
    write_rows(path, &rows)
}

/// `marker,quantity,median,q025,q975`, restricted to coefficient rows.
pub fn coefficients(path: &Path, rows: &[SummaryRow]) -> Result<(), CliError> {
    let keep: Vec<&SummaryRow> = rows.iter().filter(|r| r.quantity.starts_with("beta")).collect();
    write_rows(path, &keep)
}

#[derive(Serialize)]
struct HeatCell<'a> {
    block: &'a str,
    marker_i: &'a str,
    marker_j: &'a str,
    median: f64,
}

/// Posterior median correlations as a full symmetric matrix per block.
/// `blocks` pairs a block label with the draw-name prefix, e.g.
/// `("condition_1", "omega_cond[1,")`; `key` maps a marker position to the
/// index text used in draw names.
pub fn correlation_heatmap(
    path: &Path,
    draws: &PosteriorDraws,
    markers: &[String],
    blocks: &[(&str, String)],
    key: impl Fn(usize) -> String,
) -> Result<(), CliError> {
    let mut rows = Vec::new();
    for (block, prefix) in blocks {
        for a in 0..markers.len() {
            for b in 0..markers.len() {
                let median = if a == b {
                    1.0
                } else {
                    let (i, j) = (a.min(b), a.max(b));
                    let col = draws.column_by_name(&format!("{prefix}{},{}]", key(i), key(j)))?;
                    quantile(&col, 0.5)
                };
                rows.push(HeatCell { block, marker_i: &markers[a], marker_j: &markers[b], median });
            }
        }
    }
    write_rows(path, &rows)
}

#[derive(Serialize)]
struct MatrixCell<'a> {
    marker_i: &'a str,
    marker_j: &'a str,
    p_hat: f64,
}

/// Histogram bins (`lower,upper,count`) and the full pairwise p̂ matrix with
/// an empty diagonal.
pub fn corr_increase(hist_path: &Path, matrix_path: &Path, s: &CorrIncreaseSummary) -> Result<(), CliError> {
    write_rows(hist_path, &s.histogram)?;
    let mut rows = Vec::new();
    for a in 0..s.markers.len() {
        for b in 0..s.markers.len() {
            rows.push(MatrixCell { marker_i: &s.markers[a], marker_j: &s.markers[b], p_hat: s.get(a, b) });
        }
    }
    write_rows(matrix_path, &rows)
}

/// Long-format draws of the population parameters, for trace plots.
pub fn trace(path: &Path, draws: &PosteriorDraws) -> Result<(), CliError> {
    let names: Vec<&str> = draws
        .names()
        .iter()
        .map(String::as_str)
        .filter(|n| !n.starts_with("u_donor"))
        .collect();
    draws.select(&names)?.save_csv(path)?;
    Ok(())
}
