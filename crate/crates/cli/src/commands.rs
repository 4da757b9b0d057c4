use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cytomix_core::data::load_csv;
use cytomix_core::llmm::{
    llmm_fixed_effect_summary, llmm_mom_fit, llmm_scale_summary, Llmm, LlmmData, MomEstimate,
};
use cytomix_core::plmm::{
    corr_increase_probability, fixed_effect_summary, posterior_predictive, save_ppc_csv,
    save_summary_csv, scale_summary, Plmm,
};
use cytomix_core::sampler::{run_chains, ChainStats, Checkpointing};
use cytomix_core::simgen::GroundTruth;
use cytomix_core::{CellTable, Diagnostics, MarkerRole, Model, PosteriorDraws};
use log::info;
use serde::Serialize;

use crate::config::{ModelKind, RunConfig};
use crate::error::CliError;
use crate::manifest::{sha256_file, sha256_hex, DiagnosticsSummary, RunManifest};
use crate::plots;

pub const RHAT_WARNING: f64 = 1.05;

/// Flags that steer a single invocation but are not part of the run of record.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub resume: bool,
    /// Stop each chain after this many iterations (leaves checkpoints behind).
    pub halt_after: Option<usize>,
    /// Draws file for ppc/summarize/diagnostics; defaults to `<output>/draws.csv`.
    pub draws: Option<PathBuf>,
}

/// The table a model is fitted to, after filtering, marker selection and
/// subsampling.
struct Prepared {
    table: CellTable,
    input_sha256: String,
}

fn prepare(cfg: &RunConfig, command: &str) -> Result<Prepared, CliError> {
    let path = cfg.require_input(command)?;
    let input_sha256 = sha256_file(path)?;
    let mut table = load_csv(path, &cfg.effective_schema())?;
    if let Some(ct) = &cfg.celltype {
        table = table.filter_celltype(ct)?;
    }
    for m in &cfg.exclude {
        if table.marker_index(m).is_none() {
            return Err(CliError::Validation(format!("exclude: marker '{m}' not in table")));
        }
    }
    let keep: Vec<String> = table
        .markers()
        .iter()
        .filter(|m| m.role == MarkerRole::Functional && !cfg.exclude.contains(&m.name))
        .map(|m| m.name.clone())
        .collect();
    if keep.is_empty() {
        return Err(CliError::Validation(
            "exclude: no functional markers left to model".into(),
        ));
    }
    table = table.select_markers(&keep)?;
    if let Some(k) = cfg.subsample {
        table = table.subsample_per_donor(k, cfg.seed)?;
    }
    Ok(Prepared { table, input_sha256 })
}

fn llmm_data(cfg: &RunConfig, table: &CellTable) -> Result<LlmmData, CliError> {
    Ok(LlmmData::from_transformed(&table.arcsinh_transform(cfg.cofactor)?)?)
}

#[derive(Serialize)]
struct SignatureInput<'a> {
    model: ModelKind,
    parameterization: Option<cytomix_core::plmm::Parameterization>,
    priors: Option<cytomix_core::plmm::PlmmPriors>,
    cofactor: Option<f64>,
    input_sha256: &'a str,
    schema: &'a cytomix_core::Schema,
    celltype: &'a Option<String>,
    markers: Vec<String>,
    subsample: Option<(usize, u64)>,
}

/// Hash of everything that fixes the fitted model and its data.
fn model_signature(cfg: &RunConfig, prep: &Prepared) -> String {
    let plmm = cfg.model == ModelKind::Plmm;
    let sig = SignatureInput {
        model: cfg.model,
        parameterization: plmm.then_some(cfg.parameterization),
        priors: (cfg.model != ModelKind::LlmmMom).then_some(cfg.priors),
        cofactor: (!plmm).then_some(cfg.cofactor),
        input_sha256: &prep.input_sha256,
        schema: &cfg.effective_schema(),
        celltype: &cfg.celltype,
        markers: prep.table.marker_names(),
        subsample: cfg.subsample.map(|k| (k, cfg.seed)),
    };
    sha256_hex(serde_json::to_string(&sig).expect("signature serializes").as_bytes())
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))
}

fn warn(manifest: &mut RunManifest, msg: String) {
    eprintln!("warning: {msg}");
    manifest.warnings.push(msg);
}

fn rhat_warning(diag: &Diagnostics, manifest: &mut RunManifest) -> DiagnosticsSummary {
    let above = diag.rhat_above(RHAT_WARNING);
    if !above.is_empty() {
        let (name, worst) = above
            .iter()
            .copied()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .expect("non-empty");
        warn(
            manifest,
            format!(
                "R-hat above {RHAT_WARNING} for {} parameter(s); worst {name} = {worst:.3}",
                above.len()
            ),
        );
    }
    DiagnosticsSummary {
        max_rhat: diag.max_rhat(),
        min_ess: diag.min_ess(),
        divergences: diag.total_divergences(),
        rhat_above_threshold: above.iter().map(|(n, _)| n.to_string()).collect(),
    }
}

fn elapsed(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

pub fn validate(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.validate()?;
    if let Some(g) = &cfg.simulate {
        println!("simulate: {} generator ok", generator_name(g));
    }
    if cfg.input.is_none() {
        println!("config ok (no input to check)");
        return Ok(());
    }
    let prep = prepare(cfg, "validate")?;
    let t = &prep.table;
    println!("input: {}", cfg.input.as_ref().unwrap().display());
    println!("sha256: {}", prep.input_sha256);
    println!("cells: {}", t.n_cells());
    println!("donors: {}", t.n_donors());
    println!("conditions: {} (reference) vs {}", t.levels()[0], t.levels()[1]);
    println!("model markers: {}", t.marker_names().join(", "));
    let paired = t.is_paired();
    println!("paired: {paired}");
    for spec in cfg.subsets()? {
        for (m, _) in &spec.terms {
            if t.marker_index(m).is_none() {
                return Err(CliError::Validation(format!(
                    "ppc.subsets.{}: marker '{m}' is not a model marker",
                    spec.name
                )));
            }
        }
    }
    match cfg.model {
        ModelKind::Plmm => {}
        ModelKind::Llmm if !paired => {
            return Err(CliError::Validation(
                "LLMM is limited to paired samples: every donor needs cells in both conditions".into(),
            ))
        }
        ModelKind::Llmm | ModelKind::LlmmMom => {
            llmm_data(cfg, t)?.standardization()?;
            if !paired {
                eprintln!("warning: unpaired donors will be dropped by the moment estimator");
            }
        }
    }
    println!("ok");
    Ok(())
}

fn generator_name(g: &cytomix_core::simgen::Generator) -> &'static str {
    use cytomix_core::simgen::Generator;
    match g {
        Generator::Plmm(_) => "plmm",
        Generator::Llmm(_) => "llmm",
        Generator::Dag(_) => "dag",
    }
}

/// Writes `cells.csv`, `truth.json` and, when the generator works on the
/// transformed scale, `transformed.csv`.
pub fn simulate(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.validate()?;
    let generator = cfg
        .simulate
        .clone()
        .ok_or_else(|| CliError::Validation("simulate: section required".into()))?;
    let start = Instant::now();
    let out = &cfg.output;
    create_dir(out)?;
    let truth = GroundTruth::new(generator, cfg.seed);
    let sim = truth.simulate()?;
    let mut manifest = RunManifest::new("simulate", cfg);
    sim.table.save_csv(out.join("cells.csv"))?;
    truth.save(out.join("truth.json"))?;
    manifest.record_output(out, "cells.csv")?;
    manifest.record_output(out, "truth.json")?;
    if let Some(values) = &sim.transformed {
        write_transformed(&out.join("transformed.csv"), &sim.table, values)?;
        manifest.record_output(out, "transformed.csv")?;
    }
    if sim.clamped > 0 {
        warn(&mut manifest, format!("{} negative counts clamped to zero in cells.csv", sim.clamped));
    }
    manifest.timings_seconds.insert("total".into(), elapsed(start));
    manifest.save(&out.join("simulate-manifest.json"))?;
    println!("simulated {} cells into {}", sim.table.n_cells(), out.display());
    Ok(())
}

fn write_transformed(path: &Path, table: &CellTable, values: &[f64]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["donor".to_string(), "condition".into(), "celltype".into()];
    header.extend(table.marker_names());
    w.write_record(&header)?;
    let j = table.n_markers();
    for i in 0..table.n_cells() {
        let mut rec = vec![
            table.donors()[table.donor_index()[i]].clone(),
            table.levels()[table.condition()[i] as usize].clone(),
            table.celltype()[i].clone(),
        ];
        rec.extend(values[i * j..(i + 1) * j].iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn checkpointing(cfg: &RunConfig, opts: &RunOptions) -> Option<Checkpointing> {
    (cfg.checkpoint_every > 0 || opts.resume || opts.halt_after.is_some()).then(|| Checkpointing {
        dir: cfg.output.join("checkpoints"),
        every: cfg.checkpoint_every,
        resume: opts.resume,
        halt_after: opts.halt_after,
    })
}

fn sample<M: Model>(
    model: &M,
    inits: &[Vec<f64>],
    cfg: &RunConfig,
    opts: &RunOptions,
    command: &str,
    prep: &Prepared,
    mut manifest: RunManifest,
    start: Instant,
) -> Result<(), CliError> {
    let out = &cfg.output;
    let sc = cfg.sampler_config();
    info!("{command}: {} chains x {} iterations ({} warmup)", sc.chains, sc.iterations, sc.warmup);
    let t = Instant::now();
    let (draws, diag) = run_chains(model, &sc, inits, checkpointing(cfg, opts).as_ref())?;
    manifest.timings_seconds.insert("sampling".into(), elapsed(t));
    draws.save_csv(out.join("draws.csv"))?;
    diag.save_csv(out.join("diagnostics.csv"))?;
    fs::write(out.join("sampler_stats.json"), serde_json::to_string_pretty(&diag.chains)?)?;
    for name in ["draws.csv", "diagnostics.csv", "sampler_stats.json"] {
        manifest.record_output(out, name)?;
    }
    manifest.input_sha256 = Some(prep.input_sha256.clone());
    manifest.model_signature = Some(model_signature(cfg, prep));
    manifest.diagnostics = Some(rhat_warning(&diag, &mut manifest));
    manifest.timings_seconds.insert("total".into(), elapsed(start));
    manifest.save(&out.join("manifest.json"))?;
    println!(
        "{command}: {} draws of {} parameters written to {}",
        draws.n_draws(),
        draws.n_params(),
        out.display()
    );
    Ok(())
}

pub fn fit_plmm(cfg: &RunConfig, opts: &RunOptions) -> Result<(), CliError> {
    let cfg = &RunConfig { model: ModelKind::Plmm, ..cfg.clone() };
    cfg.validate()?;
    let start = Instant::now();
    let prep = prepare(cfg, "fit-plmm")?;
    create_dir(&cfg.output)?;
    let mut manifest = RunManifest::new("fit-plmm", cfg);
    let model = Plmm::new(&prep.table, cfg.priors, cfg.parameterization)?;
    let (inits, warnings) = model.initial_values(cfg.sampler_config().chains, cfg.seed);
    for w in warnings {
        warn(&mut manifest, w);
    }
    sample(&model, &inits, cfg, opts, "fit-plmm", &prep, manifest, start)
}

pub fn fit_llmm(cfg: &RunConfig, opts: &RunOptions) -> Result<(), CliError> {
    let cfg = &RunConfig { model: ModelKind::Llmm, ..cfg.clone() };
    cfg.validate()?;
    let start = Instant::now();
    let prep = prepare(cfg, "fit-llmm")?;
    let model = Llmm::new(llmm_data(cfg, &prep.table)?, cfg.priors)?;
    create_dir(&cfg.output)?;
    let manifest = RunManifest::new("fit-llmm", cfg);
    let inits = model.initial_values(cfg.sampler_config().chains, cfg.seed);
    sample(&model, &inits, cfg, opts, "fit-llmm", &prep, manifest, start)
}

/// Writes `mom.csv` (summary layout with method and flags) and `mom.json`.
pub fn fit_llmm_mom(cfg: &RunConfig) -> Result<(), CliError> {
    let cfg = &RunConfig { model: ModelKind::LlmmMom, ..cfg.clone() };
    cfg.validate()?;
    let start = Instant::now();
    let prep = prepare(cfg, "fit-llmm-mom")?;
    let est = llmm_mom_fit(&llmm_data(cfg, &prep.table)?)?;
    let out = &cfg.output;
    create_dir(out)?;
    let mut manifest = RunManifest::new("fit-llmm-mom", cfg);
    for w in &est.warnings {
        warn(&mut manifest, w.clone());
    }
    est.save_csv(out.join("mom.csv"))?;
    fs::write(out.join("mom.json"), serde_json::to_string_pretty(&est)?)?;
    manifest.record_output(out, "mom.csv")?;
    manifest.record_output(out, "mom.json")?;
    manifest.input_sha256 = Some(prep.input_sha256.clone());
    manifest.model_signature = Some(model_signature(cfg, &prep));
    manifest.timings_seconds.insert("total".into(), elapsed(start));
    manifest.save(&out.join("manifest.json"))?;
    println!("fit-llmm-mom: {} terms written to {}", est.terms.len(), out.display());
    Ok(())
}

/// Re-derives the fitted table and checks it, and the draws file, against the
/// fit manifest.
fn check_fit(cfg: &RunConfig, command: &str, fit_output: &str) -> Result<(Prepared, RunManifest), CliError> {
    cfg.validate()?;
    let prep = prepare(cfg, command)?;
    let manifest = RunManifest::load(&cfg.output.join("manifest.json"))?;
    let expected = format!("fit-{}", cfg.model.as_str());
    if manifest.command != expected {
        return Err(CliError::Validation(format!(
            "manifest records '{}' but the config model needs '{expected}'",
            manifest.command
        )));
    }
    if manifest.model_signature.as_deref() != Some(model_signature(cfg, &prep).as_str()) {
        return Err(CliError::Validation(
            "model signature differs from the fit manifest (input, markers or model settings changed)".into(),
        ));
    }
    if !manifest.outputs.contains_key(fit_output) {
        return Err(CliError::Validation(format!("fit manifest lists no {fit_output}")));
    }
    Ok((prep, manifest))
}

fn load_draws(path: &Path, fit: &RunManifest) -> Result<PosteriorDraws, CliError> {
    if !path.is_file() {
        return Err(CliError::Validation(format!("draws file {} does not exist", path.display())));
    }
    if fit.outputs.get("draws.csv") != Some(&sha256_file(path)?) {
        return Err(CliError::Validation(format!(
            "draws file {} does not match the fit manifest",
            path.display()
        )));
    }
    Ok(PosteriorDraws::load_csv(path)?)
}

fn draws_path(cfg: &RunConfig, opts: &RunOptions) -> PathBuf {
    opts.draws.clone().unwrap_or_else(|| cfg.output.join("draws.csv"))
}

pub fn ppc(cfg: &RunConfig, opts: &RunOptions) -> Result<(), CliError> {
    if cfg.model != ModelKind::Plmm {
        return Err(CliError::Validation("model: posterior predictive checks need the plmm model".into()));
    }
    let specs = cfg.subsets()?;
    if specs.is_empty() {
        return Err(CliError::Validation("ppc.subsets: at least one subset is required".into()));
    }
    let start = Instant::now();
    let (prep, fit) = check_fit(cfg, "ppc", "draws.csv")?;
    let draws = load_draws(&draws_path(cfg, opts), &fit)?;
    let results = posterior_predictive(&draws, &prep.table, &specs, cfg.ppc.replicates, cfg.seed)?;
    let out = &cfg.output;
    create_dir(&out.join("plots"))?;
    let mut manifest = RunManifest::new("ppc", cfg);
    save_ppc_csv(&results, out.join("ppc.csv"))?;
    plots::ppc_summary(&out.join("ppc_summary.csv"), &results)?;
    plots::ppc_density(&out.join("plots/ppc_density.csv"), &results)?;
    for name in ["ppc.csv", "ppc_summary.csv", "plots/ppc_density.csv"] {
        manifest.record_output(out, name)?;
    }
    for r in &results {
        println!(
            "{}: observed {:.4}, tail probability {:.3}{}",
            r.stat_name,
            r.observed,
            r.tail_probability(),
            if r.observed_within(0.95) { "" } else { " (outside central 95%)" }
        );
    }
    manifest.input_sha256 = Some(prep.input_sha256);
    manifest.model_signature = fit.model_signature;
    manifest.timings_seconds.insert("total".into(), elapsed(start));
    manifest.save(&out.join("ppc-manifest.json"))?;
    Ok(())
}

fn load_stats(dir: &Path) -> Vec<ChainStats> {
    fs::read_to_string(dir.join("sampler_stats.json"))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
        .unwrap_or_default()
}

pub fn summarize(cfg: &RunConfig, opts: &RunOptions) -> Result<(), CliError> {
    let start = Instant::now();
    let out = &cfg.output;
    let mut manifest = RunManifest::new("summarize", cfg);
    let mut written: Vec<&str> = Vec::new();
    if cfg.model == ModelKind::LlmmMom {
        let (prep, fit) = check_fit(cfg, "summarize", "mom.json")?;
        let text = fs::read_to_string(out.join("mom.json"))?;
        if fit.outputs.get("mom.json") != Some(&sha256_hex(text.as_bytes())) {
            return Err(CliError::Validation("mom.json does not match the fit manifest".into()));
        }
        let est: MomEstimate = serde_json::from_str(&text)?;
        create_dir(&out.join("plots"))?;
        let rows: Vec<_> = est.rows();
        let mut w = csv::Writer::from_path(out.join("plots/coefficients.csv"))?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
        written.push("plots/coefficients.csv");
        manifest.input_sha256 = Some(prep.input_sha256);
        manifest.model_signature = fit.model_signature;
    } else {
        let (prep, fit) = check_fit(cfg, "summarize", "draws.csv")?;
        let draws = load_draws(&draws_path(cfg, opts), &fit)?;
        create_dir(&out.join("plots"))?;
        let diag = Diagnostics::compute(&draws, load_stats(out));
        manifest.diagnostics = Some(rhat_warning(&diag, &mut manifest));
        let markers = prep.table.marker_names();
        match cfg.model {
            ModelKind::Plmm => {
                let mut rows = fixed_effect_summary(&draws, &markers)?;
                rows.extend(scale_summary(&draws, &markers)?);
                save_summary_csv(&rows, out.join("summary.csv"))?;
                plots::coefficients(&out.join("plots/coefficients.csv"), &rows)?;
                let blocks = [
                    ("condition_1", "omega_cond[1,".to_string()),
                    ("condition_2", "omega_cond[2,".to_string()),
                    ("donor", "omega_donor[".to_string()),
                ];
                plots::correlation_heatmap(
                    &out.join("plots/correlation_heatmap.csv"),
                    &draws,
                    &markers,
                    &blocks,
                    |i| (i + 1).to_string(),
                )?;
                let corr = corr_increase_probability(&draws, &markers)?;
                corr.save_csv(out.join("corr_increase.csv"))?;
                plots::corr_increase(
                    &out.join("plots/corr_increase_hist.csv"),
                    &out.join("plots/corr_increase_matrix.csv"),
                    &corr,
                )?;
                written.extend([
                    "summary.csv",
                    "corr_increase.csv",
                    "plots/coefficients.csv",
                    "plots/correlation_heatmap.csv",
                    "plots/corr_increase_hist.csv",
                    "plots/corr_increase_matrix.csv",
                ]);
            }
            _ => {
                let mut terms = vec!["intercept".to_string()];
                terms.extend(markers);
                let mut rows = llmm_fixed_effect_summary(&draws, &terms)?;
                rows.extend(llmm_scale_summary(&draws, &terms)?);
                save_summary_csv(&rows, out.join("summary.csv"))?;
                plots::coefficients(&out.join("plots/coefficients.csv"), &rows)?;
                let blocks = [("donor", "omega_donor[".to_string())];
                plots::correlation_heatmap(
                    &out.join("plots/correlation_heatmap.csv"),
                    &draws,
                    &terms,
                    &blocks,
                    |i| terms[i].clone(),
                )?;
                written.extend(["summary.csv", "plots/coefficients.csv", "plots/correlation_heatmap.csv"]);
            }
        }
        plots::trace(&out.join("plots/trace.csv"), &draws)?;
        written.push("plots/trace.csv");
        manifest.input_sha256 = Some(prep.input_sha256);
        manifest.model_signature = fit.model_signature;
    }
    for name in &written {
        manifest.record_output(out, name)?;
    }
    manifest.timings_seconds.insert("total".into(), elapsed(start));
    manifest.save(&out.join("summarize-manifest.json"))?;
    println!("summarize: wrote {} into {}", written.join(", "), out.display());
    Ok(())
}

/// Recomputes R-hat and ESS from a draws file and reports the worst values.
pub fn diagnostics(cfg: &RunConfig, opts: &RunOptions) -> Result<(), CliError> {
    cfg.validate()?;
    let path = draws_path(cfg, opts);
    if !path.is_file() {
        return Err(CliError::Validation(format!("draws file {} does not exist", path.display())));
    }
    let draws = PosteriorDraws::load_csv(&path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let diag = Diagnostics::compute(&draws, load_stats(dir));
    let out = &cfg.output;
    create_dir(out)?;
    let mut manifest = RunManifest::new("diagnostics", cfg);
    let summary = rhat_warning(&diag, &mut manifest);
    diag.save_csv(out.join("diagnostics.csv"))?;
    manifest.record_output(out, "diagnostics.csv")?;
    println!("draws: {} over {} chain(s)", draws.n_draws(), draws.chains().len());
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.3}"));
    println!("max R-hat: {}", fmt(summary.max_rhat));
    println!("min ESS: {}", fmt(summary.min_ess));
    println!("divergences: {}", summary.divergences);
    for c in &diag.chains {
        println!(
            "chain {}: accept {:.3}, step size {:.4}, divergences {}",
            c.chain, c.accept_rate, c.step_size, c.divergences
        );
    }
    manifest.diagnostics = Some(summary);
    manifest.save(&out.join("diagnostics-manifest.json"))?;
    Ok(())
}
