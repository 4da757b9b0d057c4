//! `cytomix`: simulate cytometry data, fit the Poisson log-normal and
//! logistic mixed models, and check and summarize the fits.
//!
//! Exit codes: 0 success, 1 invalid configuration or data, 2 runtime failure,
//! 3 reserved for fatal convergence failures.

mod commands;
mod config;
mod error;
mod manifest;
mod plots;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::RunOptions;
use config::{ModelKind, RunConfig};
use error::CliError;

#[derive(Parser)]
#[command(name = "cytomix", version, about = "Bayesian mixed models for mass cytometry")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the configuration and input data without fitting.
    Validate(Common),
    /// Generate a synthetic dataset from the `[simulate]` section.
    Simulate(Common),
    /// Fit the Poisson log-normal mixed model.
    FitPlmm(Fit),
    /// Fit the logistic mixed model.
    FitLlmm(Fit),
    /// Method-of-moments estimate of the logistic mixed model.
    FitLlmmMom(Common),
    /// Posterior predictive check of subset fractions.
    Ppc(Post),
    /// Posterior summaries and plot data.
    Summarize(Post),
    /// R-hat, ESS and sampler statistics of a draws file.
    Diagnostics(Post),
}

/// Config file plus overrides; flags win over the file.
#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    model: Option<ModelArg>,
    #[arg(long)]
    celltype: Option<String>,
    /// Reference condition level.
    #[arg(long)]
    reference: Option<String>,
    /// Marker to leave out of the model; repeatable.
    #[arg(long = "exclude")]
    exclude: Vec<String>,
    #[arg(long)]
    cofactor: Option<f64>,
    /// Cells kept per donor and condition.
    #[arg(long)]
    subsample: Option<usize>,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct Fit {
    #[command(flatten)]
    common: Common,
    /// Save per-chain state every this many iterations.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Continue from saved per-chain state.
    #[arg(long)]
    resume: bool,
    /// Stop after this many iterations, leaving checkpoints (for testing resume).
    #[arg(long, hide = true)]
    halt_after: Option<usize>,
}

#[derive(Args)]
struct Post {
    #[command(flatten)]
    common: Common,
    /// Draws file; defaults to `<output>/draws.csv`.
    #[arg(long)]
    draws: Option<PathBuf>,
    /// Posterior predictive replicates.
    #[arg(long)]
    replicates: Option<usize>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ModelArg {
    Plmm,
    Llmm,
    LlmmMom,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.input {
            cfg.input = Some(v.clone());
        }
        if let Some(v) = &self.output {
            cfg.output = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(m) = self.model {
            cfg.model = match m {
                ModelArg::Plmm => ModelKind::Plmm,
                ModelArg::Llmm => ModelKind::Llmm,
                ModelArg::LlmmMom => ModelKind::LlmmMom,
            };
        }
        if let Some(v) = &self.celltype {
            cfg.celltype = Some(v.clone());
        }
        if let Some(v) = &self.reference {
            cfg.reference = Some(v.clone());
        }
        if !self.exclude.is_empty() {
            cfg.exclude = self.exclude.clone();
        }
        if let Some(v) = self.cofactor {
            cfg.cofactor = v;
        }
        if let Some(v) = self.subsample {
            cfg.subsample = Some(v);
        }
        let s = &mut cfg.sampler;
        s.chains = self.chains.or(s.chains);
        s.iterations = self.iterations.or(s.iterations);
        s.warmup = self.warmup.or(s.warmup);
        s.threads = self.threads.or(s.threads);
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Validate(c) => commands::validate(&c.resolve()?),
        Command::Simulate(c) => commands::simulate(&c.resolve()?),
        Command::FitPlmm(f) => {
            let (cfg, opts) = fit_args(&f)?;
            commands::fit_plmm(&cfg, &opts)
        }
        Command::FitLlmm(f) => {
            let (cfg, opts) = fit_args(&f)?;
            commands::fit_llmm(&cfg, &opts)
        }
        Command::FitLlmmMom(c) => commands::fit_llmm_mom(&c.resolve()?),
        Command::Ppc(p) => {
            let (cfg, opts) = post_args(&p)?;
            commands::ppc(&cfg, &opts)
        }
        Command::Summarize(p) => {
            let (cfg, opts) = post_args(&p)?;
            commands::summarize(&cfg, &opts)
        }
        Command::Diagnostics(p) => {
            let (cfg, opts) = post_args(&p)?;
            commands::diagnostics(&cfg, &opts)
        }
    }
}

fn fit_args(f: &Fit) -> Result<(RunConfig, RunOptions), CliError> {
    let mut cfg = f.common.resolve()?;
    if let Some(v) = f.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    let opts = RunOptions { resume: f.resume, halt_after: f.halt_after, draws: None };
    Ok((cfg, opts))
}

fn post_args(p: &Post) -> Result<(RunConfig, RunOptions), CliError> {
    let mut cfg = p.common.resolve()?;
    if let Some(v) = p.replicates {
        cfg.ppc.replicates = v;
    }
    Ok((cfg, RunOptions { draws: p.draws.clone(), ..Default::default() }))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = match e {
                CliError::Validation(_) => "invalid input",
                CliError::Runtime(_) => "error",
            };
            eprintln!("{kind}: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
