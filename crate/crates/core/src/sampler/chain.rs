use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{MassMatrix, SamplerConfig};
use super::diagnostics::{ChainStats, Diagnostics};
use super::draws::PosteriorDraws;
use super::hmc::{find_reasonable_step_size, transition, DualAveraging};
use super::Model;
use crate::error::{Error, Result};

/// Running mean and variance (Welford).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Welford {
    n: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Welford {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn add(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let delta = v - *m;
            *m += delta / n;
            *s += delta * (v - *m);
        }
    }

    /// Variance shrunk toward 1e-3, as in Stan's windowed adaptation.
    fn regularized_variance(&self) -> Vec<f64> {
        let n = self.n as f64;
        self.m2
            .iter()
            .map(|s| {
                let var = if self.n > 1 { s / (n - 1.0) } else { 1.0 };
                (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            })
            .collect()
    }
}

/// Complete resumable state of one chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    pub chain: usize,
    pub config: SamplerConfig,
    /// Iterations completed so far (warmup included).
    pub iteration: usize,
    q: Vec<f64>,
    logp: f64,
    grad: Vec<f64>,
    rng: ChaCha8Rng,
    eps: f64,
    adapt: DualAveraging,
    inv_metric: Vec<f64>,
    window: Welford,
    /// Retained draws on the model's output scale, row-major.
    draws: Vec<f64>,
    accept_sum: f64,
    divergences: usize,
    warmup_divergences: usize,
    leapfrog_steps: u64,
}

/// Drives a single chain through warmup and sampling.
pub struct ChainRunner<'a, M: Model + ?Sized> {
    model: &'a M,
    state: ChainState,
    n_out: usize,
}

/// RNG stream for chain `k`: the master seed with stream id `k`, so adding or
/// removing chains leaves the other chains' streams untouched.
fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

impl<'a, M: Model + ?Sized> ChainRunner<'a, M> {
    pub fn new(model: &'a M, config: &SamplerConfig, chain: usize, init: &[f64]) -> Result<Self> {
        config.validate()?;
        let d = model.dim();
        if init.len() != d {
            return Err(Error::Dimension {
                expected: d,
                got: init.len(),
            });
        }
        let mut rng = chain_rng(config.seed, chain);
        let mut q = init.to_vec();
        let mut grad = vec![0.0; d];
        let mut logp = model.log_density_grad(&q, &mut grad);
        let mut tries = 0;
        while !(logp.is_finite() && grad.iter().all(|g| g.is_finite())) {
            if tries == 100 {
                return Err(Error::Initialization(format!(
                    "chain {chain}: log density not finite at the initial point or 100 random restarts"
                )));
            }
            tries += 1;
            for v in q.iter_mut() {
                *v = rng.random_range(-2.0..2.0);
            }
            logp = model.log_density_grad(&q, &mut grad);
        }
        let inv_metric = vec![1.0; d];
        let eps = match config.init_step_size {
            Some(e) => e,
            None => find_reasonable_step_size(model, &q, logp, &grad, &inv_metric, 0.1, &mut rng),
        };
        let n_out = model.output_names().len();
        Ok(ChainRunner {
            model,
            state: ChainState {
                chain,
                config: config.clone(),
                iteration: 0,
                q,
                logp,
                grad,
                rng,
                eps,
                adapt: DualAveraging::new(eps, config.target_accept),
                inv_metric,
                window: Welford::new(d),
                draws: Vec::with_capacity(config.draws_per_chain() * n_out),
                accept_sum: 0.0,
                divergences: 0,
                warmup_divergences: 0,
                leapfrog_steps: 0,
            },
            n_out,
        })
    }

    pub fn from_state(model: &'a M, state: ChainState) -> Result<Self> {
        if state.q.len() != model.dim() {
            return Err(Error::Checkpoint(format!(
                "chain {} state has dimension {}, model has {}",
                state.chain,
                state.q.len(),
                model.dim()
            )));
        }
        let n_out = model.output_names().len();
        Ok(ChainRunner {
            model,
            state,
            n_out,
        })
    }

    pub fn state(&self) -> &ChainState {
        &self.state
    }

    /// Current step size.
    pub fn step_size(&self) -> f64 {
        self.state.eps
    }

    pub fn is_done(&self) -> bool {
        self.state.iteration >= self.state.config.iterations
    }

    fn metric_windows(&self) -> Vec<(usize, usize)> {
        let c = &self.state.config;
        if c.mass_matrix == MassMatrix::DiagonalAdapted {
            metric_windows(c.warmup)
        } else {
            Vec::new()
        }
    }

    fn step_count(&mut self) -> usize {
        let c = &self.state.config;
        let base = (c.path_length / self.state.eps).ceil().clamp(1.0, c.max_leapfrog_steps as f64);
        let lo = ((0.5 * base).ceil() as usize).max(1);
        let hi = ((1.5 * base).floor() as usize).clamp(lo, c.max_leapfrog_steps.max(lo));
        self.state.rng.random_range(lo..=hi)
    }

    /// Runs one iteration (warmup or sampling).
    pub fn step(&mut self) {
        if self.is_done() {
            return;
        }
        let steps = self.step_count();
        let st = &mut self.state;
        let t = transition(
            self.model,
            &mut st.q,
            &mut st.logp,
            &mut st.grad,
            st.eps,
            steps,
            &st.inv_metric,
            &mut st.rng,
        );
        st.leapfrog_steps += t.steps as u64;
        let it = st.iteration;
        let warmup = st.config.warmup;
        if it < warmup {
            st.warmup_divergences += usize::from(t.divergent);
            st.eps = st.adapt.update(t.accept_stat);
            if let Some(&(_, end)) = self.metric_windows().iter().find(|(lo, hi)| (*lo..*hi).contains(&it)) {
                let st = &mut self.state;
                st.window.add(&st.q);
                if it + 1 == end {
                    st.inv_metric = st.window.regularized_variance();
                    st.window = Welford::new(st.q.len());
                    st.eps = find_reasonable_step_size(
                        self.model,
                        &st.q,
                        st.logp,
                        &st.grad,
                        &st.inv_metric,
                        st.eps,
                        &mut st.rng,
                    );
                    st.adapt = DualAveraging::new(st.eps, st.config.target_accept);
                }
            }
            let st = &mut self.state;
            if it + 1 == warmup {
                st.eps = st.adapt.final_step_size();
            }
        } else {
            st.divergences += usize::from(t.divergent);
            st.accept_sum += t.accept_stat;
            self.model.constrain(&st.q, &mut st.draws);
        }
        self.state.iteration += 1;
    }

    pub fn stats(&self) -> ChainStats {
        let st = &self.state;
        let kept = st.iteration.saturating_sub(st.config.warmup).max(1);
        ChainStats {
            chain: st.chain,
            accept_rate: st.accept_sum / kept as f64,
            divergences: st.divergences,
            warmup_divergences: st.warmup_divergences,
            step_size: st.eps,
            leapfrog_steps: st.leapfrog_steps,
            inv_metric: st.inv_metric.clone(),
        }
    }

    pub fn draws(&self) -> &[f64] {
        &self.state.draws
    }

    pub fn n_outputs(&self) -> usize {
        self.n_out
    }
}

/// Metric-estimation windows within a warmup of `warmup` iterations.
///
/// An initial 15% of warmup adapts only the step size, then windows of
/// doubling length (the first is 10% of warmup) each estimate a fresh
/// diagonal metric, and a final 20% adapts only the step size again. The last
/// window absorbs any remainder. Warmups shorter than 20 get no windows.
pub(crate) fn metric_windows(warmup: usize) -> Vec<(usize, usize)> {
    if warmup < 20 {
        return Vec::new();
    }
    let init = (warmup * 15).div_ceil(100);
    let term = warmup / 5;
    let limit = warmup - term;
    let mut size = (warmup / 10).max(1);
    let mut start = init;
    let mut out = Vec::new();
    while start < limit {
        let mut end = start + size;
        if end + 2 * size > limit {
            end = limit;
        }
        out.push((start, end));
        start = end;
        size *= 2;
    }
    out
}

/// Periodic per-chain state files, for resuming long runs.
#[derive(Debug, Clone)]
pub struct Checkpointing {
    pub dir: PathBuf,
    /// Save every this many iterations.
    pub every: usize,
    /// Resume from existing state files when present.
    pub resume: bool,
    /// Stop every chain after this many total iterations (simulated interruption).
    pub halt_after: Option<usize>,
}

impl Checkpointing {
    fn path(&self, chain: usize) -> PathBuf {
        self.dir.join(format!("chain_{chain}.json"))
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn run_one<M: Model + ?Sized>(
    model: &M,
    config: &SamplerConfig,
    chain: usize,
    init: &[f64],
    ckpt: Option<&Checkpointing>,
) -> Result<(Vec<f64>, ChainStats)> {
    let mut runner = match ckpt.filter(|c| c.resume).map(|c| c.path(chain)) {
        Some(p) if p.exists() => {
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            let state: ChainState = serde_json::from_str(&text)?;
            if &state.config != config || state.chain != chain {
                return Err(Error::Checkpoint(format!(
                    "{} was written with a different configuration",
                    p.display()
                )));
            }
            ChainRunner::from_state(model, state)?
        }
        _ => ChainRunner::new(model, config, chain, init)?,
    };
    while !runner.is_done() {
        runner.step();
        let it = runner.state().iteration;
        if let Some(c) = ckpt {
            let halt = c.halt_after == Some(it);
            if (c.every > 0 && it % c.every == 0) || halt || runner.is_done() {
                write_atomic(&c.path(chain), serde_json::to_string(runner.state())?.as_bytes())?;
            }
            if halt && !runner.is_done() {
                return Err(Error::Checkpoint(format!(
                    "halted at iteration {it}; rerun with resume to continue"
                )));
            }
        }
    }
    let stats = runner.stats();
    Ok((runner.state.draws, stats))
}

/// Runs `config.chains` independent chains and returns retained draws with
/// diagnostics. `inits` holds one initial vector per chain, or a single vector
/// shared by all chains.
///
/// Output is bit-identical for identical (config, inits), whatever the thread
/// count: chains share nothing mutable and are collected in chain order.
pub fn run_chains<M: Model + ?Sized>(
    model: &M,
    config: &SamplerConfig,
    inits: &[Vec<f64>],
    checkpointing: Option<&Checkpointing>,
) -> Result<(PosteriorDraws, Diagnostics)> {
    config.validate()?;
    if inits.len() != 1 && inits.len() != config.chains {
        return Err(Error::Parameter(format!(
            "expected 1 or {} initial vectors, got {}",
            config.chains,
            inits.len()
        )));
    }
    if let Some(c) = checkpointing {
        fs::create_dir_all(&c.dir).map_err(|e| Error::io(&c.dir, e))?;
    }
    let init_for = |k: usize| &inits[if inits.len() == 1 { 0 } else { k }];
    let work = || -> Vec<Result<(Vec<f64>, ChainStats)>> {
        (0..config.chains)
            .into_par_iter()
            .map(|k| run_one(model, config, k, init_for(k), checkpointing))
            .collect()
    };
    let results = match config.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Parameter(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    };
    let mut per_chain = Vec::with_capacity(config.chains);
    let mut init_failures = Vec::new();
    for r in results {
        match r {
            Ok(v) => per_chain.push(v),
            Err(Error::Initialization(msg)) => init_failures.push(msg),
            Err(e) => return Err(e),
        }
    }
    if !init_failures.is_empty() {
        let detail = model
            .describe_nonfinite(init_for(0))
            .map(|t| format!(" (first non-finite term: {t})"))
            .unwrap_or_default();
        return Err(Error::Initialization(format!("{}{detail}", init_failures[0])));
    }
    let names = model.output_names();
    let n_out = names.len();
    let per = config.draws_per_chain();
    let mut draws = PosteriorDraws::with_capacity(names, config.total_draws());
    let mut stats = Vec::with_capacity(config.chains);
    for (values, st) in per_chain {
        for (i, row) in values.chunks(n_out).enumerate() {
            draws.push(st.chain, config.warmup + i + 1, row);
        }
        debug_assert_eq!(values.len(), per * n_out);
        stats.push(st);
    }
    let diagnostics = Diagnostics::compute(&draws, stats);
    Ok((draws, diagnostics))
}
