use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MassMatrix {
    Identity,
    #[default]
    DiagonalAdapted,
}

/// HMC settings. Defaults follow the reference analysis: 8 chains of 325
/// iterations with the first 200 discarded as warmup (1000 retained draws).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub chains: usize,
    pub iterations: usize,
    pub warmup: usize,
    pub seed: u64,
    pub target_accept: f64,
    pub max_leapfrog_steps: usize,
    pub mass_matrix: MassMatrix,
    /// Nominal integration time; the step count is `path_length / eps`,
    /// jittered uniformly over `[0.5, 1.5]` of that and capped.
    pub path_length: f64,
    /// Starting step size; found heuristically when absent.
    pub init_step_size: Option<f64>,
    /// Worker threads for chains; `None` uses the global pool.
    pub threads: Option<usize>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            chains: 8,
            iterations: 325,
            warmup: 200,
            seed: 1,
            target_accept: 0.8,
            max_leapfrog_steps: 256,
            mass_matrix: MassMatrix::DiagonalAdapted,
            path_length: 2.0,
            init_step_size: None,
            threads: None,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Parameter(m.to_string()));
        if self.chains == 0 {
            return bad("chains must be >= 1");
        }
        if self.iterations == 0 {
            return bad("iterations must be >= 1");
        }
        if self.warmup >= self.iterations {
            return bad("warmup must be smaller than iterations");
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return bad("target_accept must lie in (0, 1)");
        }
        if self.max_leapfrog_steps == 0 {
            return bad("max_leapfrog_steps must be >= 1");
        }
        if !(self.path_length > 0.0 && self.path_length.is_finite()) {
            return bad("path_length must be positive");
        }
        if let Some(e) = self.init_step_size {
            if !(e > 0.0 && e.is_finite()) {
                return bad("init_step_size must be positive");
            }
        }
        if self.threads == Some(0) {
            return bad("threads must be >= 1");
        }
        Ok(())
    }

    /// Retained draws per chain.
    pub fn draws_per_chain(&self) -> usize {
        self.iterations - self.warmup
    }

    pub fn total_draws(&self) -> usize {
        self.chains * self.draws_per_chain()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_gives_thousand_draws() {
        let c = SamplerConfig::default();
        c.validate().unwrap();
        assert_eq!(c.total_draws(), 1000);
        let small = SamplerConfig {
            chains: 1,
            iterations: 2,
            warmup: 1,
            ..c
        };
        assert_eq!(small.total_draws(), 1);
    }

    #[test]
    fn rejects_bad_settings() {
        let base = SamplerConfig::default();
        for c in [
            SamplerConfig { warmup: 325, ..base.clone() },
            SamplerConfig { chains: 0, ..base.clone() },
            SamplerConfig { target_accept: 1.0, ..base.clone() },
            SamplerConfig { threads: Some(0), ..base.clone() },
        ] {
            assert!(c.validate().is_err());
        }
    }
}
