use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cytomix_core::plmm::{Parameterization, PlmmPriors, SubsetSpec};
use cytomix_core::sampler::MassMatrix;
use cytomix_core::simgen::Generator;
use cytomix_core::{SamplerConfig, Schema};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    #[default]
    Plmm,
    Llmm,
    LlmmMom,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Plmm => "plmm",
            ModelKind::Llmm => "llmm",
            ModelKind::LlmmMom => "llmm-mom",
        }
    }
}

/// Sampler settings as written in the config file. The seed comes from the
/// top-level `seed` key.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub chains: Option<usize>,
    pub iterations: Option<usize>,
    pub warmup: Option<usize>,
    pub target_accept: Option<f64>,
    pub max_leapfrog_steps: Option<usize>,
    pub mass_matrix: Option<MassMatrix>,
    pub path_length: Option<f64>,
    pub init_step_size: Option<f64>,
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpcSection {
    pub replicates: usize,
    /// Subset name to predicate, e.g. `A = "pSTAT1:gt_median&pSTAT3:gt_median"`.
    pub subsets: BTreeMap<String, String>,
}

impl Default for PpcSection {
    fn default() -> Self {
        PpcSection { replicates: 500, subsets: BTreeMap::new() }
    }
}

/// One run of record: everything needed to reproduce a command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub schema: Schema,
    pub celltype: Option<String>,
    /// Reference condition level; overrides `schema.reference`.
    pub reference: Option<String>,
    /// Markers left out of the model, on top of gating markers.
    pub exclude: Vec<String>,
    pub cofactor: f64,
    pub model: ModelKind,
    pub parameterization: Parameterization,
    pub priors: PlmmPriors,
    pub sampler: SamplerSection,
    /// Cells kept per (donor, condition) group.
    pub subsample: Option<usize>,
    pub output: PathBuf,
    pub seed: u64,
    /// Save per-chain state every this many iterations; 0 disables.
    pub checkpoint_every: usize,
    pub ppc: PpcSection,
    pub simulate: Option<Generator>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            input: None,
            schema: Schema::default(),
            celltype: None,
            reference: None,
            exclude: Vec::new(),
            cofactor: cytomix_core::data::DEFAULT_COFACTOR,
            model: ModelKind::Plmm,
            parameterization: Parameterization::NonCentered,
            priors: PlmmPriors::default(),
            sampler: SamplerSection::default(),
            subsample: None,
            output: PathBuf::from("cytomix-out"),
            seed: 1,
            checkpoint_every: 0,
            ppc: PpcSection::default(),
            simulate: None,
        }
    }
}

fn field(name: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Validation(format!("{name}: {msg}"))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))?;
        // Relative paths in the file are relative to the file.
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(input) = &cfg.input {
            if input.is_relative() {
                cfg.input = Some(base.join(input));
            }
        }
        if cfg.output.is_relative() {
            cfg.output = base.join(&cfg.output);
        }
        Ok(cfg)
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        let d = SamplerConfig::default();
        let s = &self.sampler;
        SamplerConfig {
            chains: s.chains.unwrap_or(d.chains),
            iterations: s.iterations.unwrap_or(d.iterations),
            warmup: s.warmup.unwrap_or(d.warmup),
            seed: self.seed,
            target_accept: s.target_accept.unwrap_or(d.target_accept),
            max_leapfrog_steps: s.max_leapfrog_steps.unwrap_or(d.max_leapfrog_steps),
            mass_matrix: s.mass_matrix.unwrap_or(d.mass_matrix),
            path_length: s.path_length.unwrap_or(d.path_length),
            init_step_size: s.init_step_size.or(d.init_step_size),
            threads: s.threads.or(d.threads),
        }
    }

    pub fn effective_schema(&self) -> Schema {
        let mut schema = self.schema.clone();
        if self.reference.is_some() {
            schema.reference = self.reference.clone();
        }
        schema
    }

    pub fn subsets(&self) -> Result<Vec<SubsetSpec>, CliError> {
        self.ppc
            .subsets
            .iter()
            .map(|(name, text)| SubsetSpec::parse(name.clone(), text).map_err(|e| field(&format!("ppc.subsets.{name}"), e)))
            .collect()
    }

    /// Checks every field that can be checked without reading data.
    pub fn validate(&self) -> Result<(), CliError> {
        if !(self.cofactor > 0.0 && self.cofactor.is_finite()) {
            return Err(field("cofactor", format!("must be positive, got {}", self.cofactor)));
        }
        self.priors.validate().map_err(|e| field("priors", e))?;
        self.sampler_config().validate().map_err(|e| field("sampler", e))?;
        if self.subsample == Some(0) {
            return Err(field("subsample", "must be >= 1"));
        }
        if self.ppc.replicates == 0 {
            return Err(field("ppc.replicates", "must be >= 1"));
        }
        self.subsets()?;
        let mut seen = std::collections::HashSet::new();
        for m in &self.exclude {
            if !seen.insert(m) {
                return Err(field("exclude", format!("marker '{m}' listed twice")));
            }
        }
        if let Some(r) = &self.reference {
            if r.is_empty() {
                return Err(field("reference", "must not be empty"));
            }
        }
        if let Some(c) = &self.celltype {
            if c.is_empty() {
                return Err(field("celltype", "must not be empty"));
            }
        }
        for (name, col) in [
            ("schema.donor", &self.schema.donor),
            ("schema.condition", &self.schema.condition),
            ("schema.celltype", &self.schema.celltype),
        ] {
            if col.is_empty() {
                return Err(field(name, "column name must not be empty"));
            }
        }
        if let Some(g) = &self.simulate {
            let check = match g {
                Generator::Plmm(s) => s.validate(),
                Generator::Llmm(s) => s.validate(),
                Generator::Dag(s) => s.validate(),
            };
            check.map_err(|e| field("simulate", e))?;
        }
        if let Some(input) = &self.input {
            if !input.is_file() {
                return Err(field("input", format!("{} does not exist", input.display())));
            }
        }
        Ok(())
    }

    pub fn require_input(&self, command: &str) -> Result<&Path, CliError> {
        self.input
            .as_deref()
            .ok_or_else(|| field("input", format!("required for {command}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<RunConfig>("inptu = 'x.csv'").unwrap_err();
        assert!(err.to_string().contains("inptu"));
        let err = toml::from_str::<RunConfig>("[sampler]\nseed = 3").unwrap_err();
        assert!(err.to_string().contains("seed"));
    }

    #[test]
    fn sampler_section_fills_defaults() {
        let cfg: RunConfig = toml::from_str("seed = 9\n[sampler]\nchains = 2").unwrap();
        let s = cfg.sampler_config();
        assert_eq!((s.chains, s.iterations, s.warmup, s.seed), (2, 325, 200, 9));
    }

    #[test]
    fn field_level_messages() {
        let cfg = RunConfig { cofactor: -1.0, ..Default::default() };
        assert!(cfg.validate().unwrap_err().to_string().starts_with("cofactor:"));
        let mut cfg = RunConfig::default();
        cfg.sampler.warmup = Some(400);
        assert!(cfg.validate().unwrap_err().to_string().starts_with("sampler:"));
        let mut cfg = RunConfig::default();
        cfg.ppc.subsets.insert("A".into(), "m1:sideways".into());
        assert!(cfg.validate().unwrap_err().to_string().starts_with("ppc.subsets.A:"));
    }

    #[test]
    fn simulate_table_parses() {
        let text = r#"
[simulate]
kind = "dag"
[simulate.settings]
kind = "collider"
a = 1.0
b = 0.5
c = 1.0
noise_y1 = 1.0
noise_y2 = 1.0
base_y1 = 3.0
base_y2 = 3.0
donor_sd = 0.3
donors = 6
cells_per_donor = 400
cofactor = 5.0
"#;
        let cfg: RunConfig = toml::from_str(text).unwrap();
        assert!(matches!(cfg.simulate, Some(Generator::Dag(_))));
        cfg.validate().unwrap();
    }
}
