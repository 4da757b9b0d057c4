use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsSummary {
    pub max_rhat: Option<f64>,
    pub min_ess: Option<f64>,
    pub divergences: usize,
    /// Parameters with R-hat above 1.05.
    pub rhat_above_threshold: Vec<String>,
}

/// Record of one command run, written last and atomically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub software_version: String,
    pub command: String,
    pub config: RunConfig,
    pub input_sha256: Option<String>,
    /// Hash of everything that determines the model's target density.
    pub model_signature: Option<String>,
    /// Master seed; chain `k` draws from ChaCha8 stream `k` of this seed.
    pub seed: u64,
    pub timings_seconds: BTreeMap<String, f64>,
    pub diagnostics: Option<DiagnosticsSummary>,
    pub warnings: Vec<String>,
    /// Output file name to SHA-256.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        RunManifest {
            manifest_version: MANIFEST_VERSION,
            software_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config: config.clone(),
            input_sha256: None,
            model_signature: None,
            seed: config.seed,
            timings_seconds: BTreeMap::new(),
            diagnostics: None,
            warnings: Vec::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn record_output(&mut self, dir: &Path, name: &str) -> Result<(), CliError> {
        let digest = sha256_file(&dir.join(name))?;
        self.outputs.insert(name.to_string(), digest);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self)?;
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read manifest {}: {e}", path.display())))?;
        let m: RunManifest = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("manifest {}: {e}", path.display())))?;
        if m.manifest_version != MANIFEST_VERSION {
            return Err(CliError::Validation(format!(
                "manifest {} has version {}, expected {MANIFEST_VERSION}",
                path.display(),
                m.manifest_version
            )));
        }
        Ok(m)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    fs::write(tmp, bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", tmp.display())))?;
    fs::rename(tmp, path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let mut m = RunManifest::new("fit-plmm", &RunConfig::default());
        m.warnings.push("w".into());
        m.save(&path).unwrap();
        assert_eq!(RunManifest::load(&path).unwrap(), m);
        assert!(!dir.path().join("manifest.json.tmp").exists());
    }
}
