use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{simulate_dag, simulate_llmm, simulate_plmm, DagScenario, LlmmSimSettings, PlmmSimSettings};
use crate::data::CellTable;
use crate::error::{Error, Result};

pub const TRUTH_VERSION: u32 = 1;

/// The generator behind a simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "settings", rename_all = "snake_case")]
pub enum Generator {
    Plmm(PlmmSimSettings),
    Llmm(LlmmSimSettings),
    Dag(DagScenario),
}

/// Settings and seed of a simulation, stored as `truth.json`:
///
/// ```json
/// {"version": 1, "seed": 7, "generator": {"kind": "plmm", "settings": {...}}}
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub version: u32,
    pub seed: u64,
    pub generator: Generator,
}

/// A simulated count table plus, where the generator works on the
/// transformed scale, the exact transformed values (N×J).
#[derive(Debug, Clone)]
pub struct SimulatedTable {
    pub table: CellTable,
    pub transformed: Option<Vec<f64>>,
    /// Count entries clamped at zero by an approximate export.
    pub clamped: usize,
}

impl GroundTruth {
    pub fn new(generator: Generator, seed: u64) -> Self {
        GroundTruth { version: TRUTH_VERSION, seed, generator }
    }

    /// Re-runs the generator. The table is bit-identical to the original run.
    pub fn simulate(&self) -> Result<SimulatedTable> {
        match &self.generator {
            Generator::Plmm(s) => Ok(SimulatedTable {
                table: simulate_plmm(s, self.seed)?.table,
                transformed: None,
                clamped: 0,
            }),
            Generator::Dag(s) => {
                let sim = simulate_dag(s, self.seed)?;
                let (table, clamped) = sim.count_table()?;
                Ok(SimulatedTable { table, transformed: Some(sim.values), clamped })
            }
            Generator::Llmm(s) => {
                let sim = simulate_llmm(s, self.seed)?;
                let d = &sim.data;
                let cofactor = crate::data::DEFAULT_COFACTOR;
                let mut clamped = 0;
                let counts = d
                    .x()
                    .iter()
                    .map(|&v| {
                        let c = (cofactor * v.sinh()).round();
                        if c < 0.0 {
                            clamped += 1;
                        }
                        c.max(0.0) as u64
                    })
                    .collect();
                let table = CellTable::from_parts(
                    d.markers().iter().map(crate::data::Marker::functional).collect(),
                    d.donor_index().iter().map(|&i| d.donors()[i].clone()).collect(),
                    d.response().iter().map(|&y| d.levels()[y as usize].clone()).collect(),
                    vec!["sim".into(); d.n_cells()],
                    counts,
                    Some(&d.levels()[0]),
                )?;
                Ok(SimulatedTable { table, transformed: Some(d.x().to_vec()), clamped })
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: GroundTruth = serde_json::from_str(text)?;
        if t.version != TRUTH_VERSION {
            return Err(Error::Parameter(format!(
                "unsupported truth version {} (expected {TRUTH_VERSION})",
                t.version
            )));
        }
        Ok(t)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simgen::DagKind;

    #[test]
    fn json_round_trip_regenerates_identical_tables() {
        let truths = [
            GroundTruth::new(
                Generator::Plmm(PlmmSimSettings::simple([vec![1.0, 2.0], vec![1.5, 2.0]], 2, 10)),
                4,
            ),
            GroundTruth::new(Generator::Dag(DagScenario::new(DagKind::Collider, 1.0, 0.5, 1.0)), 5),
            GroundTruth::new(Generator::Llmm(LlmmSimSettings::simple(vec![0.0, 1.0], 0.3, 3, 20)), 6),
        ];
        for t in truths {
            let text = t.to_json().unwrap();
            let back = GroundTruth::from_json(&text).unwrap();
            assert_eq!(back, t);
            assert_eq!(back.simulate().unwrap().table, t.simulate().unwrap().table);
        }
    }

    #[test]
    fn version_and_unknown_keys_are_checked() {
        let t = GroundTruth::new(Generator::Dag(DagScenario::new(DagKind::Pipe, 0.0, 1.0, 1.0)), 1);
        let text = t.to_json().unwrap().replace("\"version\": 1", "\"version\": 9");
        assert!(GroundTruth::from_json(&text).is_err());
        let text = t.to_json().unwrap().replace("\"seed\"", "\"extra\": 0, \"seed\"");
        assert!(GroundTruth::from_json(&text).is_err());
    }
}
