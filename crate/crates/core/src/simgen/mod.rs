//! Synthetic data from the PLMM, the LLMM and the three causal graphs.

mod dag;
mod llmm;
mod plmm;
mod truth;

pub use dag::{dag_logit_coefficients, simulate_dag, DagKind, DagScenario, DagSimulation, DAG_LEVELS, DAG_MARKERS};
pub use llmm::{simulate_llmm, LlmmSimSettings, LlmmSimulation};
pub use plmm::{simulate_plmm, PlmmSimSettings, PlmmSimulation};
pub use truth::{Generator, GroundTruth, SimulatedTable, TRUTH_VERSION};
