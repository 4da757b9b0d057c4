//! Python bindings: cell tables, the two models, the moment estimator,
//! posterior summaries, predictive checks and simulation.
//!
//! ```python
//! import cytomix
//! table = cytomix.CellTable.from_csv("cells.csv")
//! draws = cytomix.fit_plmm(table, cytomix.SamplerConfig(chains=4))
//! cytomix.plmm_summary(draws, table.markers)
//! ```

use std::collections::HashMap;

use cytomix_core::llmm::{llmm_fixed_effect_summary, llmm_mom_fit, Llmm, LlmmData};
use cytomix_core::plmm::{
    corr_increase_probability, fixed_effect_summary, posterior_predictive, scale_summary,
    Parameterization, Plmm, PlmmPriors, SubsetSpec,
};
use cytomix_core::sampler::{compute_ess, compute_rhat, run_chains, MassMatrix};
use cytomix_core::simgen::{dag_logit_coefficients, DagKind, DagScenario, Generator, GroundTruth};
use cytomix_core::summary::SummaryRow;
use cytomix_core::{CellTable, Error, MarkerRole, PosteriorDraws, Schema};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. }
        | Error::Initialization(_)
        | Error::RhatUnavailable(_)
        | Error::Simulation(_)
        | Error::Checkpoint(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Cells × markers count table with donor, condition and cell-type labels.
#[pyclass(name = "CellTable", module = "cytomix", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyCellTable {
    inner: CellTable,
}

#[pymethods]
impl PyCellTable {
    /// Reads a CSV with one row per cell. `gating` lists markers that are not
    /// modelled.
    #[staticmethod]
    #[pyo3(signature = (path, donor="donor", condition="condition", celltype="celltype", reference=None, gating=Vec::new()))]
    fn from_csv(
        path: &str,
        donor: &str,
        condition: &str,
        celltype: &str,
        reference: Option<String>,
        gating: Vec<String>,
    ) -> PyResult<Self> {
        let schema = Schema {
            donor: donor.into(),
            condition: condition.into(),
            celltype: celltype.into(),
            reference,
            roles: gating.into_iter().map(|m| (m, MarkerRole::Gating)).collect(),
            ..Schema::default()
        };
        let inner = cytomix_core::data::load_csv(path, &schema).map_err(py_err)?;
        Ok(PyCellTable { inner })
    }

    fn to_csv(&self, path: &str) -> PyResult<()> {
        self.inner.save_csv(path).map_err(py_err)
    }

    #[getter]
    fn n_cells(&self) -> usize {
        self.inner.n_cells()
    }

    #[getter]
    fn markers(&self) -> Vec<String> {
        self.inner.marker_names()
    }

    #[getter]
    fn donors(&self) -> Vec<String> {
        self.inner.donors().to_vec()
    }

    /// `[reference, other]`.
    #[getter]
    fn levels(&self) -> Vec<String> {
        self.inner.levels().to_vec()
    }

    #[getter]
    fn is_paired(&self) -> bool {
        self.inner.is_paired()
    }

    /// Row-major counts.
    fn counts(&self) -> Vec<u64> {
        self.inner.counts().to_vec()
    }

    fn filter_celltype(&self, keep: &str) -> PyResult<Self> {
        Ok(PyCellTable { inner: self.inner.filter_celltype(keep).map_err(py_err)? })
    }

    fn select_markers(&self, names: Vec<String>) -> PyResult<Self> {
        Ok(PyCellTable { inner: self.inner.select_markers(&names).map_err(py_err)? })
    }

    fn subsample_per_donor(&self, k: usize, seed: u64) -> PyResult<Self> {
        Ok(PyCellTable { inner: self.inner.subsample_per_donor(k, seed).map_err(py_err)? })
    }

    /// Row-major `asinh(count / cofactor)`.
    #[pyo3(signature = (cofactor=5.0))]
    fn arcsinh_transform(&self, cofactor: f64) -> PyResult<Vec<f64>> {
        Ok(self.inner.arcsinh_transform(cofactor).map_err(py_err)?.values().to_vec())
    }

    fn __repr__(&self) -> String {
        format!(
            "CellTable(cells={}, markers={:?}, donors={})",
            self.inner.n_cells(),
            self.inner.marker_names(),
            self.inner.n_donors()
        )
    }
}

/// HMC settings.
#[pyclass(name = "SamplerConfig", module = "cytomix", get_all, set_all, from_py_object)]
#[derive(Clone)]
struct PySamplerConfig {
    chains: usize,
    iterations: usize,
    warmup: usize,
    seed: u64,
    target_accept: f64,
    max_leapfrog_steps: usize,
    path_length: f64,
    adapt_metric: bool,
    threads: Option<usize>,
}

#[pymethods]
impl PySamplerConfig {
    #[new]
    #[pyo3(signature = (chains=8, iterations=325, warmup=200, seed=1, target_accept=0.8, max_leapfrog_steps=256, path_length=2.0, adapt_metric=true, threads=None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        chains: usize,
        iterations: usize,
        warmup: usize,
        seed: u64,
        target_accept: f64,
        max_leapfrog_steps: usize,
        path_length: f64,
        adapt_metric: bool,
        threads: Option<usize>,
    ) -> Self {
        PySamplerConfig {
            chains,
            iterations,
            warmup,
            seed,
            target_accept,
            max_leapfrog_steps,
            path_length,
            adapt_metric,
            threads,
        }
    }
}

impl PySamplerConfig {
    fn to_core(&self) -> cytomix_core::SamplerConfig {
        cytomix_core::SamplerConfig {
            chains: self.chains,
            iterations: self.iterations,
            warmup: self.warmup,
            seed: self.seed,
            target_accept: self.target_accept,
            max_leapfrog_steps: self.max_leapfrog_steps,
            mass_matrix: if self.adapt_metric { MassMatrix::DiagonalAdapted } else { MassMatrix::Identity },
            path_length: self.path_length,
            init_step_size: None,
            threads: self.threads,
        }
    }
}

/// Posterior draws in long form: chain, iteration and one value per parameter.
#[pyclass(name = "Draws", module = "cytomix", frozen)]
struct PyDraws {
    inner: PosteriorDraws,
}

#[pymethods]
impl PyDraws {
    #[staticmethod]
    fn from_csv(path: &str) -> PyResult<Self> {
        Ok(PyDraws { inner: PosteriorDraws::load_csv(path).map_err(py_err)? })
    }

    fn to_csv(&self, path: &str) -> PyResult<()> {
        self.inner.save_csv(path).map_err(py_err)
    }

    #[getter]
    fn names(&self) -> Vec<String> {
        self.inner.names().to_vec()
    }

    #[getter]
    fn n_draws(&self) -> usize {
        self.inner.n_draws()
    }

    fn column(&self, name: &str) -> PyResult<Vec<f64>> {
        self.inner.column_by_name(name).map_err(py_err)
    }

    /// `{"parameter": [...], "rhat": [...], "ess": [...]}`.
    fn diagnostics<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        d.set_item("parameter", self.inner.names().to_vec())?;
        let rhat = compute_rhat(&self.inner).unwrap_or_else(|_| vec![f64::NAN; self.inner.n_params()]);
        d.set_item("rhat", rhat)?;
        d.set_item("ess", compute_ess(&self.inner))?;
        Ok(d)
    }

    fn __len__(&self) -> usize {
        self.inner.n_draws()
    }

    fn __repr__(&self) -> String {
        format!("Draws(draws={}, parameters={})", self.inner.n_draws(), self.inner.n_params())
    }
}

fn rows_to_py<'py>(py: Python<'py>, rows: &[SummaryRow]) -> PyResult<Vec<Bound<'py, PyDict>>> {
    rows.iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("marker", &r.marker)?;
            d.set_item("quantity", &r.quantity)?;
            d.set_item("median", r.median)?;
            d.set_item("q025", r.q025)?;
            d.set_item("q975", r.q975)?;
            Ok(d)
        })
        .collect()
}

fn parameterization(name: &str) -> PyResult<Parameterization> {
    match name {
        "non-centered" => Ok(Parameterization::NonCentered),
        "centered" => Ok(Parameterization::Centered),
        other => Err(PyValueError::new_err(format!(
            "parameterization must be 'non-centered' or 'centered', got '{other}'"
        ))),
    }
}

fn sampler_or_default(s: Option<PySamplerConfig>) -> cytomix_core::SamplerConfig {
    s.map(|s| s.to_core()).unwrap_or_default()
}

/// Fits the Poisson log-normal mixed model to every marker of `table`.
#[pyfunction]
#[pyo3(signature = (table, sampler=None, parameterization="non-centered", beta_sd=7.0, sigma_scale=2.5, lkj_eta=1.0))]
fn fit_plmm(
    table: &PyCellTable,
    sampler: Option<PySamplerConfig>,
    parameterization: &str,
    beta_sd: f64,
    sigma_scale: f64,
    lkj_eta: f64,
) -> PyResult<PyDraws> {
    let priors = PlmmPriors { beta_sd, sigma_scale, lkj_eta };
    let model = Plmm::new(&table.inner, priors, self::parameterization(parameterization)?).map_err(py_err)?;
    let config = sampler_or_default(sampler);
    let (inits, _) = model.initial_values(config.chains, config.seed);
    let (draws, _) = run_chains(&model, &config, &inits, None).map_err(py_err)?;
    Ok(PyDraws { inner: draws })
}

fn llmm_data(table: &PyCellTable, cofactor: f64, exclude: &[String]) -> PyResult<LlmmData> {
    let t = table.inner.arcsinh_transform(cofactor).map_err(py_err)?;
    let data = LlmmData::from_transformed(&t).map_err(py_err)?;
    if exclude.is_empty() {
        Ok(data)
    } else {
        data.exclude_markers(exclude).map_err(py_err)
    }
}

/// Fits the logistic mixed model predicting the condition from
/// arcsinh-transformed expression.
#[pyfunction]
#[pyo3(signature = (table, sampler=None, cofactor=5.0, exclude=Vec::new()))]
fn fit_llmm(
    table: &PyCellTable,
    sampler: Option<PySamplerConfig>,
    cofactor: f64,
    exclude: Vec<String>,
) -> PyResult<PyDraws> {
    let model = Llmm::new(llmm_data(table, cofactor, &exclude)?, PlmmPriors::default()).map_err(py_err)?;
    let config = sampler_or_default(sampler);
    let inits = model.initial_values(config.chains, config.seed);
    let (draws, _) = run_chains(&model, &config, &inits, None).map_err(py_err)?;
    Ok(PyDraws { inner: draws })
}

/// Method-of-moments estimate of the logistic mixed model, as a dict.
#[pyfunction]
#[pyo3(signature = (table, cofactor=5.0, exclude=Vec::new()))]
fn llmm_mom<'py>(
    py: Python<'py>,
    table: &PyCellTable,
    cofactor: f64,
    exclude: Vec<String>,
) -> PyResult<Bound<'py, PyDict>> {
    let est = llmm_mom_fit(&llmm_data(table, cofactor, &exclude)?).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("terms", est.terms.clone())?;
    d.set_item("beta", est.beta_hat.clone())?;
    d.set_item("se", est.se.clone())?;
    d.set_item("cov", est.cov_hat.clone())?;
    d.set_item("flags", est.flags())?;
    d.set_item("warnings", est.warnings.clone())?;
    Ok(d)
}

/// Fixed-effect and scale summaries of a PLMM fit.
#[pyfunction]
fn plmm_summary<'py>(py: Python<'py>, draws: &PyDraws, markers: Vec<String>) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let mut rows = fixed_effect_summary(&draws.inner, &markers).map_err(py_err)?;
    rows.extend(scale_summary(&draws.inner, &markers).map_err(py_err)?);
    rows_to_py(py, &rows)
}

/// Fixed-effect summary of an LLMM fit; terms are `intercept` and the markers.
#[pyfunction]
fn llmm_summary<'py>(py: Python<'py>, draws: &PyDraws, markers: Vec<String>) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let mut terms = vec!["intercept".to_string()];
    terms.extend(markers);
    rows_to_py(py, &llmm_fixed_effect_summary(&draws.inner, &terms).map_err(py_err)?)
}

/// `{(marker_i, marker_j): p̂}` for every pair `i < j`: the posterior
/// probability that the correlation is higher in the second condition.
#[pyfunction]
fn corr_increase(draws: &PyDraws, markers: Vec<String>) -> PyResult<HashMap<(String, String), f64>> {
    let s = corr_increase_probability(&draws.inner, &markers).map_err(py_err)?;
    let mut out = HashMap::new();
    for a in 0..markers.len() {
        for b in a + 1..markers.len() {
            out.insert((markers[a].clone(), markers[b].clone()), s.get(a, b));
        }
    }
    Ok(out)
}

/// Posterior predictive check: `{name: (observed, [replicated...])}` for each
/// subset given as `{name: "m1:gt_median&m2:eq_zero"}`.
#[pyfunction]
#[pyo3(signature = (draws, table, subsets, replicates=500, seed=1))]
fn posterior_predictive_check(
    draws: &PyDraws,
    table: &PyCellTable,
    subsets: HashMap<String, String>,
    replicates: usize,
    seed: u64,
) -> PyResult<HashMap<String, (f64, Vec<f64>)>> {
    let mut names: Vec<&String> = subsets.keys().collect();
    names.sort();
    let specs = names
        .iter()
        .map(|n| SubsetSpec::parse(n.as_str(), &subsets[*n]))
        .collect::<Result<Vec<_>, _>>()
        .map_err(py_err)?;
    let results = posterior_predictive(&draws.inner, &table.inner, &specs, replicates, seed).map_err(py_err)?;
    Ok(results.into_iter().map(|r| (r.stat_name, (r.observed, r.replicated))).collect())
}

/// Simulates a table from generator settings in JSON, in the layout of
/// `truth.json`'s `generator` field.
#[pyfunction]
fn simulate(generator_json: &str, seed: u64) -> PyResult<PyCellTable> {
    let generator: Generator = serde_json::from_str(generator_json)
        .map_err(|e| PyValueError::new_err(format!("generator: {e}")))?;
    let sim = GroundTruth::new(generator, seed).simulate().map_err(py_err)?;
    Ok(PyCellTable { inner: sim.table })
}

/// Population logistic slopes on `(Y1, Y2)`, or on `Y2` alone,
/// implied by one of the three causal graphs.
#[pyfunction]
#[pyo3(signature = (kind, a, b, c, include_y1=true))]
fn dag_coefficients(kind: &str, a: f64, b: f64, c: f64, include_y1: bool) -> PyResult<Vec<f64>> {
    let kind = match kind {
        "no_confounder" => DagKind::NoConfounder,
        "pipe" => DagKind::Pipe,
        "collider" => DagKind::Collider,
        other => {
            return Err(PyValueError::new_err(format!(
                "kind must be no_confounder, pipe or collider, got '{other}'"
            )))
        }
    };
    dag_logit_coefficients(&DagScenario::new(kind, a, b, c), include_y1).map_err(py_err)
}

#[pymodule]
fn cytomix(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyCellTable>()?;
    m.add_class::<PySamplerConfig>()?;
    m.add_class::<PyDraws>()?;
    m.add_function(wrap_pyfunction!(fit_plmm, m)?)?;
    m.add_function(wrap_pyfunction!(fit_llmm, m)?)?;
    m.add_function(wrap_pyfunction!(llmm_mom, m)?)?;
    m.add_function(wrap_pyfunction!(plmm_summary, m)?)?;
    m.add_function(wrap_pyfunction!(llmm_summary, m)?)?;
    m.add_function(wrap_pyfunction!(corr_increase, m)?)?;
    m.add_function(wrap_pyfunction!(posterior_predictive_check, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(dag_coefficients, m)?)?;
    Ok(())
}
