//! Python bindings for the gridflow library.
//!
//! Exposes case loading, the Newton-Raphson solver, dataset generation,
//! model training, model inference, and Monte-Carlo probabilistic power
//! flow. Large reports cross the boundary as JSON strings so Python-side
//! consumers can use plain `json.loads`.

use std::path::Path;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use gridflow::grid::{ImportOptions, NetworkCase, PreparedGrid};
use gridflow::metrics::AccuracyThresholds;
use gridflow::nn::Model as CoreModel;
use gridflow::powerflow::{self, SolverSettings};
use gridflow::ppf::{export_report, run_ppf, PpfEngine, PpfReport};
use gridflow::sampling::{build_dataset, Dataset, SplitSpec, UncertaintySpec};
use gridflow::training::{self, TrainConfig};

fn runtime_err(err: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(err.to_string())
}

/// A validated, per-unit network ready for solving.
#[pyclass(frozen)]
struct Grid {
    inner: PreparedGrid,
    name: String,
}

/// One converged power flow solution.
#[pyclass(frozen)]
struct Solution {
    #[pyo3(get)]
    v: Vec<f64>,
    #[pyo3(get)]
    theta: Vec<f64>,
    #[pyo3(get)]
    iterations: u32,
    #[pyo3(get)]
    max_mismatch: f64,
}

#[pymethods]
impl Grid {
    #[getter]
    fn name(&self) -> &str {
        &self.name
    }

    #[getter]
    fn n_bus(&self) -> usize {
        self.inner.n_bus
    }

    #[getter]
    fn n_branch(&self) -> usize {
        self.inner.n_branch()
    }

    /// Base-case per-unit injections as `(p, q)` lists.
    fn base_injections(&self) -> (Vec<f64>, Vec<f64>) {
        (self.inner.base_p_inj.clone(), self.inner.base_q_inj.clone())
    }

    /// Solve the AC power flow for the given per-unit injections
    /// (defaults to the base case).
    #[pyo3(signature = (p=None, q=None))]
    fn solve(&self, p: Option<Vec<f64>>, q: Option<Vec<f64>>) -> PyResult<Solution> {
        let p = p.unwrap_or_else(|| self.inner.base_p_inj.clone());
        let q = q.unwrap_or_else(|| self.inner.base_q_inj.clone());
        if p.len() != self.inner.n_bus || q.len() != self.inner.n_bus {
            return Err(PyValueError::new_err(format!(
                "expected {} injections per list",
                self.inner.n_bus
            )));
        }
        let sol = powerflow::solve(&self.inner, &p, &q, &SolverSettings::default())
            .map_err(runtime_err)?;
        Ok(Solution {
            v: sol.v,
            theta: sol.theta,
            iterations: sol.iterations,
            max_mismatch: sol.max_mismatch,
        })
    }
}

/// A trained voltage-prediction model.
#[pyclass(frozen, name = "Model")]
struct Model {
    inner: CoreModel,
}

#[pymethods]
impl Model {
    /// Load a model from its binary file.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let inner = CoreModel::load(Path::new(path)).map_err(runtime_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn mode(&self) -> String {
        self.inner.meta.mode.clone()
    }

    #[getter]
    fn case_name(&self) -> String {
        self.inner.meta.case_name.clone()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.meta.seed
    }

    #[getter]
    fn layer_sizes(&self) -> Vec<usize> {
        self.inner.network.layer_sizes()
    }

    /// Predict raw outputs for raw inputs; one sample per inner list.
    fn predict(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let n_in = self.inner.network.n_inputs();
        let m = rows.len();
        let mut x = ndarray::Array2::zeros((n_in, m));
        for (s, row) in rows.iter().enumerate() {
            if row.len() != n_in {
                return Err(PyValueError::new_err(format!(
                    "sample {s} has {} features, expected {n_in}",
                    row.len()
                )));
            }
            for (f, value) in row.iter().enumerate() {
                x[(f, s)] = *value;
            }
        }
        let y = self.inner.predict_raw(&x.view());
        Ok((0..m).map(|s| y.column(s).to_vec()).collect())
    }
}

/// Load and validate a JSON network case (simplified import).
#[pyfunction]
fn load_case(path: &str) -> PyResult<Grid> {
    let case = NetworkCase::load(Path::new(path), ImportOptions::default()).map_err(runtime_err)?;
    let inner = PreparedGrid::new(&case).map_err(runtime_err)?;
    Ok(Grid {
        inner,
        name: case.name,
    })
}

/// Sample injections, solve each with Newton-Raphson, and write
/// `<out_dir>/dataset.gfd`. Returns a JSON summary string.
#[pyfunction]
fn generate_dataset(
    case_path: &str,
    spec_path: &str,
    n: usize,
    seed: u64,
    train: usize,
    val: usize,
    test: usize,
    out_dir: &str,
) -> PyResult<String> {
    let grid = load_case(case_path)?;
    let spec = UncertaintySpec::load(Path::new(spec_path)).map_err(runtime_err)?;
    let split = SplitSpec { train, val, test };
    let dataset = build_dataset(
        &grid.inner,
        &spec,
        n,
        seed,
        split,
        &SolverSettings::default(),
    )
    .map_err(runtime_err)?;
    std::fs::create_dir_all(out_dir).map_err(runtime_err)?;
    let file = Path::new(out_dir).join("dataset.gfd");
    dataset.save(&file).map_err(runtime_err)?;
    Ok(serde_json::json!({
        "case": dataset.case_name,
        "n_kept": dataset.n_samples(),
        "discarded": dataset.discarded,
        "dataset": file.display().to_string(),
    })
    .to_string())
}

/// Train a model on a generated dataset and save it to `out_path`.
/// `config_json` holds a training configuration (all fields optional).
/// Returns a JSON summary string with the history tail and test indexes.
#[pyfunction]
fn train_model(
    case_path: &str,
    data_dir: &str,
    config_json: &str,
    out_path: &str,
) -> PyResult<String> {
    let grid = load_case(case_path)?;
    let config: TrainConfig =
        serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let dataset =
        Dataset::load(&Path::new(data_dir).join("dataset.gfd")).map_err(runtime_err)?;
    let (model, history) = training::train(&config, &dataset, &grid.inner).map_err(runtime_err)?;
    model.save(Path::new(out_path)).map_err(runtime_err)?;
    let test = training::evaluate_on_range(
        &model.network,
        &dataset,
        &grid.inner,
        dataset.test_range(),
        &config.thresholds,
    );
    Ok(serde_json::json!({
        "mode": config.mode.to_string(),
        "n_epoch": history.n_epoch,
        "stop_reason": history.stop_reason,
        "best_val_loss": history.best_val_loss,
        "accuracy_epoch": history.accuracy_epoch,
        "test_indexes": test,
        "model": out_path,
    })
    .to_string())
}

/// Evaluate a trained model on the test split of a dataset; returns the
/// accuracy-index report as a JSON string.
#[pyfunction]
fn evaluate_model(model_path: &str, case_path: &str, data_dir: &str) -> PyResult<String> {
    let grid = load_case(case_path)?;
    let model = CoreModel::load(Path::new(model_path)).map_err(runtime_err)?;
    let dataset =
        Dataset::load(&Path::new(data_dir).join("dataset.gfd")).map_err(runtime_err)?;
    let report = training::evaluate_on_range(
        &model.network,
        &dataset,
        &grid.inner,
        dataset.test_range(),
        &AccuracyThresholds::default(),
    );
    serde_json::to_string(&report).map_err(runtime_err)
}

/// Monte-Carlo probabilistic power flow. `engine` is `"dnn"` (requires
/// `model_path`) or `"nr"`. Returns the full report as a JSON string and
/// optionally exports it to `out_dir`.
#[pyfunction]
#[pyo3(signature = (case_path, spec_path, n, seed, engine, model_path=None, bins=None, out_dir=None))]
#[allow(clippy::too_many_arguments)]
fn run_ppf_py(
    case_path: &str,
    spec_path: &str,
    n: usize,
    seed: u64,
    engine: &str,
    model_path: Option<&str>,
    bins: Option<usize>,
    out_dir: Option<&str>,
) -> PyResult<String> {
    let grid = load_case(case_path)?;
    let spec = UncertaintySpec::load(Path::new(spec_path)).map_err(runtime_err)?;
    let model = match (engine, model_path) {
        ("dnn", Some(path)) => Some(CoreModel::load(Path::new(path)).map_err(runtime_err)?),
        ("dnn", None) => {
            return Err(PyValueError::new_err("engine 'dnn' requires model_path"));
        }
        ("nr", _) => None,
        (other, _) => {
            return Err(PyValueError::new_err(format!(
                "unknown engine '{other}' (expected 'dnn' or 'nr')"
            )));
        }
    };
    let settings = SolverSettings::default();
    let ppf_engine = match &model {
        Some(m) => PpfEngine::Model(m),
        None => PpfEngine::Solver(&settings),
    };
    let (statistics, timing) =
        run_ppf(ppf_engine, &grid.inner, &spec, n, seed, bins).map_err(runtime_err)?;
    let report = PpfReport {
        statistics,
        timing,
        metrics: None,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(runtime_err)?;
        export_report(&report, Path::new(dir)).map_err(runtime_err)?;
    }
    serde_json::to_string(&report).map_err(runtime_err)
}

#[pymodule]
fn gridflow_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Grid>()?;
    m.add_class::<Solution>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(load_case, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_model, m)?)?;
    m.add_function(wrap_pyfunction!(run_ppf_py, m)?)?;
    Ok(())
}
