//! Python bindings. Tensors cross the boundary as nested lists of floats.

use pyo3::create_exception;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use superlora::adapter::{self, AdapterState, SuperLoraConfig};
use superlora::geometry::{self, DistanceNorm};
use superlora::grouping::{self, WeightManifest};
use superlora::projection::{make_projection, ProjectionSpec};
use superlora::rng::derive_seed;
use superlora::trainer::{self, SyntheticTask, ToyModel, TrainConfig};
use superlora::{DenseTensor, Error};

create_exception!(pysuperlora, InfeasibleError, PyValueError);
create_exception!(pysuperlora, NumericalError, PyValueError);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Infeasible(_) => InfeasibleError::new_err(e.to_string()),
        Error::SvdNoConvergence { .. } | Error::Numerical(_) | Error::Diverged { .. } => {
            NumericalError::new_err(e.to_string())
        }
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix_from_rows(rows: Vec<Vec<f64>>) -> PyResult<DenseTensor> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    let n = rows.len();
    DenseTensor::from_dims(&[n, cols], rows.concat()).map_err(to_py)
}

fn matrix_to_rows(t: &DenseTensor) -> Vec<Vec<f64>> {
    let cols = t.dims()[1];
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

/// Ordered list of named weight matrices.
#[pyclass(name = "Manifest", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyManifest(WeightManifest);

#[pymethods]
impl PyManifest {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        WeightManifest::from_json(text).map(Self).map_err(to_py)
    }

    #[staticmethod]
    fn vit_base_qv() -> Self {
        Self(grouping::vit_base_qv())
    }

    #[staticmethod]
    fn unet_qv() -> Self {
        Self(grouping::unet_qv())
    }

    fn to_json(&self) -> String {
        self.0.to_json()
    }

    fn names(&self) -> Vec<String> {
        self.0.entries().iter().map(|e| e.name.clone()).collect()
    }

    fn shapes(&self) -> Vec<(usize, usize)> {
        self.0
            .entries()
            .iter()
            .map(|e| (e.shape[0], e.shape[1]))
            .collect()
    }

    fn total_elements(&self) -> usize {
        self.0.total_elements()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

#[pyclass(name = "Config", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyConfig(SuperLoraConfig);

#[pymethods]
impl PyConfig {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        SuperLoraConfig::from_json(text).map(Self).map_err(to_py)
    }

    #[staticmethod]
    #[pyo3(signature = (weights, rank, alpha = 1.0))]
    fn lora(weights: usize, rank: usize, alpha: f64) -> Self {
        Self(SuperLoraConfig::lora(weights, rank, alpha))
    }

    #[staticmethod]
    fn dense(weights: usize) -> Self {
        Self(SuperLoraConfig::dense(weights))
    }

    fn to_json(&self) -> String {
        self.0.to_json()
    }

    #[getter]
    fn variant(&self) -> &'static str {
        adapter::classify_variant(&self.0).name()
    }

    fn __repr__(&self) -> String {
        format!("Config({})", self.0.to_json())
    }
}

/// Initialized adapter: trainable factors plus frozen projections.
#[pyclass(name = "Adapter")]
struct PyAdapter(AdapterState);

#[pymethods]
impl PyAdapter {
    #[new]
    #[pyo3(signature = (config, manifest, seed = 0))]
    fn new(config: &PyConfig, manifest: &PyManifest, seed: u64) -> PyResult<Self> {
        adapter::init_adapter(&config.0, &manifest.0, seed)
            .map(Self)
            .map_err(to_py)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        adapter::load_adapter(path).map(Self).map_err(to_py)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        adapter::save_adapter(&self.0, path).map_err(to_py)
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.0.variant().name()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.0.param_count()
    }

    fn config(&self) -> PyConfig {
        PyConfig(self.0.config().clone())
    }

    fn group_dims(&self) -> Vec<Vec<usize>> {
        self.0
            .plan()
            .groups
            .iter()
            .map(|g| g.target_shape.dims().to_vec())
            .collect()
    }

    fn params(&self) -> Vec<f64> {
        self.0.params()
    }

    fn set_params(&mut self, values: Vec<f64>) -> PyResult<()> {
        self.0.set_params(&values).map_err(to_py)
    }

    /// Weight updates keyed by weight name, as lists of rows.
    fn deltas<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let out = PyDict::new(py);
        for (name, t) in adapter::materialize_deltas(&self.0).map_err(to_py)? {
            out.set_item(name, matrix_to_rows(&t))?;
        }
        Ok(out)
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.0 == other.0
    }
}

#[pyfunction]
fn count_params(config: &PyConfig, manifest: &PyManifest) -> PyResult<usize> {
    adapter::count_params(&config.0, &manifest.0).map_err(to_py)
}

#[pyfunction]
fn regular_dims(n: usize, order: usize) -> Vec<usize> {
    grouping::regular_dims(n, order).dims().to_vec()
}

/// Apply the frozen projection built from `seed` to `x`.
#[pyfunction]
#[pyo3(signature = (mode, x, n_out, seed = 0))]
fn project(mode: &str, x: Vec<f64>, n_out: usize, seed: u64) -> PyResult<Vec<f64>> {
    let mode = mode.parse().map_err(to_py)?;
    let p = make_projection(ProjectionSpec {
        mode,
        seed,
        n_in: x.len(),
        n_out,
    })
    .map_err(to_py)?;
    p.apply(&x).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (a, b, k = 5, norm = "frobenius"))]
fn analyze<'py>(
    py: Python<'py>,
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    k: usize,
    norm: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let norm = match norm {
        "frobenius" => DistanceNorm::Frobenius,
        "spectral" => DistanceNorm::Spectral,
        other => return Err(PyValueError::new_err(format!("unknown norm `{other}`"))),
    };
    let r =
        geometry::analyze(&matrix_from_rows(a)?, &matrix_from_rows(b)?, k, norm).map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("d_left", r.d_left)?;
    out.set_item("d_right", r.d_right)?;
    out.set_item("d_euclid", r.d_euclid)?;
    out.set_item("k", r.k)?;
    Ok(out)
}

/// Train on the synthetic transfer task; seeds are derived as in the CLI.
/// Returns the per-step losses and the trained adapter.
#[pyfunction]
#[pyo3(signature = (config, train_json, seed = 0))]
fn train_toy(config: &PyConfig, train_json: &str, seed: u64) -> PyResult<(Vec<f64>, PyAdapter)> {
    let mut cfg = TrainConfig::from_json(train_json).map_err(to_py)?;
    cfg.seed = seed;
    let model = ToyModel::new(cfg.model.clone(), seed).map_err(to_py)?;
    let task = SyntheticTask::new(&model, &cfg.task, derive_seed(seed, 1)).map_err(to_py)?;
    let mut state =
        adapter::init_adapter(&config.0, &model.manifest(), derive_seed(seed, 2)).map_err(to_py)?;
    let report = trainer::train(&mut state, &model, &task, &cfg).map_err(to_py)?;
    Ok((
        report.history.iter().map(|m| m.loss).collect(),
        PyAdapter(state),
    ))
}

#[pymodule]
fn pysuperlora(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyManifest>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyAdapter>()?;
    m.add_function(wrap_pyfunction!(count_params, m)?)?;
    m.add_function(wrap_pyfunction!(regular_dims, m)?)?;
    m.add_function(wrap_pyfunction!(project, m)?)?;
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    m.add_function(wrap_pyfunction!(train_toy, m)?)?;
    m.add("InfeasibleError", m.py().get_type::<InfeasibleError>())?;
    m.add("NumericalError", m.py().get_type::<NumericalError>())?;
    Ok(())
}
