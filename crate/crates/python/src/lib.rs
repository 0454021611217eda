use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyString;
use serde::de::DeserializeOwned;
use serde::Serialize;

use ssm_peft::adapters::{apply_adapter, AdapterSpec};
use ssm_peft::analysis::{self, builtin_config, ArchConfig};
use ssm_peft::io::{load_checkpoint, save_checkpoint, Checkpoint, ExperimentConfig};
use ssm_peft::model::MambaModel;
use ssm_peft::tasks::{TaskInstance, TaskSpec};
use ssm_peft::trainer::{self, TaskData, TrainConfig};
use ssm_peft::{cli, theory, Error};

create_exception!(ssm_peft, SsmPeftError, PyException);

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config { .. } | Error::Lookup { .. } | Error::Json(_) => PyValueError::new_err(e.to_string()),
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => SsmPeftError::new_err(e.to_string()),
    }
}

/// Converts a Python object to `T` through its JSON form.
fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let json = obj.py().import("json")?;
    let text: String = json.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// A builtin name such as `"mamba-130m"` or a dict with the shape fields.
fn arch_arg(obj: &Bound<'_, PyAny>) -> PyResult<ArchConfig> {
    if let Ok(name) = obj.cast::<PyString>() {
        return builtin_config(name.to_str()?).map_err(py_err);
    }
    from_py(obj)
}

/// A method name or a dict with `method` and its hyperparameters.
fn spec_arg(obj: &Bound<'_, PyAny>) -> PyResult<AdapterSpec> {
    if let Ok(name) = obj.cast::<PyString>() {
        let method = name.to_str()?.parse().map_err(py_err)?;
        return Ok(AdapterSpec::default_for(method));
    }
    let spec: AdapterSpec = from_py(obj)?;
    spec.validate().map_err(py_err)?;
    Ok(spec)
}

/// A Mamba-style model with an optional adapter attached.
#[pyclass(name = "Model", module = "ssm_peft", skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: MambaModel,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (arch, seed = 0))]
    fn new(arch: &Bound<'_, PyAny>, seed: u64) -> PyResult<Self> {
        let arch = arch_arg(arch)?;
        Ok(PyModel {
            inner: MambaModel::init(&arch, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (d_model, n_layer, d_state, vocab, seed = 0))]
    fn toy(d_model: usize, n_layer: usize, d_state: usize, vocab: usize, seed: u64) -> PyResult<Self> {
        let arch = ArchConfig::toy(d_model, n_layer, d_state, vocab);
        Ok(PyModel {
            inner: MambaModel::init(&arch, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let inner = load_checkpoint(path).and_then(Checkpoint::into_model).map_err(py_err)?;
        Ok(PyModel { inner })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(path, &Checkpoint::from_model(&self.inner)).map_err(py_err)
    }

    /// New model with the backbone frozen and `spec`'s parameters added.
    #[pyo3(signature = (spec, seed = 0))]
    fn with_adapter(&self, spec: &Bound<'_, PyAny>, seed: u64) -> PyResult<Self> {
        let spec = spec_arg(spec)?;
        Ok(PyModel {
            inner: apply_adapter(&self.inner, &spec, seed).map_err(py_err)?,
        })
    }

    /// Logits as a `T × vocab` list of rows.
    fn forward(&self, tokens: Vec<usize>) -> PyResult<Vec<Vec<f64>>> {
        let logits = self.inner.forward(&tokens).map_err(py_err)?;
        let vocab = logits.shape()[1];
        Ok(logits.data().chunks(vocab).map(<[f64]>::to_vec).collect())
    }

    /// Mean cross-entropy over `(position, token)` targets.
    fn loss(&self, tokens: Vec<usize>, targets: Vec<(usize, usize)>) -> PyResult<f64> {
        Ok(self.inner.loss_and_grads(&tokens, &targets).map_err(py_err)?.loss)
    }

    fn gradient_check(&self, py: Python<'_>, tokens: Vec<usize>, targets: Vec<(usize, usize)>) -> PyResult<Py<PyAny>> {
        let r = self.inner.gradient_check(&tokens, &targets, 1e-5).map_err(py_err)?;
        Ok((r.max_rel_error, r.entries_checked).into_pyobject(py)?.into_any().unbind())
    }

    #[getter]
    fn arch<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.arch)
    }

    #[getter]
    fn trainable_count(&self) -> usize {
        self.inner.params.trainable_count()
    }

    #[getter]
    fn total_count(&self) -> usize {
        self.inner.params.total_count()
    }

    fn trainable_names(&self) -> Vec<String> {
        self.inner.params.trainable_names()
    }

    /// Copy of one parameter as a flat list.
    fn parameter(&self, name: &str) -> PyResult<Vec<f64>> {
        Ok(self.inner.params.tensor(name).map_err(py_err)?.data().to_vec())
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(arch='{}', trainable={}, total={})",
            self.inner.arch.name,
            self.inner.params.trainable_count(),
            self.inner.params.total_count()
        )
    }
}

#[pyfunction]
fn builtin_configs<'py>(py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &analysis::builtin_configs())
}

#[pyfunction]
fn count_params<'py>(py: Python<'py>, arch: &Bound<'py, PyAny>, spec: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
    let r = analysis::count_params(&arch_arg(arch)?, &spec_arg(spec)?).map_err(py_err)?;
    to_py(py, &r)
}

#[pyfunction]
#[pyo3(signature = (arch, spec, seq_len = 128))]
fn estimate_flops<'py>(
    py: Python<'py>,
    arch: &Bound<'py, PyAny>,
    spec: &Bound<'py, PyAny>,
    seq_len: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let r = analysis::estimate_flops(&arch_arg(arch)?, &spec_arg(spec)?, seq_len).map_err(py_err)?;
    to_py(py, &r)
}

/// The randomized equivalence suite.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn verify(py: Python<'_>, seed: u64) -> PyResult<Bound<'_, PyAny>> {
    let out = py.detach(|| theory::run_all(seed)).map_err(py_err)?;
    to_py(py, &out)
}

#[pyfunction]
fn generate<'py>(py: Python<'py>, spec: &Bound<'py, PyAny>, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let spec: TaskSpec = from_py(spec)?;
    to_py(py, &spec.generate(seed).map_err(py_err)?)
}

#[pyfunction]
fn dataset<'py>(py: Python<'py>, spec: &Bound<'py, PyAny>, first_seed: u64, n: usize) -> PyResult<Bound<'py, PyAny>> {
    let spec: TaskSpec = from_py(spec)?;
    to_py(py, &spec.dataset(first_seed, n).map_err(py_err)?)
}

/// Trains `model` in place of a copy; returns the trained model and metrics.
#[pyfunction]
fn train<'py>(
    py: Python<'py>,
    model: &PyModel,
    spec: &Bound<'py, PyAny>,
    train: &Bound<'py, PyAny>,
    val: &Bound<'py, PyAny>,
    config: &Bound<'py, PyAny>,
) -> PyResult<(PyModel, Bound<'py, PyAny>)> {
    let spec = spec_arg(spec)?;
    let data = TaskData {
        train: from_py::<Vec<TaskInstance>>(train)?,
        val: from_py::<Vec<TaskInstance>>(val)?,
    };
    let cfg: TrainConfig = from_py(config)?;
    cfg.validate().map_err(py_err)?;
    let mut m = model.inner.clone();
    let metrics = py.detach(|| trainer::train(&mut m, &spec, &data, &cfg)).map_err(py_err)?;
    Ok((PyModel { inner: m }, to_py(py, &metrics)?))
}

/// Runs a full experiment config, writing artifacts to its output directory.
#[pyfunction]
fn run_experiment<'py>(py: Python<'py>, config: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
    let value: serde_json::Value = from_py(config)?;
    let cfg = ExperimentConfig::from_value(&value).map_err(py_err)?;
    let metrics = py.detach(|| cli::run_experiment(&cfg)).map_err(py_err)?;
    to_py(py, &metrics)
}

#[pymodule]
#[pyo3(name = "ssm_peft")]
fn ssm_peft_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SsmPeftError", m.py().get_type::<SsmPeftError>())?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(builtin_configs, m)?)?;
    m.add_function(wrap_pyfunction!(count_params, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_flops, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
