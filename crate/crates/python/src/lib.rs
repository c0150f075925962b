//! Python bindings: datasets, connectome measures, training, prediction and
//! cross-validation.
//!
//! Matrices cross the boundary as lists of rows; reports and logs come back
//! as plain dicts and lists.

use std::path::PathBuf;

use l2skd_core::connectome::{self, ConnectivityMatrix};
use l2skd_core::dataio::{self, SyntheticConfig};
use l2skd_core::diffmath::Tensor;
use l2skd_core::evaluation::{self, CrossValidationOptions};
use l2skd_core::losses::HyperParams;
use l2skd_core::pipeline::{self, StudentArtifact, StudentInit, TeacherArtifact, TrainLog, Variant};
use l2skd_core::Error;
use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::NonFinite { .. } => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for l2skd_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let n = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if let Some(i) = rows.iter().position(|r| r.len() != c) {
        return Err(PyValueError::new_err(format!("row {i} has {} entries, expected {c}", rows[i].len())));
    }
    Tensor::from_vec(n, c, rows.concat()).py()
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.row_iter().map(<[f64]>::to_vec).collect()
}

fn matrix(m: Vec<Vec<f64>>) -> PyResult<ConnectivityMatrix> {
    ConnectivityMatrix::new(tensor(m)?).py()
}

fn variant(name: &str) -> PyResult<Variant> {
    name.parse().py()
}

fn json_to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| py_err(e.into()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Defaults overlaid with keyword overrides, e.g. `iterations=50, n_z=8`.
fn hyperparams(base: &HyperParams, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<HyperParams> {
    let mut value = serde_json::to_value(base).map_err(|e| py_err(e.into()))?;
    if let Some(kw) = overrides {
        let py = kw.py();
        let text: String = py.import("json")?.call_method1("dumps", (kw,))?.extract()?;
        let extra: serde_json::Map<String, serde_json::Value> =
            serde_json::from_str(&text).map_err(|e| py_err(e.into()))?;
        let fields = value.as_object_mut().unwrap();
        for (k, v) in extra {
            if !fields.contains_key(&k) {
                return Err(PyValueError::new_err(format!("unknown hyperparameter {k:?}")));
            }
            fields.insert(k, v);
        }
    }
    let hp: HyperParams = serde_json::from_value(value).map_err(|e| py_err(e.into()))?;
    hp.validate().py()?;
    Ok(hp)
}

fn log_records<'py>(py: Python<'py>, log: &TrainLog) -> PyResult<Bound<'py, PyAny>> {
    let records: Vec<_> = log
        .records
        .iter()
        .map(|r| {
            serde_json::json!({
                "iter": r.iter,
                "loss_d": r.loss_d,
                "loss_g": r.loss_g,
                "loss_topo_local": r.loss_topo_local,
                "loss_topo_global": r.loss_topo_global,
            })
        })
        .collect();
    json_to_py(py, &records)
}

#[pyclass(name = "Dataset", module = "l2skd", frozen)]
struct PyDataset {
    inner: dataio::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Seeded synthetic population; `small=True` gives 60 subjects, 10 -> 20 nodes.
    #[staticmethod]
    #[pyo3(signature = (seed=7, small=false, n_subjects=None, lr_nodes=None, hr_nodes=None))]
    fn generate(
        py: Python<'_>,
        seed: u64,
        small: bool,
        n_subjects: Option<usize>,
        lr_nodes: Option<usize>,
        hr_nodes: Option<usize>,
    ) -> PyResult<Self> {
        let mut config = if small { SyntheticConfig::small() } else { SyntheticConfig::default() };
        config.n_subjects = n_subjects.unwrap_or(config.n_subjects);
        config.n_l = lr_nodes.unwrap_or(config.n_l);
        config.n_h = hr_nodes.unwrap_or(config.n_h);
        let inner = py.detach(|| dataio::generate_synthetic(config, seed)).py()?;
        Ok(PyDataset { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset {
            inner: dataio::load_dataset(path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        dataio::write_dataset(path, &self.inner).py()
    }

    fn subset(&self, indices: Vec<usize>) -> PyResult<Self> {
        if let Some(&i) = indices.iter().find(|&&i| i >= self.inner.n_subjects()) {
            return Err(PyValueError::new_err(format!(
                "subject {i} out of range for {} subjects",
                self.inner.n_subjects()
            )));
        }
        Ok(PyDataset {
            inner: self.inner.subset(&indices),
        })
    }

    #[getter]
    fn n_subjects(&self) -> usize {
        self.inner.n_subjects()
    }

    #[getter]
    fn lr_nodes(&self) -> usize {
        self.inner.manifest.n_l
    }

    #[getter]
    fn hr_nodes(&self) -> usize {
        self.inner.manifest.n_h
    }

    /// Vectorized LR connectomes, one row per subject.
    #[getter]
    fn lr(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.lr)
    }

    #[getter]
    fn hr(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.hr)
    }

    fn manifest<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_to_py(py, &self.inner.manifest)
    }

    fn __len__(&self) -> usize {
        self.inner.n_subjects()
    }

    fn __repr__(&self) -> String {
        let m = &self.inner.manifest;
        format!("Dataset(n_subjects={}, lr_nodes={}, hr_nodes={}, seed={})", m.n_subjects, m.n_l, m.n_h, m.seed)
    }
}

#[pyclass(name = "Teacher", module = "l2skd", frozen)]
struct PyTeacher {
    inner: TeacherArtifact,
}

#[pymethods]
impl PyTeacher {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyTeacher {
            inner: TeacherArtifact::load(path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).py()
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.manifest.variant.name()
    }

    fn manifest<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_to_py(py, &self.inner.manifest)
    }

    fn __repr__(&self) -> String {
        format!("Teacher(variant={:?}, seed={})", self.variant(), self.inner.manifest.seed)
    }
}

#[pyclass(name = "Student", module = "l2skd", frozen)]
struct PyStudent {
    inner: StudentArtifact,
}

#[pymethods]
impl PyStudent {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyStudent {
            inner: StudentArtifact::load(path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).py()
    }

    /// Predicted HR feature rows for the given LR feature rows.
    fn predict(&self, py: Python<'_>, lr: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let f_l = tensor(lr)?;
        let out = py.detach(|| pipeline::predict(&self.inner, &f_l)).py()?;
        Ok(rows(&out))
    }

    /// Held-out metrics of this student on `dataset`.
    fn evaluate<'py>(&self, py: Python<'py>, dataset: &PyDataset) -> PyResult<Bound<'py, PyAny>> {
        let d = &dataset.inner;
        let metrics = py
            .detach(|| evaluation::evaluate_fold(&self.inner, &d.lr, &d.hr, d.manifest.n_h))
            .py()?;
        json_to_py(py, &metrics)
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.manifest.variant.name()
    }

    fn manifest<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_to_py(py, &self.inner.manifest)
    }

    fn __repr__(&self) -> String {
        format!("Student(variant={:?}, seed={})", self.variant(), self.inner.manifest.seed)
    }
}

/// Returns `(teacher, log)`; keyword arguments override hyperparameters.
#[pyfunction]
#[pyo3(signature = (dataset, variant="full", seed=7, **hyperparams))]
fn train_teacher<'py>(
    py: Python<'py>,
    dataset: &PyDataset,
    variant: &str,
    seed: u64,
    hyperparams: Option<&Bound<'py, PyDict>>,
) -> PyResult<(PyTeacher, Bound<'py, PyAny>)> {
    let v = self::variant(variant)?;
    let hp = self::hyperparams(&HyperParams::default(), hyperparams)?;
    let d = &dataset.inner;
    let (inner, log) = py.detach(|| pipeline::train_teacher(&d.lr, &d.hr, &hp, v, seed)).py()?;
    Ok((PyTeacher { inner }, log_records(py, &log)?))
}

/// Returns `(student, log)`. Variant and hyperparameters default to the
/// teacher's.
#[pyfunction]
#[pyo3(signature = (dataset, teacher, variant=None, seed=7, copy_teacher=false, **hyperparams))]
fn train_student<'py>(
    py: Python<'py>,
    dataset: &PyDataset,
    teacher: &PyTeacher,
    variant: Option<&str>,
    seed: u64,
    copy_teacher: bool,
    hyperparams: Option<&Bound<'py, PyDict>>,
) -> PyResult<(PyStudent, Bound<'py, PyAny>)> {
    let t = &teacher.inner;
    let v = variant.map(self::variant).transpose()?.unwrap_or(t.manifest.variant);
    let hp = self::hyperparams(&t.manifest.hyperparams, hyperparams)?;
    let init = if copy_teacher { StudentInit::CopyTeacher } else { StudentInit::Fresh };
    let lr = &dataset.inner.lr;
    let (inner, log) = py.detach(|| pipeline::train_student(lr, t, &hp, v, seed, init)).py()?;
    Ok((PyStudent { inner }, log_records(py, &log)?))
}

/// k-fold cross-validation; returns the report as a dict.
#[pyfunction]
#[pyo3(signature = (dataset, variant="full", seed=7, folds=3, parallel=false, **hyperparams))]
fn cross_validate<'py>(
    py: Python<'py>,
    dataset: &PyDataset,
    variant: &str,
    seed: u64,
    folds: usize,
    parallel: bool,
    hyperparams: Option<&Bound<'py, PyDict>>,
) -> PyResult<Bound<'py, PyAny>> {
    let v = self::variant(variant)?;
    let hp = self::hyperparams(&HyperParams::default(), hyperparams)?;
    let options = CrossValidationOptions {
        folds,
        parallel,
        residual_subjects: Vec::new(),
    };
    let cv = py
        .detach(|| evaluation::cross_validate(&dataset.inner, v, &hp, seed, &options))
        .py()?;
    json_to_py(py, &cv.report)
}

#[pyfunction]
fn default_hyperparams(py: Python<'_>) -> PyResult<Bound<'_, PyAny>> {
    json_to_py(py, &HyperParams::default())
}

#[pyfunction]
fn variants() -> Vec<&'static str> {
    Variant::ALL.iter().map(|v| v.name()).collect()
}

/// Fold index of every subject.
#[pyfunction]
fn kfold(n_subjects: usize, k: usize, seed: u64) -> PyResult<Vec<usize>> {
    Ok(dataio::kfold(n_subjects, k, seed).py()?.assignments)
}

/// Upper-triangular entries, row by row.
#[pyfunction]
fn vectorize(matrix: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    Ok(connectome::vectorize(&self::matrix(matrix)?))
}

#[pyfunction]
fn antivectorize(edges: Vec<f64>, nodes: usize) -> PyResult<Vec<Vec<f64>>> {
    let m = connectome::antivectorize(&edges, nodes).py()?;
    Ok(rows(m.weights()))
}

#[pyfunction]
fn node_strength(matrix: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    Ok(connectome::node_strength(&self::matrix(matrix)?))
}

#[pyfunction]
fn eigenvector_centrality(matrix: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    Ok(connectome::eigenvector_centrality(&self::matrix(matrix)?))
}

#[pyfunction]
#[pyo3(signature = (matrix, damping=0.85))]
fn pagerank(matrix: Vec<Vec<f64>>, damping: f64) -> PyResult<Vec<f64>> {
    Ok(connectome::pagerank(&self::matrix(matrix)?, damping))
}

#[pymodule]
fn l2skd(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyTeacher>()?;
    m.add_class::<PyStudent>()?;
    m.add_function(wrap_pyfunction!(train_teacher, m)?)?;
    m.add_function(wrap_pyfunction!(train_student, m)?)?;
    m.add_function(wrap_pyfunction!(cross_validate, m)?)?;
    m.add_function(wrap_pyfunction!(default_hyperparams, m)?)?;
    m.add_function(wrap_pyfunction!(variants, m)?)?;
    m.add_function(wrap_pyfunction!(kfold, m)?)?;
    m.add_function(wrap_pyfunction!(vectorize, m)?)?;
    m.add_function(wrap_pyfunction!(antivectorize, m)?)?;
    m.add_function(wrap_pyfunction!(node_strength, m)?)?;
    m.add_function(wrap_pyfunction!(eigenvector_centrality, m)?)?;
    m.add_function(wrap_pyfunction!(pagerank, m)?)?;
    Ok(())
}
