//! Python bindings for graphs, models, attacks and spectral analysis.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use robustgnn::analysis;
use robustgnn::attack::{self, AttackConfig, AttackTarget, Budget};
use robustgnn::data::{self, CsbmParams};
use robustgnn::experiment::DatasetSpec;
use robustgnn::model::{DiffusionModel, ModelSpec, Predictor};
use robustgnn::train::{self, TrainConfig};
use robustgnn::{EdgeFlips, Error, Matrix};
use serde::de::DeserializeOwned;

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Io(_) => PyIOError::new_err(msg),
        e if e.is_numeric() => PyArithmeticError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for robustgnn::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Deserializes a Python dict through its JSON form, using the same schema
/// as the config files.
fn from_dict<T: DeserializeOwned>(py: Python<'_>, dict: &Bound<'_, PyDict>) -> PyResult<T> {
    let text: String = py.import("json")?.call_method1("dumps", (dict,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn from_dict_or<T: DeserializeOwned + Default>(py: Python<'_>, dict: Option<&Bound<'_, PyDict>>) -> PyResult<T> {
    dict.map_or_else(|| Ok(T::default()), |d| from_dict(py, d))
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

/// Undirected graph with node features and (possibly missing) labels.
#[pyclass(name = "Graph", frozen)]
struct PyGraph(robustgnn::Graph);

#[pymethods]
impl PyGraph {
    #[new]
    fn new(
        edges: Vec<(usize, usize)>,
        features: Vec<Vec<f64>>,
        labels: Vec<Option<usize>>,
        num_classes: usize,
    ) -> PyResult<Self> {
        let n = features.len();
        let d = features.first().map_or(0, Vec::len);
        let x = Matrix::from_vec(n, d, features.concat()).py()?;
        Ok(PyGraph(robustgnn::Graph::new(n, edges, x, labels, num_classes).py()?))
    }

    #[staticmethod]
    fn karate() -> Self {
        PyGraph(data::karate_club())
    }

    /// Two-class contextual SBM restricted to its largest component.
    #[staticmethod]
    #[pyo3(signature = (n, seed=0, heterophilic=true, degree_of=None))]
    fn csbm(n: usize, seed: u64, heterophilic: bool, degree_of: Option<usize>) -> PyResult<Self> {
        let mut p = if heterophilic { CsbmParams::heterophilic(n, seed) } else { CsbmParams::homophilic(n, seed) };
        if let Some(reference) = degree_of {
            p = p.with_degree_of(reference);
        }
        Ok(PyGraph(data::sample_csbm(&p).py()?))
    }

    /// Reads `edges.txt`, `features.csv` and `labels.csv` from a directory.
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(PyGraph(DatasetSpec::files_in(&dir).build(None).py()?))
    }

    #[getter]
    fn num_nodes(&self) -> usize {
        self.0.num_nodes()
    }

    #[getter]
    fn num_edges(&self) -> usize {
        self.0.num_edges()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.0.num_classes()
    }

    #[getter]
    fn edges(&self) -> Vec<(usize, usize)> {
        self.0.edges().to_vec()
    }

    #[getter]
    fn labels(&self) -> Vec<Option<usize>> {
        self.0.labels().to_vec()
    }

    #[getter]
    fn features(&self) -> Vec<Vec<f64>> {
        rows(self.0.features())
    }

    fn degrees(&self) -> Vec<usize> {
        self.0.degrees()
    }

    /// Graph with the given node pairs toggled.
    fn flip(&self, flips: Vec<(usize, usize)>) -> PyResult<Self> {
        Ok(PyGraph(self.0.apply_flips(&EdgeFlips::new(flips).py()?).py()?))
    }

    fn __repr__(&self) -> String {
        format!("Graph(nodes={}, edges={}, classes={})", self.0.num_nodes(), self.0.num_edges(), self.0.num_classes())
    }
}

/// Labeled-train / unlabeled-train / validation / test partition.
#[pyclass(name = "Split", frozen)]
struct PySplit(data::Split);

#[pymethods]
impl PySplit {
    #[new]
    #[pyo3(signature = (graph, per_class_train=20, per_class_val=20, test_fraction=0.1, inductive=true, seed=0))]
    fn new(
        graph: &PyGraph,
        per_class_train: usize,
        per_class_val: usize,
        test_fraction: f64,
        inductive: bool,
        seed: u64,
    ) -> PyResult<Self> {
        Ok(PySplit(data::make_split(&graph.0, per_class_train, per_class_val, test_fraction, inductive, seed).py()?))
    }

    #[getter]
    fn train_labeled(&self) -> Vec<usize> {
        self.0.train_labeled.clone()
    }

    #[getter]
    fn train_unlabeled(&self) -> Vec<usize> {
        self.0.train_unlabeled.clone()
    }

    #[getter]
    fn val(&self) -> Vec<usize> {
        self.0.val.clone()
    }

    #[getter]
    fn test(&self) -> Vec<usize> {
        self.0.test.clone()
    }

    #[getter]
    fn inductive(&self) -> bool {
        self.0.inductive
    }

    fn to_json(&self) -> PyResult<String> {
        self.0.to_json().py()
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PySplit(data::Split::from_json(text).py()?))
    }
}

/// Polynomial diffusion model (MLP, GCN, APPNP, GPRGNN or ChebNetII).
#[pyclass(name = "Model", frozen)]
struct PyModel(DiffusionModel);

#[pymethods]
impl PyModel {
    /// Fresh model; `spec` follows the `model` section of a config file.
    #[new]
    #[pyo3(signature = (spec, in_dim, num_classes, seed=0))]
    fn new(py: Python<'_>, spec: &Bound<'_, PyDict>, in_dim: usize, num_classes: usize, seed: u64) -> PyResult<Self> {
        let spec: ModelSpec = from_dict(py, spec)?;
        Ok(PyModel(DiffusionModel::init(&spec, in_dim, num_classes, seed).py()?))
    }

    /// Trains with the `train` config section (standard, adversarial or
    /// self-training) and returns the model with its per-epoch history.
    #[staticmethod]
    #[pyo3(signature = (spec, graph, split, config=None))]
    fn train(
        py: Python<'_>,
        spec: &Bound<'_, PyDict>,
        graph: &PyGraph,
        split: &PySplit,
        config: Option<&Bound<'_, PyDict>>,
    ) -> PyResult<(Self, Vec<(usize, f64, f64, bool)>)> {
        let spec: ModelSpec = from_dict(py, spec)?;
        let config: TrainConfig = from_dict_or(py, config)?;
        let out = py.detach(|| train::train(&spec, &graph.0, &split.0, &config)).py()?;
        let history = out.history.iter().map(|r| (r.epoch, r.train_loss, r.val_metric, r.attacked)).collect();
        Ok((PyModel(out.model), history))
    }

    #[staticmethod]
    fn from_checkpoint(text: &str) -> PyResult<Self> {
        Ok(PyModel(DiffusionModel::from_checkpoint(text).py()?))
    }

    fn to_checkpoint(&self) -> PyResult<String> {
        self.0.to_checkpoint(None).py()
    }

    #[getter]
    fn gamma(&self) -> Vec<f64> {
        self.0.gamma.clone()
    }

    /// Coefficients in the monomial basis, normalized to unit ℓ1 norm.
    fn normalized_coefficients(&self) -> PyResult<Vec<f64>> {
        analysis::normalize_gamma(&self.0.effective_coefficients()).py()
    }

    fn logits(&self, graph: &PyGraph) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.0.predict_logits(&graph.0).py()?))
    }

    fn predict(&self, graph: &PyGraph) -> PyResult<Vec<usize>> {
        self.0.predict(&graph.0).py()
    }

    fn accuracy(&self, graph: &PyGraph, nodes: Vec<usize>) -> PyResult<f64> {
        let labels = graph.0.known_labels(&nodes).py()?;
        train::accuracy_under(&self.0, &graph.0, &EdgeFlips::empty(), &nodes, &labels).py()
    }

    /// Dense total diffusion matrix `T`.
    fn total_diffusion(&self, graph: &PyGraph) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&analysis::total_diffusion(&self.0, &graph.0).py()?))
    }

    /// Laplacian eigenvalues and the filter response at each of them.
    fn spectrum(&self, graph: &PyGraph) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let f = analysis::spectral_filter(&self.0, &graph.0).py()?;
        Ok((f.eigenvalues, f.response))
    }
}

/// Attacks `targets` of `graph`. `config` follows an `attacks` entry of a
/// config file. Returns the flipped node pairs, the global budget and the
/// clean and attacked accuracy on the targets.
#[pyfunction]
#[pyo3(signature = (model, graph, targets, config))]
fn run_attack(
    py: Python<'_>,
    model: &PyModel,
    graph: &PyGraph,
    targets: Vec<usize>,
    config: &Bound<'_, PyDict>,
) -> PyResult<(Vec<(usize, usize)>, usize, f64, f64)> {
    let config: AttackConfig = from_dict(py, config)?;
    let (g, m) = (&graph.0, &model.0);
    let labels = g.known_labels(&targets).py()?;
    py.detach(|| {
        let budget = config.budget(g, &targets)?;
        let at = AttackTarget { graph: g, targets: &targets, labels: &labels };
        let flips = attack::attack(m, &at, &budget, &config)?;
        let clean = train::accuracy_under(m, g, &EdgeFlips::empty(), &targets, &labels)?;
        let robust = train::accuracy_under(m, g, &flips, &targets, &labels)?;
        Ok((flips.slots().to_vec(), budget.global, clean, robust))
    })
    .py()
}

/// Clean and attacked test accuracy, one row per attack after the clean row.
#[pyfunction]
#[pyo3(signature = (model, graph, split, attacks, seed=0))]
fn evaluate(
    py: Python<'_>,
    model: &PyModel,
    graph: &PyGraph,
    split: &PySplit,
    attacks: Vec<Bound<'_, PyDict>>,
    seed: u64,
) -> PyResult<Vec<(String, f64, String, usize, usize, f64, f64)>> {
    let attacks: Vec<AttackConfig> = attacks.iter().map(|a| from_dict(py, a)).collect::<PyResult<_>>()?;
    let rows = py.detach(|| analysis::evaluate(&model.0, &graph.0, &split.0, &attacks, seed)).py()?;
    Ok(rows
        .into_iter()
        .map(|r| (r.attack, r.epsilon, r.local_rule, r.delta, r.flips, r.clean_acc, r.robust_acc))
        .collect())
}

/// Euclidean projection onto `{0 ≤ p ≤ 1, Σp ≤ delta}`.
#[pyfunction]
fn project_global(scores: Vec<f64>, delta: f64) -> Vec<f64> {
    attack::project_global(&scores, delta)
}

/// Greedy projection onto the global and per-node flip budgets.
#[pyfunction]
#[pyo3(signature = (slots, scores, delta, local=None))]
fn project_local_global(
    slots: Vec<(usize, usize)>,
    scores: Vec<f64>,
    delta: usize,
    local: Option<Vec<usize>>,
) -> PyResult<Vec<f64>> {
    if slots.len() != scores.len() {
        return Err(PyValueError::new_err("slots and scores differ in length"));
    }
    Ok(attack::project_local_global(&slots, &scores, &Budget { global: delta, local }))
}

#[pymodule]
fn robustgnn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGraph>()?;
    m.add_class::<PySplit>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(run_attack, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(project_global, m)?)?;
    m.add_function(wrap_pyfunction!(project_local_global, m)?)?;
    Ok(())
}
