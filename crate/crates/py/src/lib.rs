//! Python bindings: graph loading, random-walk sampling, synthetic data,
//! training, evaluation and gradient checks. Structured results cross the
//! boundary as plain dicts and lists.

use std::path::PathBuf;
use std::sync::Arc;

use hetformer::experiment::{
    self, content_hash, run_eval, run_sample, run_sweep, run_train, Dataset, ExperimentConfig, Paths,
};
use hetformer::graph::{HetGraph, NodeId, Schema};
use hetformer::rwr::{self, WalkConfig};
use hetformer::synth::{self, SynthConfig};
use hetformer::train::{self, split};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyBytes;

create_exception!(hetformer_py, HetformerError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    HetformerError::new_err(e.to_string())
}

/// Converts any serializable value to Python objects through `json.loads`.
fn to_py<'py, T: serde::Serialize + ?Sized>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn schema(name: &str) -> PyResult<Schema> {
    serde_json::from_value(serde_json::Value::String(name.into())).map_err(|_| err(format!("unknown schema `{name}`")))
}

/// Immutable heterogeneous graph.
#[pyclass(frozen, module = "hetformer_py")]
struct Graph {
    inner: Arc<HetGraph>,
}

#[pymethods]
impl Graph {
    /// Reads `nodes.tsv` and `edges.tsv` from a directory.
    #[staticmethod]
    #[pyo3(signature = (dir, schema="fakenewsnet"))]
    fn load(dir: PathBuf, schema: &str) -> PyResult<Self> {
        let g = HetGraph::load_dir(&dir, self::schema(schema)?).map_err(err)?;
        Ok(Graph { inner: Arc::new(g) })
    }

    #[getter]
    fn node_count(&self) -> usize {
        self.inner.node_count()
    }

    #[getter]
    fn edge_count(&self) -> usize {
        self.inner.edge_count()
    }

    fn news_ids(&self) -> Vec<u64> {
        self.inner.news_ids().into_iter().map(|v| v.0).collect()
    }

    fn node_type(&self, id: u64) -> Option<&'static str> {
        self.inner.node_type(NodeId(id)).map(|t| t.as_str())
    }

    /// 1 for fake, 0 for real, None when unlabeled.
    fn label(&self, id: u64) -> Option<u8> {
        self.inner.label(NodeId(id)).map(|l| l.as_f64() as u8)
    }

    fn neighbors(&self, id: u64) -> PyResult<Vec<(u64, &'static str)>> {
        let nbrs = self.inner.neighbors(NodeId(id)).map_err(err)?;
        Ok(nbrs.iter().map(|&(v, e)| (v.0, e.as_str())).collect())
    }

    fn stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.stats())
    }

    fn __repr__(&self) -> String {
        format!("Graph(nodes={}, edges={})", self.inner.node_count(), self.inner.edge_count())
    }
}

/// Top-ranked neighbors of `root` as `(id, type, visits)` tuples.
#[pyfunction]
#[pyo3(signature = (graph, root, restart_p=0.5, iterations=10_000, top_gamma=15, seed=42))]
fn sample_neighbors(
    graph: &Graph,
    root: u64,
    restart_p: f64,
    iterations: usize,
    top_gamma: usize,
    seed: u64,
) -> PyResult<Vec<(u64, &'static str, u64)>> {
    let cfg = WalkConfig {
        restart_p,
        iterations,
        top_gamma,
        seed,
    };
    let s = rwr::sample_neighbors(&graph.inner, NodeId(root), &cfg).map_err(err)?;
    Ok(s.ranked.iter().map(|r| (r.id.0, r.node_type.as_str(), r.frequency as u64)).collect())
}

/// Exact long-run visit distribution of the walk, root excluded.
#[pyfunction]
fn rwr_distribution(graph: &Graph, root: u64, restart_p: f64) -> PyResult<Vec<(u64, f64)>> {
    let d = rwr::rwr_oracle(&graph.inner, NodeId(root), restart_p).map_err(err)?;
    Ok(d.into_iter().map(|(k, v)| (k.0, v)).collect())
}

#[pyfunction]
fn f1_score(precision: f64, recall: f64) -> f64 {
    train::f1_score(precision, recall)
}

/// Writes a synthetic dataset and returns its graph statistics.
///
/// `config` is a JSON object of generator settings; unset fields keep their
/// defaults, or the friend-circle preset when `circles` is true.
#[pyfunction]
#[pyo3(signature = (out_dir, config=None, seed=None, circles=false))]
fn synthesize<'py>(
    py: Python<'py>,
    out_dir: PathBuf,
    config: Option<&str>,
    seed: Option<u64>,
    circles: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let base = if circles { SynthConfig::circles() } else { SynthConfig::default() };
    let mut cfg = match config {
        Some(text) => {
            let mut value = serde_json::to_value(&base).map_err(err)?;
            let patch: serde_json::Value = serde_json::from_str(text).map_err(err)?;
            let (Some(obj), Some(over)) = (value.as_object_mut(), patch.as_object()) else {
                return Err(err("synth config must be a JSON object"));
            };
            obj.extend(over.clone());
            serde_json::from_value(value).map_err(err)?
        }
        None => base,
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let data = py.detach(|| synth::generate(&cfg)).map_err(err)?;
    data.write_dir(&out_dir).map_err(err)?;
    to_py(py, &data.graph.stats())
}

/// Full experiment configuration plus the entry points that consume it.
#[pyclass(module = "hetformer_py")]
struct Experiment {
    cfg: ExperimentConfig,
}

impl Experiment {
    fn dataset(&self, graph_dir: PathBuf, emb_dir: Option<PathBuf>) -> PyResult<(ExperimentConfig, Dataset)> {
        let mut cfg = self.cfg.clone();
        cfg.paths = Paths {
            graph_dir: Some(graph_dir),
            emb_dir,
            ..cfg.paths
        };
        let data = Dataset::load(&cfg.paths, cfg.schema).map_err(err)?;
        Ok((cfg, data))
    }
}

#[pymethods]
impl Experiment {
    /// `config` is the JSON experiment config; None gives the defaults and
    /// `synthetic=True` the faster optimizer settings for generated data.
    #[new]
    #[pyo3(signature = (config=None, synthetic=false))]
    fn new(config: Option<&str>, synthetic: bool) -> PyResult<Self> {
        let cfg = match (config, synthetic) {
            (Some(text), _) => ExperimentConfig::from_json(text).map_err(err)?,
            (None, true) => ExperimentConfig::synthetic(),
            (None, false) => ExperimentConfig::default(),
        };
        Ok(Experiment { cfg })
    }

    #[getter]
    fn config(&self) -> String {
        self.cfg.to_json()
    }

    /// Seeds walks, initialization, batching and the generator.
    fn set_seed(&mut self, seed: u64) {
        self.cfg.set_seed(seed);
    }

    /// Trains on the dataset and returns `(report, checkpoint_bytes)`.
    #[pyo3(signature = (graph_dir, emb_dir=None))]
    fn train<'py>(
        &self,
        py: Python<'py>,
        graph_dir: PathBuf,
        emb_dir: Option<PathBuf>,
    ) -> PyResult<(Bound<'py, PyAny>, Bound<'py, PyBytes>)> {
        let (cfg, data) = self.dataset(graph_dir, emb_dir)?;
        let (outcome, trained) = py
            .detach(|| {
                let samples = run_sample(&cfg, &data, cfg.train.workers)?;
                run_train(&cfg, &data, &samples, None)
            })
            .map_err(err)?;
        Ok((to_py(py, &outcome)?, PyBytes::new(py, &trained.checkpoint)))
    }

    /// Metrics of a checkpoint on the train, val or test part of the split.
    #[pyo3(signature = (graph_dir, checkpoint, part="test", emb_dir=None))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        graph_dir: PathBuf,
        checkpoint: &[u8],
        part: &str,
        emb_dir: Option<PathBuf>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let (cfg, data) = self.dataset(graph_dir, emb_dir)?;
        let parts = split(&data.labeled_news(), &cfg.train).map_err(err)?;
        let ids = match part {
            "train" => parts.train,
            "val" => parts.val,
            "test" => parts.test,
            other => return Err(err(format!("unknown split `{other}`"))),
        };
        let report = py
            .detach(|| {
                let samples = run_sample(&cfg, &data, cfg.train.workers)?;
                run_eval(&cfg, &data, &samples, checkpoint, &ids)
            })
            .map_err(err)?;
        to_py(py, &report)
    }

    /// One trained model per neighborhood size.
    #[pyo3(signature = (graph_dir, gammas, emb_dir=None))]
    fn sweep<'py>(
        &self,
        py: Python<'py>,
        graph_dir: PathBuf,
        gammas: Vec<usize>,
        emb_dir: Option<PathBuf>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let (cfg, data) = self.dataset(graph_dir, emb_dir)?;
        let rows = py.detach(|| run_sweep(&cfg, &data, &gammas, cfg.train.workers)).map_err(err)?;
        to_py(py, &rows)
    }

    /// SHA-256 over the input files named by the config.
    #[pyo3(signature = (graph_dir, emb_dir=None))]
    fn inputs_hash(&self, graph_dir: PathBuf, emb_dir: Option<PathBuf>) -> PyResult<String> {
        let paths = Paths {
            graph_dir: Some(graph_dir),
            emb_dir,
            ..self.cfg.paths.clone()
        };
        content_hash(&paths).map_err(err)
    }
}

/// Backprop against finite differences on the bundled toy model.
#[pyfunction]
#[pyo3(signature = (seed=None, eps=1e-5))]
fn grad_check<'py>(py: Python<'py>, seed: Option<u64>, eps: f64) -> PyResult<Bound<'py, PyAny>> {
    let mut cfg = experiment::toy_config();
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    let report = py
        .detach(|| {
            let data = experiment::toy_dataset(cfg.train.seed)?;
            experiment::model_grad_check(&cfg, &data, eps)
        })
        .map_err(err)?;
    to_py(py, &report)
}

#[pymodule]
fn hetformer_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("HetformerError", m.py().get_type::<HetformerError>())?;
    m.add_class::<Graph>()?;
    m.add_class::<Experiment>()?;
    m.add_function(wrap_pyfunction!(sample_neighbors, m)?)?;
    m.add_function(wrap_pyfunction!(rwr_distribution, m)?)?;
    m.add_function(wrap_pyfunction!(f1_score, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    Ok(())
}
