//! Python bindings: synthetic data, feature preparation, training,
//! inference, checkpoints and the rank-sum comparison.

use std::path::PathBuf;

use mpgat_core::checkpoint::Checkpoint;
use mpgat_core::features::{self, PreparedData, RawSeries, SplitRatios, SynthConfig};
use mpgat_core::graph::IntersectionGraph;
use mpgat_core::model::{AttentionMasks, ModelConfig, Mpgat};
use mpgat_core::train::{self, Persistence, TrainConfig, TrainedModel, REPORT_HORIZONS};
use mpgat_core::MpgatError;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: MpgatError) -> PyErr {
    match e {
        MpgatError::Io(_) | MpgatError::Divergence { .. } => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Directed intersection network.
#[pyclass(name = "Graph", module = "mpgat")]
#[derive(Clone)]
pub struct PyGraph {
    inner: IntersectionGraph,
}

#[pymethods]
impl PyGraph {
    #[new]
    #[pyo3(signature = (n, edges, labels=None))]
    fn new(n: usize, edges: Vec<(usize, usize)>, labels: Option<Vec<String>>) -> PyResult<Self> {
        IntersectionGraph::new(n, edges, labels).map(|inner| Self { inner }).map_err(py_err)
    }

    #[staticmethod]
    fn path(n: usize) -> Self {
        Self { inner: IntersectionGraph::path(n) }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        IntersectionGraph::from_json(text).map(|inner| Self { inner }).map_err(py_err)
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn edges(&self) -> Vec<(usize, usize)> {
        self.inner.edges().to_vec()
    }
}

/// Per-node count series on a regular 5-minute grid.
#[pyclass(name = "Series", module = "mpgat")]
#[derive(Clone)]
pub struct PySeries {
    inner: RawSeries,
}

#[pymethods]
impl PySeries {
    /// Reads `timestamp,node_id,count` rows.
    #[staticmethod]
    fn read_csv(path: PathBuf) -> PyResult<Self> {
        features::ingest_csv(path, None).map(|inner| Self { inner }).map_err(py_err)
    }

    fn save_csv(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_csv(path).map_err(py_err)
    }

    #[getter]
    fn n_nodes(&self) -> usize {
        self.inner.n_nodes()
    }

    #[getter]
    fn n_steps(&self) -> usize {
        self.inner.n_steps()
    }

    #[getter]
    fn node_ids(&self) -> Vec<String> {
        self.inner.node_ids().to_vec()
    }

    fn column(&self, node: usize) -> PyResult<Vec<f64>> {
        if node >= self.inner.n_nodes() {
            return Err(PyValueError::new_err(format!("node {node} out of range")));
        }
        Ok(self.inner.column(node))
    }

    /// Trailing moving average of one node; `None` before the window fills.
    fn moving_average(&self, node: usize, window: usize) -> PyResult<Vec<Option<f64>>> {
        let ma = features::moving_average(&self.inner, window).map_err(py_err)?;
        Ok((0..self.inner.n_steps())
            .map(|t| ma.is_valid(t).then(|| ma.get(t, node)))
            .collect())
    }

    /// Index of an ISO timestamp such as `2020-01-05T08:00:00`.
    fn index_of(&self, timestamp: &str) -> PyResult<Option<usize>> {
        let ts = features::parse_timestamp(timestamp).map_err(py_err)?;
        Ok(self.inner.index_of(ts))
    }
}

/// Generates a diurnal synthetic dataset and its directed path graph.
#[pyfunction]
#[pyo3(signature = (nodes=6, days=60, seed=7, peak_ratio=200.0, noise=0.1))]
fn synth(nodes: usize, days: usize, seed: u64, peak_ratio: f64, noise: f64) -> PyResult<(PySeries, PyGraph)> {
    let cfg = SynthConfig {
        n_nodes: nodes,
        days,
        seed,
        peak_ratio,
        noise_level: noise,
        ..SynthConfig::default()
    };
    let (series, graph) = features::synth_generate(&cfg).map_err(py_err)?;
    Ok((PySeries { inner: series }, PyGraph { inner: graph }))
}

/// Windowed samples split chronologically, with a train-fitted normalizer.
#[pyclass(name = "Prepared", module = "mpgat")]
pub struct PyPrepared {
    inner: PreparedData,
    t_in: usize,
    t_out: usize,
}

#[pymethods]
impl PyPrepared {
    #[getter]
    fn sizes(&self) -> (usize, usize, usize) {
        (self.inner.train.len(), self.inner.val.len(), self.inner.test.len())
    }

    #[getter]
    fn t_in(&self) -> usize {
        self.t_in
    }

    #[getter]
    fn t_out(&self) -> usize {
        self.t_out
    }

    /// Persistence-baseline test MAPE per report horizon within `t_out`.
    fn persistence_mape(&self) -> PyResult<Vec<(usize, f64)>> {
        let horizons = horizons_within(self.t_out);
        let scores = train::evaluate(&Persistence, &self.inner.test, &horizons).map_err(py_err)?;
        Ok(scores.0)
    }
}

fn horizons_within(t_out: usize) -> Vec<usize> {
    let hs: Vec<usize> = REPORT_HORIZONS.iter().copied().filter(|&h| h <= t_out).collect();
    if hs.is_empty() {
        vec![1]
    } else {
        hs
    }
}

#[pyfunction]
#[pyo3(signature = (series, t_in=12, t_out=12, split=(0.7, 0.1, 0.2)))]
fn prepare(series: &PySeries, t_in: usize, t_out: usize, split: (f64, f64, f64)) -> PyResult<PyPrepared> {
    let ratios = SplitRatios {
        train: split.0,
        val: split.1,
        test: split.2,
    };
    let inner = features::prepare(&series.inner, t_in, t_out, ratios).map_err(py_err)?;
    Ok(PyPrepared { inner, t_in, t_out })
}

/// MPGAT forecaster together with its graph masks and normalizer.
#[pyclass(name = "Model", module = "mpgat")]
pub struct PyModel {
    inner: TrainedModel,
    graph: IntersectionGraph,
}

#[pymethods]
impl PyModel {
    /// Fresh model sized for `data`; unspecified widths use the defaults.
    #[new]
    #[pyo3(signature = (graph, data, seed=0, features=4, blocks=8, d_residual=32, d_latent=32, beta=0.05))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        graph: &PyGraph,
        data: &PyPrepared,
        seed: u64,
        features: usize,
        blocks: usize,
        d_residual: usize,
        d_latent: usize,
        beta: f64,
    ) -> PyResult<Self> {
        let config = ModelConfig {
            n_nodes: graph.inner.n(),
            n_features: features,
            t_in: data.t_in,
            t_out: data.t_out,
            d_latent,
            d_residual,
            d_skip: 2 * d_residual,
            d_end: 4 * d_residual,
            n_blocks: blocks,
            beta,
            ..ModelConfig::default()
        };
        let model = Mpgat::new(config, seed).map_err(py_err)?;
        let masks = AttentionMasks::from_graph(&graph.inner);
        Ok(Self {
            inner: TrainedModel::new(model, masks, data.inner.normalizer.clone()),
            graph: graph.inner.clone(),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(path).map_err(py_err)?;
        let model = ck.to_model().map_err(py_err)?;
        let normalizer = ck
            .normalizer
            .clone()
            .ok_or_else(|| PyValueError::new_err("checkpoint has no normalizer"))?;
        let graph_json = ck
            .graph
            .as_deref()
            .ok_or_else(|| PyValueError::new_err("checkpoint has no graph"))?;
        let graph = IntersectionGraph::from_json(graph_json).map_err(py_err)?;
        let masks = AttentionMasks::from_graph(&graph);
        Ok(Self {
            inner: TrainedModel::new(model, masks, normalizer),
            graph,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::from_model(&self.inner.model, Some(&self.inner.normalizer), Some(self.graph.to_json()))
            .save(path)
            .map_err(py_err)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.model.params.num_parameters()
    }

    #[getter]
    fn receptive_field(&self) -> usize {
        self.inner.model.config.receptive_field()
    }

    /// Trains in place; returns the per-epoch (train loss, val MAPE) pairs.
    #[pyo3(signature = (data, lr=0.001, batch_size=64, epochs=10, patience=5, seed=0, max_batches=None, max_val=None))]
    #[allow(clippy::too_many_arguments)]
    fn fit(
        &mut self,
        py: Python<'_>,
        data: &PyPrepared,
        lr: f64,
        batch_size: usize,
        epochs: usize,
        patience: usize,
        seed: u64,
        max_batches: Option<usize>,
        max_val: Option<usize>,
    ) -> PyResult<Vec<(f64, f64)>> {
        let cfg = TrainConfig {
            lr,
            batch_size,
            max_epochs: epochs,
            patience,
            seed,
            max_batches_per_epoch: max_batches,
            max_val_samples: max_val,
            ..TrainConfig::default()
        };
        let inner = &mut self.inner;
        let history = py
            .allow_threads(|| train::train(inner, &data.inner.train, &data.inner.val, &cfg))
            .map_err(py_err)?;
        Ok(history.epochs.iter().map(|e| (e.train_loss, e.val_mape)).collect())
    }

    /// Test MAPE per report horizon within `t_out`.
    fn evaluate(&self, data: &PyPrepared) -> PyResult<Vec<(usize, f64)>> {
        let horizons = horizons_within(self.inner.model.config.t_out);
        let scores = train::evaluate(&self.inner, &data.inner.test, &horizons).map_err(py_err)?;
        Ok(scores.0)
    }

    /// Forecast `[node][step]` in raw units for the window starting at `t0`.
    fn forecast_at(&self, series: &PySeries, t0: usize) -> PyResult<Vec<Vec<f64>>> {
        let cfg = &self.inner.model.config;
        let x = features::input_at(&series.inner, t0, cfg.t_in).map_err(py_err)?;
        let sample = features::MultivariateSample {
            y: mpgat_core::autodiff::Tensor::zeros([cfg.n_nodes, cfg.t_out]),
            x,
            t0,
        };
        let preds = train::Forecaster::forecast(&self.inner, std::slice::from_ref(&sample)).map_err(py_err)?;
        Ok(preds[0].values().chunks(cfg.t_out).map(|r| r.to_vec()).collect())
    }
}

/// Two-sided rank-sum test; returns `(h, p_value)` with h = +1 when `a` is
/// significantly lower.
#[pyfunction]
#[pyo3(signature = (a, b, alpha=0.05))]
fn wilcoxon_rank_sum(a: Vec<f64>, b: Vec<f64>, alpha: f64) -> PyResult<(i8, f64)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(PyValueError::new_err("rank-sum test needs at least two values per side"));
    }
    let r = train::wilcoxon_rank_sum(&a, &b, alpha);
    Ok((r.h, r.p_value))
}

#[pymodule]
fn mpgat(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGraph>()?;
    m.add_class::<PySeries>()?;
    m.add_class::<PyPrepared>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(prepare, m)?)?;
    m.add_function(wrap_pyfunction!(wilcoxon_rank_sum, m)?)?;
    m.add("REPORT_HORIZONS", REPORT_HORIZONS.to_vec())?;
    Ok(())
}
