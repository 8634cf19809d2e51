//! Python bindings: architecture costs, the loss and weighting primitives,
//! certification statistics, and a `Network` class that can be built,
//! trained from a config, saved, loaded and certified.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use spacte_core::certify::{self, CertifyConfig};
use spacte_core::config::RunConfig;
use spacte_core::model::spec::layers_from_text;
use spacte_core::model::{ArchitectureSpec, CostReport, InputNorm, InputShape, MultiHeadNetwork};
use spacte_core::trainer::{train, Checkpoint, TrainState};
use spacte_core::{cli, losses, schedule, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Input(_) => PyValueError::new_err(e.to_string()),
        Error::Io { .. } | Error::Format { .. } => PyIOError::new_err(e.to_string()),
        Error::Numeric(_) => PyRuntimeError::new_err(e.to_string()),
    }
}

fn spec_from(layers: &str, split: usize, heads: usize, classes: usize, input: &str) -> PyResult<ArchitectureSpec> {
    let layers = layers_from_text(layers).map_err(py_err)?;
    let input = InputShape::parse(input).map_err(py_err)?;
    ArchitectureSpec::new(layers, split, heads, classes, input).map_err(py_err)
}

/// Parameter and FLOP counts as a dict.
#[pyfunction]
#[pyo3(signature = (layers="resnet110", split=3, heads=5, classes=10, input="3x32x32"))]
fn cost_report(layers: &str, split: usize, heads: usize, classes: usize, input: &str) -> PyResult<Vec<(String, u64)>> {
    let report = CostReport::from_spec(&spec_from(layers, split, heads, classes, input)?).map_err(py_err)?;
    Ok(vec![
        ("params_backbone".into(), report.params_backbone),
        ("params_per_head".into(), report.params_per_head),
        ("params_total_multihead".into(), report.params_total_multihead),
        ("params_total_single".into(), report.params_total_single),
        ("params_total_k_dnns".into(), report.params_total_k_dnns),
        ("flops_single".into(), report.flops_single),
        ("flops_multihead".into(), report.flops_multihead),
    ])
}

/// (single, five heads, five networks) parameter counts of ResNet-110.
#[pyfunction]
fn resnet110_counts() -> PyResult<(u64, u64, u64)> {
    let [a, b, c] = cli::resnet110_reference_counts().map_err(py_err)?;
    Ok((a, b, c))
}

#[pyfunction]
fn cross_entropy(logits: Vec<f64>, label: usize) -> PyResult<f64> {
    losses::cross_entropy(&logits, label).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (heads, normalized=false))]
fn cosine_diversity_loss(heads: Vec<Vec<f64>>, normalized: bool) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let c = losses::cosine_diversity(&heads, normalized).map_err(py_err)?;
    Ok((c.value, c.grads))
}

#[pyfunction]
fn head_weights(losses: Vec<f64>, epsilon: f64) -> PyResult<Vec<f64>> {
    losses::head_weights(&losses, epsilon).map(|w| w.0).map_err(py_err)
}

#[pyfunction]
fn spl_weight(smoothed_loss: f64, lam: f64) -> f64 {
    losses::spl_weight(smoothed_loss, lam)
}

/// Column `k` of the result is column `k - 1` of `columns` (head 0 gets the last).
#[pyfunction]
fn circular_shift(columns: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let nu = losses::TeachingWeights(losses::SampleHeadMatrix::from_columns(&columns)).circular_shift();
    (0..nu.0.heads).map(|k| nu.0.column(k)).collect()
}

#[pyfunction]
fn lambda_at_epoch(lambda_ini: f64, lambda_lst: f64, total_epochs: usize, epoch: usize) -> PyResult<f64> {
    let s = schedule::LambdaSchedule::new(lambda_ini, lambda_lst, total_epochs).map_err(py_err)?;
    Ok(s.at(epoch))
}

#[pyfunction]
fn lower_conf_bound(k: u64, n: u64, alpha: f64) -> PyResult<f64> {
    certify::lower_conf_bound(k, n, alpha).map_err(py_err)
}

#[pyfunction]
fn normal_quantile(p: f64) -> PyResult<f64> {
    certify::normal_quantile(p).map_err(py_err)
}

/// A multi-head network with a shared backbone.
#[pyclass(module = "spacte")]
struct Network {
    inner: MultiHeadNetwork,
}

#[pymethods]
impl Network {
    #[new]
    #[pyo3(signature = (layers="desk-mlp", split=2, heads=3, classes=2, input="1x1x16", seed=0))]
    fn new(layers: &str, split: usize, heads: usize, classes: usize, input: &str, seed: u64) -> PyResult<Self> {
        let spec = spec_from(layers, split, heads, classes, input)?;
        let norm = InputNorm::identity(spec.input_shape.channels);
        Ok(Network {
            inner: MultiHeadNetwork::build(&spec, norm, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ckpt = Checkpoint::load(path).map_err(py_err)?;
        Ok(Network {
            inner: ckpt.network().map_err(py_err)?,
        })
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    #[getter]
    fn num_heads(&self) -> usize {
        self.inner.num_heads()
    }

    #[getter]
    fn input_len(&self) -> usize {
        self.inner.input_len()
    }

    /// Per-sample, per-head logits for inputs given as flat rows.
    fn forward(&self, inputs: Vec<Vec<f64>>) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let flat: Vec<f64> = inputs.concat();
        let x = self.inner.batch_tensor(&flat).map_err(py_err)?;
        let logits = self.inner.forward_all_heads(&x).map_err(py_err)?;
        Ok((0..logits.batch)
            .map(|n| (0..logits.heads).map(|k| logits.row(n, k).to_vec()).collect())
            .collect())
    }

    /// Ensemble class per input.
    fn predict(&self, inputs: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        let x = self.inner.batch_tensor(&inputs.concat()).map_err(py_err)?;
        self.inner.predict_batch(&x).map_err(py_err)
    }

    /// `(prediction or None, radius)` for one input.
    #[pyo3(signature = (x, label, sigma, n0=100, n=100_000, alpha=0.001, seed=0, index=0))]
    #[allow(clippy::too_many_arguments)]
    fn certify(
        &self,
        x: Vec<f64>,
        label: usize,
        sigma: f64,
        n0: u64,
        n: u64,
        alpha: f64,
        seed: u64,
        index: usize,
    ) -> PyResult<(Option<usize>, f64)> {
        let config = CertifyConfig {
            n0,
            n,
            alpha,
            sigma,
            batch: 1000,
            seed,
        };
        config.validate().map_err(py_err)?;
        let r = certify::certify(&self.inner, &x, label, index, &config).map_err(py_err)?;
        Ok((r.prediction, r.radius))
    }

    fn save(&self, path: &str, sigma: f64) -> PyResult<()> {
        let ckpt = Checkpoint {
            spec: self.inner.spec().clone(),
            config_hash: 0,
            epoch: 0,
            seed: 0,
            sigma,
            norm: self.inner.norm().clone(),
            state: self.inner.state_vector(),
            optimizer: Vec::new(),
            head_loss: vec![0.0; self.inner.num_heads()],
        };
        ckpt.save(path).map_err(py_err)
    }

    fn state_digest(&self) -> String {
        cli::state_digest(&self.inner)
    }
}

/// Trains on the config's data and returns the network with
/// `(initial_loss, final_loss)`.
#[pyfunction]
fn train_from_config(py: Python<'_>, text: &str) -> PyResult<(Network, Option<f64>, Option<f64>)> {
    let cfg = RunConfig::parse(text).map_err(py_err)?;
    let result = py.detach(|| {
        let (train_set, _) = cli::load_datasets(&cfg)?;
        let net = MultiHeadNetwork::build(&cfg.spec, cfg.input_norm(), cfg.seed())?;
        train(&cfg.train, &train_set, TrainState::new(net, &cfg.train), None, |_| {})
    });
    let (state, report) = result.map_err(py_err)?;
    let final_loss = report.final_loss();
    Ok((Network { inner: state.network }, report.initial_loss, final_loss))
}

/// Parses and validates a config, returning it fully rendered.
#[pyfunction]
fn check_config(text: &str) -> PyResult<String> {
    RunConfig::parse(text).map(|c| c.render()).map_err(py_err)
}

#[pymodule]
fn spacte(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Network>()?;
    m.add_function(wrap_pyfunction!(cost_report, m)?)?;
    m.add_function(wrap_pyfunction!(resnet110_counts, m)?)?;
    m.add_function(wrap_pyfunction!(cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_diversity_loss, m)?)?;
    m.add_function(wrap_pyfunction!(head_weights, m)?)?;
    m.add_function(wrap_pyfunction!(spl_weight, m)?)?;
    m.add_function(wrap_pyfunction!(circular_shift, m)?)?;
    m.add_function(wrap_pyfunction!(lambda_at_epoch, m)?)?;
    m.add_function(wrap_pyfunction!(lower_conf_bound, m)?)?;
    m.add_function(wrap_pyfunction!(normal_quantile, m)?)?;
    m.add_function(wrap_pyfunction!(train_from_config, m)?)?;
    m.add_function(wrap_pyfunction!(check_config, m)?)?;
    Ok(())
}
