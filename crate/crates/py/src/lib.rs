//! Python bindings for the `dualadapt` crate.
//!
//! Matrices cross the boundary as lists of equal-length float rows; reports
//! and configs cross as JSON strings so the Python side can use plain dicts.
//! Build with `cargo build -p dualadapt-py --release` and import the
//! resulting `libdualadapt_py.so` as `dualadapt_py` (see
//! `python/smoke_test.py`).

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use dualadapt::costs::{
    method_client_flops, method_communication, module_cost, ArchSpec, CostMethod,
};
use dualadapt::data::{gen_benchmark, BenchmarkSpec};
use dualadapt::density::{
    confidence_weights, fit_gmm_detailed, GmmParams, DEFAULT_MAX_ITERS, DEFAULT_TOL,
};
use dualadapt::federation::{run_method, Method, ModelSpec, TrainConfig};
use dualadapt::nn::{forward_classifier, forward_features, init_model, Activation, ModelParams};
use dualadapt::proxy::{build_proxy_batch, mixup_pair};
use dualadapt::tensor::Tensor;
use dualadapt::{presets, Error};

fn run_err(e: Error) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn to_tensor(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("matrix must have at least one row"));
    }
    let width = rows[0].len();
    if width == 0 || rows.iter().any(|r| r.len() != width) {
        return Err(PyValueError::new_err("rows must be non-empty and equal-length"));
    }
    Ok(Tensor::from_rows(rows))
}

fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let cols = t.cols();
    t.data().chunks(cols).map(|c| c.to_vec()).collect()
}

fn parse_activation(name: &str) -> PyResult<Activation> {
    match name {
        "relu" => Ok(Activation::Relu),
        "tanh" => Ok(Activation::Tanh),
        other => Err(PyValueError::new_err(format!("unknown activation '{}'", other))),
    }
}

fn parse_cost_method(name: &str) -> PyResult<CostMethod> {
    match name {
        "fed_dann" => Ok(CostMethod::FedDann),
        "fed_mcd" => Ok(CostMethod::FedMcd),
        "dualadapt" => Ok(CostMethod::DualAdapt),
        other => Err(PyValueError::new_err(format!("no cost formulas for method '{}'", other))),
    }
}

/// Feature extractor plus global classifier head, freshly initialized.
#[pyclass]
struct Model {
    g: ModelParams,
    f: ModelParams,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (input_dim, num_classes, feature_dim=32, g_hidden=vec![64], f_hidden=vec![], activation="relu", seed=0))]
    fn new(
        input_dim: usize,
        num_classes: usize,
        feature_dim: usize,
        g_hidden: Vec<usize>,
        f_hidden: Vec<usize>,
        activation: &str,
        seed: u64,
    ) -> PyResult<Self> {
        let spec = ModelSpec {
            feature_dim,
            g_hidden,
            f_hidden,
            activation: parse_activation(activation)?,
        };
        let cfg = spec.to_model_config(input_dim, num_classes, seed);
        cfg.validate().map_err(run_err)?;
        let (g, f) = init_model(&cfg);
        Ok(Model { g, f })
    }

    /// Extractor output, one feature row per input row.
    fn features(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = to_tensor(&x)?;
        if x.cols() != self.g.input_dim() {
            return Err(PyValueError::new_err(format!(
                "expected {} columns, got {}",
                self.g.input_dim(),
                x.cols()
            )));
        }
        Ok(to_rows(&forward_features(&self.g, &x)))
    }

    /// Class probabilities from the global head (rows sum to one).
    fn predict_probs(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let z = self.features(x)?;
        Ok(to_rows(&forward_classifier(&self.f, &to_tensor(&z)?)))
    }

    /// Arg-max class index per input row.
    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        let probs = self.predict_probs(x)?;
        Ok(probs
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap()
            })
            .collect())
    }

    #[getter]
    fn extractor_params(&self) -> u64 {
        self.g.param_count()
    }

    #[getter]
    fn head_params(&self) -> u64 {
        self.f.param_count()
    }

    #[getter]
    fn extractor_flops(&self) -> u64 {
        module_cost(&self.g).forward_flops
    }

    #[getter]
    fn head_flops(&self) -> u64 {
        module_cost(&self.f).forward_flops
    }
}

/// PCA-compressed Gaussian mixture over feature rows.
#[pyclass]
struct Gmm {
    inner: GmmParams,
}

#[pymethods]
impl Gmm {
    /// Fits `2 * num_classes` diagonal components with seeded EM; returns
    /// the mixture and its per-iteration mean log-likelihood trace.
    #[staticmethod]
    #[pyo3(signature = (features, num_classes, seed=0))]
    fn fit(features: Vec<Vec<f64>>, num_classes: usize, seed: u64) -> PyResult<(Gmm, Vec<f64>)> {
        let z = to_tensor(&features)?;
        let (inner, trace) =
            fit_gmm_detailed(&z, num_classes, seed, DEFAULT_MAX_ITERS, DEFAULT_TOL)
                .map_err(run_err)?;
        Ok((Gmm { inner }, trace))
    }

    /// Mean mixture log-density of each row.
    fn log_densities(&self, features: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let z = to_tensor(&features)?;
        if z.cols() != self.inner.pca.input_dim() {
            return Err(PyValueError::new_err(format!(
                "expected {} columns, got {}",
                self.inner.pca.input_dim(),
                z.cols()
            )));
        }
        Ok(self.inner.log_densities(&z))
    }

    /// Per-batch min-max confidence weights in [0, 1].
    fn weights(&self, features: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let z = to_tensor(&features)?;
        if z.cols() != self.inner.pca.input_dim() {
            return Err(PyValueError::new_err(format!(
                "expected {} columns, got {}",
                self.inner.pca.input_dim(),
                z.cols()
            )));
        }
        Ok(confidence_weights(&self.inner, &z).data().to_vec())
    }

    #[getter]
    fn num_components(&self) -> usize {
        self.inner.num_components()
    }

    #[getter]
    fn rank(&self) -> usize {
        self.inner.pca.rank()
    }

    /// Numbers transmitted when this summary crosses the wire.
    #[getter]
    fn param_count(&self) -> u64 {
        self.inner.param_count()
    }

    /// Wire form: exactly the transmitted payload.
    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner)
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Gmm> {
        let inner: GmmParams =
            serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Gmm { inner })
    }
}

/// Elementwise midpoint of two equal-length examples.
#[pyfunction]
fn mixup(a: Vec<f64>, b: Vec<f64>) -> PyResult<Vec<f64>> {
    if a.is_empty() || a.len() != b.len() {
        return Err(PyValueError::new_err("mixup needs two non-empty equal-length rows"));
    }
    let n = a.len();
    let xa = Tensor::new(vec![n], a);
    let xb = Tensor::new(vec![n], b);
    Ok(mixup_pair(&xa, &xb).data().to_vec())
}

/// Mixes every source row with a seeded random partner; returns the mixed
/// rows and the (m, n) index pair behind each one.
#[pyfunction]
fn proxy_batch(source: Vec<Vec<f64>>, seed: u64) -> PyResult<(Vec<Vec<f64>>, Vec<(usize, usize)>)> {
    let x = to_tensor(&source)?;
    let proxy = build_proxy_batch(&x, seed);
    Ok((to_rows(&proxy.inputs), proxy.provenance))
}

/// Closed-form per-example on-device training FLOPs for one local step.
#[pyfunction]
#[pyo3(signature = (method, g_flops, f_flops, d_flops=0))]
fn client_step_flops(method: &str, g_flops: u64, f_flops: u64, d_flops: u64) -> PyResult<u64> {
    let arch = ArchSpec { g_flops, f_flops, d_flops, ..ArchSpec::default() };
    Ok(method_client_flops(parse_cost_method(method)?, &arch))
}

/// Closed-form (upload, broadcast) parameter counts per client per round.
#[pyfunction]
#[pyo3(signature = (method, g_params, f_params, w_params=0))]
fn round_communication(
    method: &str,
    g_params: u64,
    f_params: u64,
    w_params: u64,
) -> PyResult<(u64, u64)> {
    let arch = ArchSpec { g_params, f_params, w_params, ..ArchSpec::default() };
    Ok(method_communication(parse_cost_method(method)?, &arch))
}

/// Generates the benchmark described by `benchmark_json` with `data_seed`,
/// trains `method` under `train_json` with `run_seed`, and returns the full
/// run report as JSON (rounds, accuracies, cost ledger).
#[pyfunction]
fn run_experiment(
    method: &str,
    benchmark_json: &str,
    train_json: &str,
    data_seed: u64,
    run_seed: u64,
) -> PyResult<String> {
    let spec: BenchmarkSpec =
        serde_json::from_str(benchmark_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    spec.validate().map_err(run_err)?;
    let cfg: TrainConfig =
        serde_json::from_str(train_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    cfg.validate().map_err(run_err)?;
    let method = Method::parse(method).map_err(run_err)?;
    let data = gen_benchmark(&spec, data_seed).map_err(run_err)?;
    let outcome = run_method(method, &cfg, &data, run_seed).map_err(run_err)?;
    serde_json::to_string(&outcome.report).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Names accepted by `run_experiment`.
#[pyfunction]
fn method_names() -> Vec<&'static str> {
    Method::ALL.iter().map(|m| m.name()).collect()
}

#[pyfunction]
fn default_benchmark_json() -> PyResult<String> {
    serde_json::to_string(&presets::default_benchmark())
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pyfunction]
fn default_train_json() -> PyResult<String> {
    serde_json::to_string(&presets::default_train_config())
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pymodule]
fn dualadapt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_class::<Gmm>()?;
    m.add_function(wrap_pyfunction!(mixup, m)?)?;
    m.add_function(wrap_pyfunction!(proxy_batch, m)?)?;
    m.add_function(wrap_pyfunction!(client_step_flops, m)?)?;
    m.add_function(wrap_pyfunction!(round_communication, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(method_names, m)?)?;
    m.add_function(wrap_pyfunction!(default_benchmark_json, m)?)?;
    m.add_function(wrap_pyfunction!(default_train_json, m)?)?;
    Ok(())
}
