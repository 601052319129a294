//! Python module `raad`: pipeline configuration and commands, evaluation
//! reports, detection metrics and bit allocation helpers.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

use raad_core as core;
use raad_core::hqs::{assign_bits as core_assign_bits, normalize_scores, BitPolicy, LayerScore};
use raad_core::metrics::{self, ScoredSample};
use raad_core::pipeline::{self, Stage};
use raad_core::train::Label;
use raad_core::Tensor;

create_exception!(raad, RaadError, PyException);
create_exception!(raad, PipelineOrderError, RaadError);
create_exception!(raad, ChecksumError, RaadError);
create_exception!(raad, ConfigError, RaadError);

fn to_py(e: core::Error) -> PyErr {
    let msg = e.to_string();
    match e {
        core::Error::PipelineOrder { .. } => PipelineOrderError::new_err(msg),
        core::Error::Checksum(_) => ChecksumError::new_err(msg),
        core::Error::Config { .. } => ConfigError::new_err(msg),
        core::Error::Dimension { .. } | core::Error::Parameter(_) => PyValueError::new_err(msg),
        _ => RaadError::new_err(msg),
    }
}

fn parse_stage(stage: Option<&str>) -> PyResult<Option<Stage>> {
    stage.map(|s| s.parse().map_err(to_py)).transpose()
}

fn paths(v: Vec<PathBuf>) -> Vec<String> {
    v.into_iter().map(|p| p.display().to_string()).collect()
}

/// Pipeline configuration.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig(pipeline::PipelineConfig);

#[pymethods]
impl PyConfig {
    #[new]
    fn new() -> Self {
        Self(pipeline::PipelineConfig::default())
    }

    #[staticmethod]
    fn smoke() -> Self {
        Self(pipeline::PipelineConfig::smoke())
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        pipeline::PipelineConfig::from_json(text).map(Self).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        pipeline::PipelineConfig::load(&path).map(Self).map_err(to_py)
    }

    fn to_json(&self) -> String {
        self.0.to_json()
    }

    fn hash(&self) -> String {
        self.0.hash()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.0.seed = seed;
    }

    #[getter]
    fn out_dir(&self) -> String {
        self.0.out_dir.display().to_string()
    }

    #[setter]
    fn set_out_dir(&mut self, dir: PathBuf) {
        self.0.out_dir = dir;
    }

    fn __repr__(&self) -> String {
        format!("Config(seed={}, out_dir={:?})", self.0.seed, self.0.out_dir)
    }
}

/// Metrics for one pipeline stage.
#[pyclass(name = "EvalReport", frozen, skip_from_py_object)]
struct PyEvalReport(metrics::EvalReport);

#[pymethods]
impl PyEvalReport {
    #[getter]
    fn stage(&self) -> &str {
        &self.0.stage
    }
    #[getter]
    fn auroc(&self) -> f64 {
        self.0.auroc
    }
    #[getter]
    fn ap(&self) -> f64 {
        self.0.ap
    }
    #[getter]
    fn aupro(&self) -> f64 {
        self.0.aupro
    }
    #[getter]
    fn bias_mass(&self) -> f64 {
        self.0.bias_mass
    }
    #[getter]
    fn n_normal(&self) -> usize {
        self.0.n_normal
    }
    #[getter]
    fn n_anom(&self) -> usize {
        self.0.n_anom
    }
    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed
    }

    fn __repr__(&self) -> String {
        format!(
            "EvalReport(stage={:?}, auroc={:.4}, ap={:.4}, aupro={:.4}, bias_mass={:.4})",
            self.0.stage, self.0.auroc, self.0.ap, self.0.aupro, self.0.bias_mass
        )
    }
}

fn reports(v: Vec<metrics::EvalReport>) -> Vec<PyEvalReport> {
    v.into_iter().map(PyEvalReport).collect()
}

/// Artifact-checked pipeline commands over one output directory.
#[pyclass(name = "Pipeline", frozen, skip_from_py_object)]
struct PyPipeline(pipeline::Pipeline);

#[pymethods]
impl PyPipeline {
    #[new]
    #[pyo3(signature = (config, threads = 1))]
    fn new(config: PyConfig, threads: usize) -> PyResult<Self> {
        Ok(Self(pipeline::Pipeline::new(config.0).map_err(to_py)?.with_threads(threads)))
    }

    fn gen_data(&self, py: Python<'_>) -> PyResult<Vec<String>> {
        py.detach(|| self.0.gen_data()).map(paths).map_err(to_py)
    }

    fn pretrain(&self, py: Python<'_>) -> PyResult<Vec<String>> {
        py.detach(|| self.0.pretrain()).map(paths).map_err(to_py)
    }

    fn train(&self, py: Python<'_>) -> PyResult<Vec<String>> {
        py.detach(|| self.0.train()).map(paths).map_err(to_py)
    }

    fn score_layers(&self, py: Python<'_>) -> PyResult<Vec<String>> {
        py.detach(|| self.0.score_layers()).map(paths).map_err(to_py)
    }

    fn quantize(&self, py: Python<'_>) -> PyResult<Vec<String>> {
        py.detach(|| self.0.quantize()).map(paths).map_err(to_py)
    }

    fn finetune(&self, py: Python<'_>) -> PyResult<Vec<String>> {
        py.detach(|| self.0.finetune()).map(paths).map_err(to_py)
    }

    /// Evaluates one stage (`baseline`, `quant`, `raad`) or all three.
    #[pyo3(signature = (stage = None))]
    fn eval(&self, py: Python<'_>, stage: Option<&str>) -> PyResult<Vec<PyEvalReport>> {
        let stage = parse_stage(stage)?;
        py.detach(|| self.0.eval(stage)).map(|(r, _)| reports(r)).map_err(to_py)
    }

    #[pyo3(signature = (stage = None))]
    fn heatmaps(&self, py: Python<'_>, stage: Option<&str>) -> PyResult<Vec<String>> {
        let stage = parse_stage(stage)?;
        py.detach(|| self.0.heatmaps(stage)).map(paths).map_err(to_py)
    }

    fn run_all(&self, py: Python<'_>) -> PyResult<Vec<PyEvalReport>> {
        py.detach(|| self.0.run_all()).map(reports).map_err(to_py)
    }
}

fn samples(scores: &[f64], anomalous: &[bool]) -> PyResult<Vec<ScoredSample>> {
    if scores.len() != anomalous.len() {
        return Err(PyValueError::new_err("scores and labels differ in length"));
    }
    Ok(scores
        .iter()
        .zip(anomalous)
        .map(|(&s, &a)| ScoredSample::new(s, if a { Label::Anomalous } else { Label::Normal }))
        .collect())
}

/// Image-level AUROC; `anomalous[i]` marks positives.
#[pyfunction]
fn auroc(scores: Vec<f64>, anomalous: Vec<bool>) -> PyResult<f64> {
    metrics::auroc(&samples(&scores, &anomalous)?).map_err(to_py)
}

/// Average precision with anomalies as positives.
#[pyfunction]
fn average_precision(scores: Vec<f64>, anomalous: Vec<bool>) -> PyResult<f64> {
    metrics::average_precision(&samples(&scores, &anomalous)?).map_err(to_py)
}

/// Normalized area under the per-region-overlap curve up to `fpr_limit`.
/// `maps` and `masks` are lists of equally sized 2-D nested lists.
#[pyfunction]
#[pyo3(signature = (maps, masks, fpr_limit = 0.3))]
fn au_pro(maps: Vec<Vec<Vec<f64>>>, masks: Vec<Vec<Vec<bool>>>, fpr_limit: f64) -> PyResult<f64> {
    let tensors = maps
        .into_iter()
        .map(|m| {
            let h = m.len();
            let w = m.first().map_or(0, Vec::len);
            if m.iter().any(|r| r.len() != w) {
                return Err(PyValueError::new_err("ragged map rows"));
            }
            Tensor::new(vec![h, w], m.concat()).map_err(to_py)
        })
        .collect::<PyResult<Vec<_>>>()?;
    let flat: Vec<Vec<bool>> = masks.into_iter().map(|m| m.concat()).collect();
    metrics::au_pro(&tensors, &flat, fpr_limit).map_err(to_py)
}

/// Bit widths for per-layer discrepancy scores under the default policy
/// (first and last layer pinned to 8 bits).
#[pyfunction]
#[pyo3(signature = (raw_scores, thresholds = None))]
fn assign_bits(raw_scores: Vec<f64>, thresholds: Option<[f64; 3]>) -> PyResult<Vec<u32>> {
    let mut policy = BitPolicy::new(raw_scores.len());
    if let Some(t) = thresholds {
        policy.thresholds = t;
    }
    let scores: Vec<LayerScore> = raw_scores
        .iter()
        .enumerate()
        .map(|(layer, &raw)| LayerScore { layer, raw, normalized: 0.0 })
        .collect();
    Ok(core_assign_bits(&normalize_scores(&scores).map_err(to_py)?, &policy))
}

/// Calibrates an asymmetric per-tensor quantizer on `values` and returns
/// `(dequantized, scale, zero_point)`.
#[pyfunction]
fn fake_quantize(values: Vec<f64>, bits: u32) -> PyResult<(Vec<f64>, f64, i64)> {
    let scheme = core::quant::calibrate_activation(&values, bits).map_err(to_py)?;
    let t = Tensor::new(vec![values.len()], values).map_err(to_py)?;
    let q = scheme.quantize_dequantize(&t).map_err(to_py)?;
    Ok((q.into_data(), scheme.scales[0], scheme.zero_point))
}

/// JSON schema of the pipeline configuration.
#[pyfunction]
fn config_schema() -> &'static str {
    pipeline::CONFIG_SCHEMA
}

#[pymodule]
pub fn raad(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("RaadError", py.get_type::<RaadError>())?;
    m.add("PipelineOrderError", py.get_type::<PipelineOrderError>())?;
    m.add("ChecksumError", py.get_type::<ChecksumError>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyEvalReport>()?;
    m.add_class::<PyPipeline>()?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(au_pro, m)?)?;
    m.add_function(wrap_pyfunction!(assign_bits, m)?)?;
    m.add_function(wrap_pyfunction!(fake_quantize, m)?)?;
    m.add_function(wrap_pyfunction!(config_schema, m)?)?;
    Ok(())
}
