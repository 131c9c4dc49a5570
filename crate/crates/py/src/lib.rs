//! Python bindings. Tensors cross the boundary as flat `f64` lists plus a
//! shape; configs cross as JSON strings with the same schema as the CLI.

use std::path::Path;

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::de::DeserializeOwned;
use sugar_cli::{CliError, RunConfig};
use sugar_core::datapipe::{run_pipeline, PipelineConfig};
use sugar_core::diffusion::{make_linear_schedule, q_sample, NoiseSchedule};
use sugar_core::metrics::{self, BlockMatcher, Embedders};
use sugar_core::model::{build_mask, AttentionDesign, ModelConfig, SugarModel, TokenLayout};
use sugar_core::numerics::{Rng, Tensor};
use sugar_core::sampler::{sample, DropSet, GuidanceConfig, GuidanceVariant, SampleRequest};
use sugar_core::ErrorKind;

/// Shape errors come from caller-supplied tensors, so they surface as
/// `ValueError` rather than `ArithmeticError`.
fn core_err(e: sugar_core::Error) -> PyErr {
    if matches!(e, sugar_core::Error::Shape { .. }) {
        return PyValueError::new_err(e.to_string());
    }
    match e.kind() {
        ErrorKind::Config => PyValueError::new_err(e.to_string()),
        ErrorKind::Data => PyOSError::new_err(e.to_string()),
        ErrorKind::Numeric => PyArithmeticError::new_err(e.to_string()),
    }
}

fn cli_err(e: CliError) -> PyErr {
    match e {
        CliError::Core(inner) => core_err(inner),
        CliError::Config(m) => PyValueError::new_err(m),
        CliError::Output { .. } => PyOSError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Parses a snake_case enum name such as `"fine_only"`.
fn parse_name<T: DeserializeOwned>(name: &str) -> PyResult<T> {
    serde_json::from_value(serde_json::Value::String(name.to_string())).map_err(json_err)
}

#[pyclass(name = "Tensor", module = "sugar_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyTensor {
    inner: Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(PyTensor { inner: Tensor::new(shape, data).map_err(core_err)? })
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        PyTensor { inner: Tensor::zeros(&shape) }
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    /// Row-major values.
    fn tolist(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn max_abs_diff(&self, other: &PyTensor) -> PyResult<f64> {
        if self.inner.shape() != other.inner.shape() {
            return Err(PyValueError::new_err("shape mismatch"));
        }
        Ok(self.inner.max_abs_diff(&other.inner))
    }

    fn __len__(&self) -> usize {
        self.inner.numel()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

#[pyclass(name = "NoiseSchedule", module = "sugar_py", frozen)]
struct PySchedule {
    inner: NoiseSchedule,
}

#[pymethods]
impl PySchedule {
    #[new]
    #[pyo3(signature = (timesteps = 1000, beta_start = 1e-4, beta_end = 2e-2))]
    fn new(timesteps: usize, beta_start: f64, beta_end: f64) -> PyResult<Self> {
        Ok(PySchedule { inner: make_linear_schedule(timesteps, beta_start, beta_end).map_err(core_err)? })
    }

    #[getter]
    fn betas(&self) -> Vec<f64> {
        self.inner.betas().to_vec()
    }

    #[getter]
    fn alpha_bars(&self) -> Vec<f64> {
        self.inner.alpha_bars().to_vec()
    }

    fn ddim_timesteps(&self, steps: usize) -> PyResult<Vec<usize>> {
        self.inner.ddim_timesteps(steps).map_err(core_err)
    }

    fn q_sample(&self, x0: &PyTensor, t: usize, eps: &PyTensor) -> PyResult<PyTensor> {
        Ok(PyTensor { inner: q_sample(&x0.inner, t, &eps.inner, &self.inner).map_err(core_err)? })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(name = "Model", module = "sugar_py", frozen)]
struct PyModel {
    inner: SugarModel,
}

#[pymethods]
impl PyModel {
    /// `config` is a model-config JSON object; omitted fields take defaults.
    #[new]
    #[pyo3(signature = (config = "{}", seed = 0))]
    fn new(config: &str, seed: u64) -> PyResult<Self> {
        let cfg: ModelConfig = serde_json::from_str(config).map_err(json_err)?;
        cfg.validate().map_err(core_err)?;
        Ok(PyModel { inner: SugarModel::new(cfg, &mut Rng::new(seed)).map_err(core_err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyModel { inner: SugarModel::load(path).map_err(core_err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(core_err)
    }

    fn config_json(&self) -> String {
        serde_json::to_string_pretty(self.inner.config()).expect("model config serializes")
    }

    #[getter]
    fn design(&self) -> String {
        self.inner.config().design.to_string()
    }

    fn num_params(&self) -> usize {
        self.inner.params().numel()
    }

    /// Guided DDIM sample. Returns a dict with `video`, `trace` (one
    /// `(t, fine_null, coarse_null)` tuple per step), `requested` and
    /// `executed` forward-pass counts.
    #[pyo3(signature = (
        identity, prompt, omega_i = 7.5, omega_t = 7.5, steps = 50, seed = 0,
        t_bar = None, drop_set = "none", variant = "text_inner"
    ))]
    #[allow(clippy::too_many_arguments)]
    fn sample<'py>(
        &self,
        py: Python<'py>,
        identity: &PyTensor,
        prompt: &str,
        omega_i: f64,
        omega_t: f64,
        steps: usize,
        seed: u64,
        t_bar: Option<usize>,
        drop_set: &str,
        variant: &str,
    ) -> PyResult<Bound<'py, PyDict>> {
        let sched = self.inner.config().schedule.build().map_err(core_err)?;
        let guidance = GuidanceConfig {
            omega_i,
            omega_t,
            variant: parse_name::<GuidanceVariant>(variant)?,
            t_bar: t_bar.unwrap_or(sched.len()),
            drop_set: parse_name::<DropSet>(drop_set)?,
        };
        let req = SampleRequest { identity: identity.inner.clone(), prompt: prompt.to_string(), guidance, steps, seed };
        let out = py.detach(|| sample(&self.inner, &req, &sched)).map_err(core_err)?;
        let d = PyDict::new(py);
        d.set_item("video", PyTensor { inner: out.video })?;
        let trace: Vec<(usize, bool, bool)> = out.trace.iter().map(|s| (s.t, s.fine_null, s.coarse_null)).collect();
        d.set_item("trace", trace)?;
        d.set_item("requested", out.evals.requested)?;
        d.set_item("executed", out.evals.executed)?;
        Ok(d)
    }
}

/// Token-level attention permissions for a design on a layout:
/// `mask[q][k]` is true when query token `q` may attend to key token `k`.
#[pyfunction]
#[pyo3(signature = (design, n_fine = 4, n_coarse = 1, n_text = 8, frames = 8, tokens_per_frame = 16))]
fn attention_mask(
    design: &str,
    n_fine: usize,
    n_coarse: usize,
    n_text: usize,
    frames: usize,
    tokens_per_frame: usize,
) -> PyResult<Vec<Vec<bool>>> {
    let design: AttentionDesign =
        serde_json::from_value(serde_json::Value::String(design.to_uppercase())).map_err(json_err)?;
    let layout = TokenLayout { n_fine, n_coarse, n_text, frames, tokens_per_frame, d_model: 1 };
    let m = build_mask(design, &layout).map_err(core_err)?;
    let n = m.shape()[0];
    Ok(m.data().chunks(n).map(|row| row.iter().map(|&v| v == 0.0).collect()).collect())
}

/// Runs the generate-and-filter pipeline; returns the number of accepted
/// triplets and the report as JSON.
#[pyfunction]
#[pyo3(signature = (config = "{}", seed = 0))]
fn pipeline(py: Python<'_>, config: &str, seed: u64) -> PyResult<(usize, String)> {
    let cfg: PipelineConfig = serde_json::from_str(config).map_err(json_err)?;
    let (triplets, report) = py.detach(|| run_pipeline(&cfg, seed)).map_err(core_err)?;
    Ok((triplets.len(), serde_json::to_string(&report).map_err(json_err)?))
}

#[pyfunction]
fn identity_score(video: &PyTensor, subject: &PyTensor) -> PyResult<f64> {
    metrics::identity_score(&video.inner, &subject.inner, &Embedders::default().fine).map_err(core_err)
}

#[pyfunction]
fn dynamic_degree(video: &PyTensor) -> PyResult<f64> {
    metrics::dynamic_degree(&video.inner, &BlockMatcher::default()).map_err(core_err)
}

/// Every metric for one clip, keyed by metric name.
#[pyfunction]
fn evaluate_video<'py>(
    py: Python<'py>,
    video: &PyTensor,
    subject: &PyTensor,
    prompt: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let r =
        metrics::evaluate_video(&video.inner, &subject.inner, prompt, &Embedders::default(), &BlockMatcher::default())
            .map_err(core_err)?;
    let d = PyDict::new(py);
    d.set_item("identity_score", r.identity_score)?;
    d.set_item("text_alignment", r.text_alignment)?;
    d.set_item("dynamic_degree", r.dynamic_degree)?;
    d.set_item("subject_consistency", r.subject_consistency)?;
    d.set_item("background_consistency", r.background_consistency)?;
    Ok(d)
}

/// Held-out conditioning inputs as `(identity, subject, prompt)` tuples.
#[pyfunction]
#[pyo3(signature = (n, seed = 0))]
fn probes(n: usize, seed: u64) -> PyResult<Vec<(PyTensor, PyTensor, String)>> {
    Ok(sugar_cli::probes(n, seed)
        .map_err(cli_err)?
        .into_iter()
        .map(|p| (PyTensor { inner: p.identity }, PyTensor { inner: p.subject }, p.prompt))
        .collect())
}

/// Resolves a run config and returns its full JSON echo.
#[pyfunction]
#[pyo3(signature = (config = "{}"))]
fn resolve_config(config: &str) -> PyResult<String> {
    Ok(RunConfig::from_json(config).map_err(cli_err)?.to_json())
}

/// Runs one CLI command (`data`, `train`, `sample`, `eval` or `ablate`)
/// with outputs under `out`.
#[pyfunction]
fn run_command(py: Python<'_>, command: &str, config: &str, out: &str) -> PyResult<()> {
    let cfg = RunConfig::from_json(config).map_err(cli_err)?;
    let out = Path::new(out);
    py.detach(|| -> Result<(), CliError> {
        match command {
            "data" => sugar_cli::cmd_data(&cfg, out).map(drop),
            "train" => sugar_cli::cmd_train(&cfg, out).map(drop),
            "sample" => sugar_cli::cmd_sample(&cfg, out).map(drop),
            "eval" => sugar_cli::cmd_eval(&cfg, out).map(drop),
            "ablate" => sugar_cli::cmd_ablate(&cfg, out).map(drop),
            other => Err(CliError::Config(format!("unknown command {other:?}"))),
        }
    })
    .map_err(cli_err)
}

#[pymodule]
fn sugar_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PySchedule>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(attention_mask, m)?)?;
    m.add_function(wrap_pyfunction!(pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(identity_score, m)?)?;
    m.add_function(wrap_pyfunction!(dynamic_degree, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_video, m)?)?;
    m.add_function(wrap_pyfunction!(probes, m)?)?;
    m.add_function(wrap_pyfunction!(resolve_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_command, m)?)?;
    Ok(())
}
