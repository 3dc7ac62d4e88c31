//! Python bindings: tensors, the noise schedule, wavelet transforms, scoring,
//! training and a checkpoint-backed detector.

use std::path::PathBuf;

use diffusion_ad::config::RunConfig;
use diffusion_ad::denoiser::Denoiser;
use diffusion_ad::diffusion::{self, NoiseSchedule};
use diffusion_ad::pipeline::{build_perception, load_dataset, Detector};
use diffusion_ad::scoring::{self, AnomalyReport, ScoreConfig};
use diffusion_ad::training::{load_checkpoint, save_checkpoint, train as train_model};
use diffusion_ad::wavelets::{self, WaveletFilter, WaveletPyramid};
use diffusion_ad::Error;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use rand::SeedableRng;

create_exception!(diffusion_ad_py, DiffusionAdError, PyException);

fn py_err(e: Error) -> PyErr {
    DiffusionAdError::new_err(e.to_string())
}

type PyRes<T> = PyResult<T>;

trait IntoPy<T> {
    fn py(self) -> PyRes<T>;
}

impl<T> IntoPy<T> for diffusion_ad::Result<T> {
    fn py(self) -> PyRes<T> {
        self.map_err(py_err)
    }
}

/// Dense row-major float32 tensor.
#[pyclass(name = "Tensor", module = "diffusion_ad_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    inner: diffusion_ad::Tensor,
}

impl From<diffusion_ad::Tensor> for PyTensor {
    fn from(inner: diffusion_ad::Tensor) -> Self {
        Self { inner }
    }
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(data: Vec<f32>, shape: Vec<usize>) -> PyRes<Self> {
        Ok(diffusion_ad::Tensor::new(shape, data).py()?.into())
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        diffusion_ad::Tensor::zeros(shape).into()
    }

    /// Standard normal samples from a seeded generator.
    #[staticmethod]
    fn randn(shape: Vec<usize>, seed: u64) -> Self {
        diffusion_ad::Tensor::randn(shape, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed)).into()
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    /// Flat row-major values.
    fn tolist(&self) -> Vec<f32> {
        self.inner.to_vec()
    }

    fn reshape(&self, shape: Vec<usize>) -> PyRes<Self> {
        Ok(self.inner.reshape(shape).py()?.into())
    }

    fn sum(&self) -> f64 {
        self.inner.sum()
    }

    fn max_abs_diff(&self, other: &PyTensor) -> PyRes<f64> {
        self.inner.max_abs_diff(&other.inner).py()
    }

    fn __len__(&self) -> usize {
        self.inner.shape().first().copied().unwrap_or(1)
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// Linear β schedule with `T` steps; timesteps are 1-based.
#[pyclass(name = "NoiseSchedule", module = "diffusion_ad_py")]
pub struct PySchedule {
    inner: NoiseSchedule,
}

#[pymethods]
impl PySchedule {
    #[new]
    #[pyo3(signature = (steps=1000, beta_start=1e-4, beta_end=0.02))]
    fn new(steps: usize, beta_start: f64, beta_end: f64) -> PyRes<Self> {
        Ok(Self { inner: NoiseSchedule::linear(steps, beta_start, beta_end).py()? })
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps()
    }

    fn beta(&self, t: usize) -> PyRes<f64> {
        self.inner.check_step(t).py()?;
        Ok(self.inner.beta(t))
    }

    fn alpha_bar(&self, t: usize) -> PyRes<f64> {
        if t > 0 {
            self.inner.check_step(t).py()?;
        }
        Ok(self.inner.alpha_bar(t))
    }

    /// `√ᾱ_t·x0 + √(1−ᾱ_t)·eps`.
    fn forward_marginal(&self, x0: &PyTensor, t: usize, eps: &PyTensor) -> PyRes<PyTensor> {
        Ok(diffusion::forward_marginal_sample(&x0.inner, t, &self.inner, &eps.inner).py()?.into())
    }
}

/// Multi-level separable DWT of the trailing one or two axes.
#[pyclass(name = "WaveletPyramid", module = "diffusion_ad_py")]
pub struct PyPyramid {
    inner: WaveletPyramid,
    filter: WaveletFilter,
}

#[pymethods]
impl PyPyramid {
    #[new]
    #[pyo3(signature = (x, filter="haar", levels=1))]
    fn new(x: &PyTensor, filter: &str, levels: usize) -> PyRes<Self> {
        let filter = WaveletFilter::by_name(filter).py()?;
        let inner = wavelets::wavelet_pyramid(&x.inner, &filter, levels).py()?;
        Ok(Self { inner, filter })
    }

    #[getter]
    fn depth(&self) -> usize {
        self.inner.depth()
    }

    fn energy(&self) -> f64 {
        self.inner.energy()
    }

    /// Detail bands of level `l` (0 is the finest).
    fn details(&self, l: usize) -> PyRes<Vec<PyTensor>> {
        let bands = self
            .inner
            .level(l)
            .ok_or_else(|| DiffusionAdError::new_err(format!("no level {l} in a depth-{} pyramid", self.inner.depth())))?;
        Ok(bands.details.iter().cloned().map(PyTensor::from).collect())
    }

    fn reconstruct(&self) -> PyRes<PyTensor> {
        Ok(self.inner.reconstruct(&self.filter).py()?.into())
    }
}

/// Real Morlet CWT coefficients `[len(scales), n]`.
#[pyfunction]
fn cwt(signal: &PyTensor, scales: Vec<f64>, sampling_rate: f64) -> PyRes<PyTensor> {
    Ok(wavelets::cwt(&signal.inner, &scales, sampling_rate).py()?.coefficients.into())
}

/// Inverse of [`cwt`] for coefficients produced with the same scales.
#[pyfunction]
fn icwt(coefficients: &PyTensor, scales: Vec<f64>, sampling_rate: f64) -> PyRes<PyTensor> {
    let s = wavelets::Scalogram { coefficients: coefficients.inner.clone(), scales, sampling_rate };
    Ok(wavelets::icwt(&s).py()?.into())
}

#[pyfunction]
fn log_scales(f_lo: f64, f_hi: f64, count: usize) -> PyRes<Vec<f64>> {
    wavelets::log_scales(f_lo, f_hi, count).py()
}

#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<u8>) -> PyRes<f64> {
    scoring::roc_auc(&scores, &labels).py()
}

#[pyfunction]
#[pyo3(signature = (e_recon, e_feat, lam=0.5))]
fn anomaly_score(e_recon: f64, e_feat: f64, lam: f64) -> PyRes<f64> {
    scoring::anomaly_score(e_recon, e_feat, &ScoreConfig { lambda: lam, ..Default::default() }).py()
}

fn run_config(config: Option<PathBuf>, overrides: Vec<String>) -> PyRes<RunConfig> {
    RunConfig::load(config.as_deref(), &overrides).py()
}

/// Trains from a TOML config plus `key=value` overrides, writes the
/// checkpoint and returns `(step, L_MSE, L_feat, L)` per step.
#[pyfunction]
#[pyo3(signature = (config=None, overrides=vec![], checkpoint=None))]
fn train(
    py: Python<'_>,
    config: Option<PathBuf>,
    overrides: Vec<String>,
    checkpoint: Option<PathBuf>,
) -> PyRes<Vec<(u64, f64, f64, f64)>> {
    let cfg = run_config(config, overrides)?;
    let path = checkpoint.unwrap_or_else(|| cfg.output.path(&cfg.output.checkpoint));
    py.detach(|| {
        let (train_set, _) = load_dataset(&cfg)?;
        let schedule = cfg.diffusion.schedule()?;
        let f = build_perception(&cfg.perception, cfg.perception.seed, cfg.model.input_channels)?;
        let model = Denoiser::new(cfg.model.clone(), cfg.train.seed)?;
        let mut rows = Vec::new();
        let ck = train_model(model, &train_set, &schedule, &f, &cfg.train, |r| {
            rows.push((r.step, r.losses.l_mse, r.losses.l_feat, r.losses.l))
        })?;
        save_checkpoint(&ck, &path)?;
        Ok(rows)
    })
    .py()
}

#[pyclass(name = "Report", module = "diffusion_ad_py", get_all)]
pub struct PyReport {
    sample_id: String,
    e_recon: f64,
    e_feat: f64,
    score: f64,
    label: Option<u8>,
}

impl PyReport {
    fn new(r: AnomalyReport, label: Option<u8>) -> Self {
        Self { sample_id: r.sample_id, e_recon: r.e_recon, e_feat: r.e_feat, score: r.score, label }
    }
}

#[pymethods]
impl PyReport {
    fn __repr__(&self) -> String {
        format!("Report({}, score={:.6})", self.sample_id, self.score)
    }
}

/// Loads a checkpoint and scores inputs shaped like the model's input `[C, H, W]`.
#[pyclass(name = "Detector", module = "diffusion_ad_py")]
pub struct PyDetector {
    inner: Detector,
    cfg: RunConfig,
}

#[pymethods]
impl PyDetector {
    #[new]
    #[pyo3(signature = (checkpoint, config=None, overrides=vec![]))]
    fn new(checkpoint: PathBuf, config: Option<PathBuf>, overrides: Vec<String>) -> PyRes<Self> {
        let cfg = run_config(config, overrides)?;
        let inner = Detector::from_checkpoint(load_checkpoint(&checkpoint).py()?, &cfg).py()?;
        Ok(Self { inner, cfg })
    }

    fn reconstruct(&self, py: Python<'_>, x: &PyTensor) -> PyRes<PyTensor> {
        let batch = diffusion_ad::Tensor::stack(std::slice::from_ref(&x.inner)).py()?;
        let out = py.detach(|| self.inner.reconstruct(&batch, 0)).py()?;
        Ok(out.select_outer(0).py()?.into())
    }

    fn score(&self, py: Python<'_>, x: &PyTensor) -> PyRes<PyReport> {
        let r = py.detach(|| self.inner.score_one("input", &x.inner, false)).py()?;
        Ok(PyReport::new(r, None))
    }

    /// Scores the configured test split; returns `(auc, reports)`.
    fn evaluate(&self, py: Python<'_>) -> PyRes<(f64, Vec<PyReport>)> {
        let e = py
            .detach(|| {
                let (_, test) = load_dataset(&self.cfg)?;
                self.inner.evaluate(&test, self.cfg.eval.batch_size, self.cfg.eval.threads, false)
            })
            .py()?;
        let auc = e.auc().py()?;
        let reports = e.reports.into_iter().zip(e.labels).map(|(r, l)| PyReport::new(r, Some(l))).collect();
        Ok((auc, reports))
    }
}

#[pymodule]
fn diffusion_ad_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DiffusionAdError", m.py().get_type::<DiffusionAdError>())?;
    m.add_class::<PyTensor>()?;
    m.add_class::<PySchedule>()?;
    m.add_class::<PyPyramid>()?;
    m.add_class::<PyReport>()?;
    m.add_class::<PyDetector>()?;
    m.add_function(wrap_pyfunction!(cwt, m)?)?;
    m.add_function(wrap_pyfunction!(icwt, m)?)?;
    m.add_function(wrap_pyfunction!(log_scales, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(anomaly_score, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
