//! Python bindings: tensors with autodiff, the seeded generator, the branch
//! selector, Frechet statistics and the data/pretrain/train/eval pipeline.

use std::path::Path;

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use storyviz_core::checkpoint::Checkpoint;
use storyviz_core::cli;
use storyviz_core::config::RunConfig;
use storyviz_core::dynamic_block;
use storyviz_core::gradcheck::{run_module, GradModule};
use storyviz_core::metrics;
use storyviz_core::synth_data::{self, SynthConfig};
use storyviz_core::tensor as ops;
use storyviz_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Numerical(_) => PyArithmeticError::new_err(e.to_string()),
        Error::Io(_) => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for storyviz_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn run_config(config: Option<&str>) -> PyResult<RunConfig> {
    config.map_or_else(|| Ok(RunConfig::default()), |t| RunConfig::parse(t).py())
}

/// Dense float64 tensor recording operations for reverse-mode differentiation.
#[pyclass(name = "Tensor", unsendable, skip_from_py_object)]
#[derive(Clone)]
pub struct PyTensor(ops::Tensor);

#[pymethods]
impl PyTensor {
    #[new]
    #[pyo3(signature = (data, shape, requires_grad = false))]
    fn new(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> PyResult<Self> {
        let t = ops::Tensor::new(data, &shape).py()?;
        Ok(Self(if requires_grad { ops::Tensor::param(t.to_vec(), &shape) } else { t }))
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape().to_vec()
    }

    #[getter]
    fn requires_grad(&self) -> bool {
        self.0.requires_grad()
    }

    /// Flat row-major values.
    fn tolist(&self) -> Vec<f64> {
        self.0.to_vec()
    }

    fn item(&self) -> PyResult<f64> {
        if self.0.numel() != 1 {
            return Err(PyValueError::new_err("item() needs a single-element tensor"));
        }
        Ok(self.0.item())
    }

    /// Accumulated gradient, or `None` before any backward pass.
    #[getter]
    fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad()
    }

    fn zero_grad(&self) {
        self.0.zero_grad();
    }

    fn backward(&self) -> PyResult<()> {
        self.0.backward().py()
    }

    fn detach(&self) -> Self {
        Self(self.0.detach())
    }

    fn __add__(&self, other: PyRef<'_, Self>) -> PyResult<Self> {
        ops::add(&self.0, &other.0).py().map(Self)
    }

    fn __sub__(&self, other: PyRef<'_, Self>) -> PyResult<Self> {
        ops::sub(&self.0, &other.0).py().map(Self)
    }

    fn __mul__(&self, other: PyRef<'_, Self>) -> PyResult<Self> {
        ops::mul(&self.0, &other.0).py().map(Self)
    }

    fn __matmul__(&self, other: PyRef<'_, Self>) -> PyResult<Self> {
        ops::matmul(&self.0, &other.0).py().map(Self)
    }

    fn scale(&self, c: f64) -> Self {
        Self(ops::scale(&self.0, c))
    }

    fn relu(&self) -> Self {
        Self(ops::relu(&self.0))
    }

    fn tanh(&self) -> Self {
        Self(ops::tanh(&self.0))
    }

    fn sigmoid(&self) -> Self {
        Self(ops::sigmoid(&self.0))
    }

    fn exp(&self) -> Self {
        Self(ops::exp(&self.0))
    }

    fn softmax(&self, axis: usize) -> PyResult<Self> {
        ops::softmax(&self.0, axis).py().map(Self)
    }

    fn sum(&self) -> Self {
        Self(ops::sum_all(&self.0))
    }

    fn mean(&self) -> Self {
        Self(ops::mean_all(&self.0))
    }

    fn reshape(&self, shape: Vec<usize>) -> PyResult<Self> {
        ops::reshape(&self.0, &shape).py().map(Self)
    }

    fn transpose(&self) -> PyResult<Self> {
        ops::transpose(&self.0).py().map(Self)
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?}, requires_grad={})", self.0.shape(), self.0.requires_grad())
    }
}

/// Counter-based generator; every draw is a pure function of (seed, counter).
#[pyclass(name = "SeededRng")]
pub struct PySeededRng(storyviz_core::SeededRng);

#[pymethods]
impl PySeededRng {
    #[new]
    #[pyo3(signature = (seed, counter = 0))]
    fn new(seed: u64, counter: u64) -> Self {
        Self(storyviz_core::SeededRng::with_counter(seed, counter))
    }

    #[getter]
    fn counter(&self) -> u64 {
        self.0.counter()
    }

    fn stream(&self, index: u64) -> Self {
        Self(self.0.stream(index))
    }

    fn uniform(&mut self) -> f64 {
        self.0.uniform()
    }

    fn normal(&mut self) -> f64 {
        self.0.normal()
    }

    fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        self.0.normal_vec(n)
    }

    fn gumbel(&mut self) -> f64 {
        dynamic_block::gumbel_sample(&mut self.0)
    }
}

/// Gumbel-Softmax probabilities of the SA and WSA branches.
#[pyfunction]
fn branch_probs(w: f64, z_sa: f64, z_wsa: f64, tau: f64) -> PyResult<(f64, f64)> {
    let p = dynamic_block::branch_probs(w, z_sa, z_wsa, tau).py()?;
    Ok((p.p_sa, p.p_wsa))
}

/// Squared Frechet distance between Gaussian fits of two sample sets.
#[pyfunction]
fn frechet_distance(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    let p = metrics::gaussian_stats(&a).py()?;
    let q = metrics::gaussian_stats(&b).py()?;
    metrics::frechet_distance(&p, &q).py()
}

/// Square root of a symmetric PSD matrix given row-major as `d * d` values.
#[pyfunction]
fn matrix_sqrt_psd(m: Vec<f64>, d: usize) -> PyResult<Vec<f64>> {
    metrics::matrix_sqrt_psd(&m, d).py()
}

/// Finite-difference checks; one dict per checked function.
#[pyfunction]
#[pyo3(signature = (module = "all", seed = 0, inject_fault = false))]
fn gradcheck<'py>(py: Python<'py>, module: &str, seed: u64, inject_fault: bool) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let reports = run_module(GradModule::parse(module).py()?, seed, inject_fault).py()?;
    reports
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("name", &r.name)?;
            d.set_item("max_rel_err", r.max_rel_err)?;
            d.set_item("checked", r.checked)?;
            d.set_item("skipped", r.skipped)?;
            d.set_item("passed", r.passed())?;
            Ok(d)
        })
        .collect()
}

/// One procedural story: caption strings and frames as binary PPM bytes.
#[pyfunction]
#[pyo3(signature = (seed, size = 32, frames = 5))]
fn generate_story<'py>(py: Python<'py>, seed: u64, size: usize, frames: usize) -> PyResult<Bound<'py, PyDict>> {
    let vocab = synth_data::story_vocabulary();
    let story = synth_data::generate_story_sample(seed, &SynthConfig { frames, size }, &vocab).py()?;
    let captions: Vec<String> = story
        .sentences
        .iter()
        .map(|s| vocab.decode(s.ids()).map(|w| w.join(" ")))
        .collect::<storyviz_core::Result<_>>()
        .py()?;
    let images: Vec<Bound<'py, PyBytes>> = story.frames.iter().map(|f| PyBytes::new(py, &f.to_ppm_bytes())).collect();
    let d = PyDict::new(py);
    d.set_item("captions", captions)?;
    d.set_item("frames", images)?;
    Ok(d)
}

/// Writes `out/train` and `out/test`; returns the story counts.
#[pyfunction]
#[pyo3(signature = (out, train_seeds = (0, 1000), test_seeds = (1000, 1200), size = 32, frames = 5))]
fn make_data(
    out: &str,
    train_seeds: (u64, u64),
    test_seeds: (u64, u64),
    size: usize,
    frames: usize,
) -> PyResult<(usize, usize)> {
    cli::make_data(
        Path::new(out),
        train_seeds.0..train_seeds.1,
        test_seeds.0..test_seeds.1,
        &SynthConfig { frames, size },
    )
    .py()
}

/// Pretrains the text/image matching encoders and saves them to `out`.
/// `config` is the text of a key = value config file.
#[pyfunction]
#[pyo3(signature = (data, out, config = None))]
fn pretrain_encoder<'py>(py: Python<'py>, data: &str, out: &str, config: Option<&str>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = run_config(config)?;
    let o = cli::pretrain_encoder(Path::new(data), &cfg).py()?;
    o.checkpoint.save(Path::new(out)).py()?;
    let d = PyDict::new(py);
    d.set_item("losses", &o.losses)?;
    d.set_item("matched", o.margin.matched)?;
    d.set_item("mismatched", o.margin.mismatched)?;
    d.set_item("margin", o.margin.margin())?;
    Ok(d)
}

/// Trains the GAN into `out`; returns the per-step losses.
#[pyfunction]
#[pyo3(signature = (data, encoder, out, config = None, resume = None))]
fn train<'py>(
    py: Python<'py>,
    data: &str,
    encoder: &str,
    out: &str,
    config: Option<&str>,
    resume: Option<&str>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = run_config(config)?;
    std::fs::create_dir_all(out).map_err(|e| py_err(e.into()))?;
    let (trainer, outcome) = cli::run_train(
        Path::new(data),
        Path::new(encoder),
        &cfg,
        Some(Path::new(out)),
        resume.map(Path::new),
        |_| {},
    )
    .py()?;
    let d = PyDict::new(py);
    d.set_item("step", outcome.checkpoint.step)?;
    d.set_item("d_loss", outcome.logs.iter().map(|l| l.d_loss).collect::<Vec<_>>())?;
    d.set_item("g_loss", outcome.logs.iter().map(|l| l.g_loss).collect::<Vec<_>>())?;
    d.set_item("parameters", trainer.model.parameter_count())?;
    Ok(d)
}

/// FID, FSD and Cosine of a training checkpoint on the test split.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, data: &str, ckpt: &str) -> PyResult<Bound<'py, PyDict>> {
    let test = cli::load_split(Path::new(data), "test").py()?;
    let r = cli::evaluate(&test, &Checkpoint::load(Path::new(ckpt)).py()?).py()?;
    let d = PyDict::new(py);
    d.set_item("fid", r.fid)?;
    d.set_item("fsd", r.fsd)?;
    d.set_item("cosine", r.cosine)?;
    d.set_item("n_real", r.n_real)?;
    d.set_item("n_fake", r.n_fake)?;
    d.set_item("caveat", r.caveat)?;
    d.set_item("warning", r.warning)?;
    Ok(d)
}

#[pymodule]
#[pyo3(name = "storyviz")]
fn storyviz_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PySeededRng>()?;
    m.add_function(wrap_pyfunction!(branch_probs, m)?)?;
    m.add_function(wrap_pyfunction!(frechet_distance, m)?)?;
    m.add_function(wrap_pyfunction!(matrix_sqrt_psd, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(generate_story, m)?)?;
    m.add_function(wrap_pyfunction!(make_data, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain_encoder, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
