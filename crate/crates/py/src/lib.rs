//! Python bindings: codebook operations, losses, the sampler, evaluation
//! metrics, synthetic data and the staged trainer.
//!
//! Errors map onto built-in exceptions by class: usage errors raise
//! `ValueError`, numerical failures `ArithmeticError`, file-system failures
//! `OSError` and everything else `RuntimeError`.

use std::fs;
use std::path::PathBuf;

use morpheus::codebook::{self, EmOptions, InitStrategy, PersonaCodebook};
use morpheus::corpus::{self, generate_synthetic, load_corpus, words, DialogueSample, IdfTable, SyntheticSpec, Turn};
use morpheus::error::ErrorClass;
use morpheus::inference::{self, SamplingConfig};
use morpheus::metrics::{self, SuiteConfig, UniformWeights};
use morpheus::trainer::{evaluate_code_prediction, TrainableReport, Trainer, TrainingConfig};
use morpheus::MorpheusError;
use ndarray::{Array1, Array2};
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn to_py(e: MorpheusError) -> PyErr {
    let msg = e.to_string();
    match (&e, e.class()) {
        (MorpheusError::Io { .. }, _) => PyOSError::new_err(msg),
        (_, ErrorClass::Usage) => PyValueError::new_err(msg),
        (_, ErrorClass::Numerical) => PyArithmeticError::new_err(msg),
        (_, ErrorClass::Data) => PyRuntimeError::new_err(msg),
    }
}

trait IntoPy<T> {
    fn py_err(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for morpheus::Result<T> {
    fn py_err(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows must share one length"));
    }
    Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn tokens(text: &str) -> Vec<String> {
    words(text)
}

/// A persona codebook of `N` code vectors in `R^d`.
#[pyclass(name = "Codebook", module = "morpheus_py")]
pub struct PyCodebook {
    inner: PersonaCodebook,
}

#[pymethods]
impl PyCodebook {
    /// Codes drawn from a seeded standard normal.
    #[staticmethod]
    fn random(n: usize, d: usize, seed: u64) -> PyResult<Self> {
        Ok(PyCodebook {
            inner: PersonaCodebook::init_random(n, d, seed).py_err()?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (vectors, seed = 0))]
    fn from_vectors(vectors: Vec<Vec<f64>>, seed: u64) -> PyResult<Self> {
        Ok(PyCodebook {
            inner: PersonaCodebook::from_vectors(matrix(vectors)?, InitStrategy::Random, seed).py_err()?,
        })
    }

    /// Gaussian-mixture EM over `points`; the codes are the fitted means.
    #[staticmethod]
    #[pyo3(signature = (points, n, max_iters = 200, tol = 1e-6, seed = 0))]
    fn em_fit(points: Vec<Vec<f64>>, n: usize, max_iters: usize, tol: f64, seed: u64) -> PyResult<Self> {
        let opts = EmOptions { max_iters, tol, seed };
        Ok(PyCodebook {
            inner: codebook::em_fit(&matrix(points)?, n, opts).py_err()?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyCodebook {
            inner: PersonaCodebook::import(path).py_err()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.export(path).py_err()
    }

    #[getter]
    fn size(&self) -> usize {
        self.inner.size()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn init_strategy(&self) -> &'static str {
        self.inner.strategy.as_str()
    }

    fn vectors(&self) -> Vec<Vec<f64>> {
        rows(self.inner.vectors())
    }

    /// Per-iteration log-likelihoods of the EM fit, if any.
    fn log_likelihood(&self) -> Option<Vec<f64>> {
        self.inner.em_state.as_ref().map(|s| s.log_likelihood.clone())
    }

    /// Nearest code index and Euclidean distance; counts the lookup.
    fn lookup(&mut self, p: Vec<f64>) -> PyResult<(usize, f64)> {
        self.inner.lookup(Array1::from(p).view()).py_err()
    }

    fn usage_counts(&self) -> Vec<u64> {
        self.inner.usage_counts().to_vec()
    }

    fn usage_perplexity(&self) -> PyResult<f64> {
        Ok(self.inner.utilization().py_err()?.perplexity)
    }

    fn __len__(&self) -> usize {
        self.inner.size()
    }

    fn __repr__(&self) -> String {
        format!("Codebook(n={}, d={}, init={})", self.inner.size(), self.inner.dim(), self.inner.strategy.as_str())
    }
}

/// Index of and Euclidean distance to the code nearest `p`.
#[pyfunction]
fn nearest_code(p: Vec<f64>, codes: Vec<Vec<f64>>) -> PyResult<(usize, f64)> {
    codebook::nearest_code(Array1::from(p).view(), matrix(codes)?.view()).py_err()
}

/// Quantization loss with its gradients: `(loss, grad_code, grad_persona)`.
#[pyfunction]
#[pyo3(signature = (p, e, beta = 0.05))]
fn vq_loss(p: Vec<f64>, e: Vec<f64>, beta: f64) -> PyResult<(f64, Vec<f64>, Vec<f64>)> {
    let out = codebook::vq_loss(Array1::from(p).view(), Array1::from(e).view(), beta).py_err()?;
    Ok((out.loss, out.grad_code.to_vec(), out.grad_persona.to_vec()))
}

/// Cross-entropy of cosine similarities over temperature against code `k`.
#[pyfunction]
#[pyo3(signature = (p, codes, k, tau = 0.5))]
fn contrastive_loss(p: Vec<f64>, codes: Vec<Vec<f64>>, k: usize, tau: f64) -> PyResult<f64> {
    codebook::contrastive_loss(Array1::from(p).view(), matrix(codes)?.view(), k, tau).py_err()
}

/// One seeded draw from the nucleus of `logits`.
#[pyfunction]
#[pyo3(signature = (logits, p = 0.9, temperature = 1.0, seed = 0))]
fn nucleus_sample(logits: Vec<f64>, p: f64, temperature: f64, seed: u64) -> PyResult<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    inference::nucleus_sample(&Array1::from(logits), p, temperature, &mut rng).py_err()
}

/// The renormalized nucleus as `(token, probability)` pairs.
#[pyfunction]
#[pyo3(signature = (logits, p = 0.9, temperature = 1.0))]
fn nucleus_support(logits: Vec<f64>, p: f64, temperature: f64) -> PyResult<Vec<(usize, f64)>> {
    inference::nucleus_support(&Array1::from(logits), p, temperature).py_err()
}

#[pyfunction]
#[pyo3(signature = (hypothesis, reference, n = 1))]
fn bleu(hypothesis: &str, reference: &str, n: usize) -> PyResult<f64> {
    metrics::bleu_n(&tokens(hypothesis), &tokens(reference), n).py_err()
}

#[pyfunction]
fn rouge_l(hypothesis: &str, reference: &str) -> f64 {
    metrics::rouge_l(&tokens(hypothesis), &tokens(reference))
}

#[pyfunction]
#[pyo3(signature = (responses, n = 1))]
fn distinct(responses: Vec<String>, n: usize) -> PyResult<f64> {
    let toks: Vec<Vec<String>> = responses.iter().map(|r| tokens(r)).collect();
    metrics::distinct_n(&toks, n).py_err()
}

#[pyfunction]
#[pyo3(signature = (responses, cap = 500, seed = 0))]
fn self_bleu(responses: Vec<String>, cap: usize, seed: u64) -> PyResult<f64> {
    let toks: Vec<Vec<String>> = responses.iter().map(|r| tokens(r)).collect();
    metrics::self_bleu(&toks, cap, seed).py_err()
}

/// Persona consistency with every token weighted equally.
#[pyfunction]
fn p_co(response: &str, persona: &str) -> f64 {
    metrics::p_co(&tokens(response), &tokens(persona), &UniformWeights)
}

/// The full metric suite as a dict of fractions. IDF weights come from the
/// references.
#[pyfunction]
#[pyo3(signature = (outputs, references, personas, seed = 0))]
fn evaluate<'py>(
    py: Python<'py>,
    outputs: Vec<String>,
    references: Vec<String>,
    personas: Vec<String>,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let idf = IdfTable::from_documents(references.iter().map(|r| tokens(r)));
    let suite = SuiteConfig {
        self_bleu_seed: seed,
        ..SuiteConfig::default()
    };
    let report = metrics::evaluate_suite(&outputs, &references, &personas, &idf, &suite).py_err()?;
    let out = PyDict::new(py);
    for (name, v) in metrics::METRIC_NAMES.iter().zip(report.values()) {
        out.set_item(*name, v)?;
    }
    out.set_item("samples", report.samples)?;
    Ok(out)
}

/// Writes `train.jsonl`, `valid.jsonl` and `test.jsonl` under `out_dir`
/// and returns the sample count of each split.
#[pyfunction]
#[pyo3(signature = (out_dir, spec_toml = None, seed = None))]
fn synthesize<'py>(
    py: Python<'py>,
    out_dir: PathBuf,
    spec_toml: Option<&str>,
    seed: Option<u64>,
) -> PyResult<Bound<'py, PyDict>> {
    let mut spec = match spec_toml {
        Some(text) => toml::from_str::<SyntheticSpec>(text).map_err(|e| PyValueError::new_err(format!("spec: {e}")))?,
        None => SyntheticSpec::default(),
    };
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let data = generate_synthetic(&spec).py_err()?;
    fs::create_dir_all(&out_dir).map_err(|e| to_py(MorpheusError::io(&out_dir, e)))?;
    let out = PyDict::new(py);
    for (name, samples) in [("train", &data.train), ("valid", &data.valid), ("test", &data.test)] {
        corpus::write_corpus(out_dir.join(format!("{name}.jsonl")), samples).py_err()?;
        out.set_item(name, samples.len())?;
    }
    Ok(out)
}

fn report_dict<'py>(py: Python<'py>, r: &TrainableReport) -> PyResult<Bound<'py, PyDict>> {
    let out = PyDict::new(py);
    out.set_item("total", r.total)?;
    out.set_item("trainable", r.trainable)?;
    out.set_item("codebook", r.codebook)?;
    out.set_item("classifier", r.classifier)?;
    out.set_item("projection", r.projection)?;
    out.set_item("fraction", r.fraction)?;
    Ok(out)
}

fn turns(history: Vec<(String, String)>) -> Vec<Turn> {
    history.into_iter().map(|(s, u)| Turn::new(s, u)).collect()
}

/// Staged trainer bound to one training corpus.
#[pyclass(name = "Trainer", module = "morpheus_py", unsendable)]
pub struct PyTrainer {
    inner: Trainer,
    train: Vec<DialogueSample>,
}

impl PyTrainer {
    fn corpus(&self, path: Option<PathBuf>) -> PyResult<Vec<DialogueSample>> {
        match path {
            Some(p) => load_corpus(p, None).py_err(),
            None => Ok(self.train.clone()),
        }
    }
}

#[pymethods]
impl PyTrainer {
    /// `config_toml` holds flat `key = value` overrides of the defaults.
    #[new]
    #[pyo3(signature = (train_path, config_toml = ""))]
    fn new(train_path: PathBuf, config_toml: &str) -> PyResult<Self> {
        let config = TrainingConfig::from_toml(config_toml).py_err()?;
        let train = load_corpus(train_path, None).py_err()?;
        let inner = Trainer::from_corpus(config, &train).py_err()?;
        Ok(PyTrainer { inner, train })
    }

    /// Restores a checkpoint; training continues on `train_path`.
    #[staticmethod]
    fn load(checkpoint: PathBuf, train_path: PathBuf) -> PyResult<Self> {
        let inner = Trainer::load_checkpoint(checkpoint).py_err()?;
        let train = load_corpus(train_path, None).py_err()?;
        Ok(PyTrainer { inner, train })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_checkpoint(path).py_err()
    }

    #[getter]
    fn config_toml(&self) -> String {
        self.inner.config.to_toml()
    }

    /// Role-aware pretraining; returns the total loss of every step.
    fn stage1(&mut self) -> PyResult<Vec<f64>> {
        let report = self.inner.stage1(&self.train).py_err()?;
        Ok(report.steps.iter().map(|s| s.total).collect())
    }

    /// Initializes the codebook; returns the number of persona encodings seen.
    fn stage2(&mut self) -> PyResult<usize> {
        Ok(self.inner.stage2(&self.train).py_err()?.points)
    }

    /// Joint training; returns the total loss of every step.
    fn stage3(&mut self) -> PyResult<Vec<f64>> {
        let report = self.inner.stage3(&self.train).py_err()?;
        Ok(report.steps.iter().map(|s| s.total).collect())
    }

    fn train_all(&mut self) -> PyResult<()> {
        self.inner.train_all(&self.train).py_err()
    }

    fn freeze_for_peft<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let r = self.inner.freeze_for_peft();
        report_dict(py, &r)
    }

    fn trainable_report<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        report_dict(py, &self.inner.trainable_report())
    }

    /// A copy of the model's codebook, if it has one.
    fn codebook(&self) -> Option<PyCodebook> {
        self.inner.model.codebook().map(|c| PyCodebook { inner: c.clone() })
    }

    /// Held-out code-prediction accuracy; the training corpus by default.
    #[pyo3(signature = (data_path = None))]
    fn code_accuracy(&self, data_path: Option<PathBuf>) -> PyResult<f64> {
        let samples = self.corpus(data_path)?;
        Ok(evaluate_code_prediction(&self.inner.model, &samples).py_err()?.overall)
    }

    /// Samples a response from the history alone. `history` is a list of
    /// `(speaker, utterance)` pairs.
    #[allow(clippy::too_many_arguments)]
    #[pyo3(signature = (history, responder, seed = 0, max_tokens = None, nucleus_p = None, temperature = None))]
    fn generate<'py>(
        &self,
        py: Python<'py>,
        history: Vec<(String, String)>,
        responder: &str,
        seed: u64,
        max_tokens: Option<usize>,
        nucleus_p: Option<f64>,
        temperature: Option<f64>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let base = SamplingConfig::from_training(&self.inner.config, seed);
        let cfg = SamplingConfig {
            max_tokens: max_tokens.unwrap_or(base.max_tokens),
            nucleus_p: nucleus_p.unwrap_or(base.nucleus_p),
            temperature: temperature.unwrap_or(base.temperature),
            ..base
        };
        let g = inference::generate(&self.inner.model, &turns(history), responder, &cfg).py_err()?;
        let out = PyDict::new(py);
        out.set_item("text", g.text)?;
        out.set_item("tokens", g.tokens)?;
        out.set_item(
            "codes",
            g.codes.iter().map(|c| (c.index, c.probability)).collect::<Vec<_>>(),
        )?;
        Ok(out)
    }
}

/// Registers every binding on `m`.
pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCodebook>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(nearest_code, m)?)?;
    m.add_function(wrap_pyfunction!(vq_loss, m)?)?;
    m.add_function(wrap_pyfunction!(contrastive_loss, m)?)?;
    m.add_function(wrap_pyfunction!(nucleus_sample, m)?)?;
    m.add_function(wrap_pyfunction!(nucleus_support, m)?)?;
    m.add_function(wrap_pyfunction!(bleu, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_l, m)?)?;
    m.add_function(wrap_pyfunction!(distinct, m)?)?;
    m.add_function(wrap_pyfunction!(self_bleu, m)?)?;
    m.add_function(wrap_pyfunction!(p_co, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

#[pymodule]
fn morpheus_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    register(m)
}
