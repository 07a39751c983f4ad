//! Python bindings: tokenization, training, parsing, metrics and archives.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use nulog_core::anomaly;
use nulog_core::evaluation;
use nulog_core::extraction::parse_corpus;
use nulog_core::ingest::{AnomalyLabel, DatasetConfig, LogRecord};
use nulog_core::model::{train_with, ModelConfig, ModelState, TrainOptions, DEFAULT_SEED};
use nulog_core::persistence;
use nulog_core::synthetic;
use nulog_core::tokenizer::{compute_frame_length, frame, Tokenizer, Vocabulary};
use nulog_core::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Tokenization filter and extraction settings for one log source.
#[pyclass(name = "DatasetConfig", from_py_object)]
#[derive(Clone)]
struct PyDatasetConfig {
    inner: DatasetConfig,
}

#[pymethods]
impl PyDatasetConfig {
    #[new]
    #[pyo3(signature = (name, tokenization_filter, epochs = 5, epsilon = 50))]
    fn new(name: &str, tokenization_filter: &str, epochs: u32, epsilon: u32) -> PyResult<Self> {
        let inner = DatasetConfig::new(name, tokenization_filter, epochs, epsilon);
        inner.validate().map_err(to_py)?;
        Ok(PyDatasetConfig { inner })
    }

    /// Settings for one of the ten benchmark systems.
    #[staticmethod]
    fn builtin(name: &str) -> PyResult<Self> {
        DatasetConfig::builtin(name)
            .map(|inner| PyDatasetConfig { inner })
            .ok_or_else(|| PyValueError::new_err(format!("unknown dataset {name:?}")))
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        DatasetConfig::from_toml_str(text)
            .map(|inner| PyDatasetConfig { inner })
            .map_err(to_py)
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml_string()
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn tokenization_filter(&self) -> String {
        self.inner.tokenization_filter.clone()
    }

    #[getter]
    fn epochs(&self) -> u32 {
        self.inner.epochs
    }

    #[getter]
    fn epsilon(&self) -> u32 {
        self.inner.epsilon
    }

    fn __repr__(&self) -> String {
        format!(
            "DatasetConfig(name={:?}, epochs={}, epsilon={})",
            self.inner.name, self.inner.epochs, self.inner.epsilon
        )
    }
}

/// A trained encoder together with its vocabulary and dataset settings.
#[pyclass(name = "Model")]
struct PyModel {
    state: ModelState,
    vocab: Vocabulary,
    config: DatasetConfig,
    epoch_losses: Vec<f32>,
}

fn records_of(messages: Vec<String>) -> Vec<LogRecord> {
    messages
        .into_iter()
        .enumerate()
        .map(|(i, m)| LogRecord::new(i as u64 + 1, m))
        .collect()
}

#[pymethods]
impl PyModel {
    /// Trains on raw message contents.
    #[staticmethod]
    #[allow(clippy::too_many_arguments)]
    #[pyo3(signature = (messages, config, width = 256, heads = 4, epochs = None, batch_size = 32, seed = DEFAULT_SEED))]
    fn train(
        py: Python<'_>,
        messages: Vec<String>,
        config: PyDatasetConfig,
        width: usize,
        heads: usize,
        epochs: Option<usize>,
        batch_size: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let config = config.inner;
        let tokenizer = Tokenizer::new(&config.tokenization_filter).map_err(to_py)?;
        let tokens: Vec<Vec<String>> = messages.iter().map(|m| tokenizer.tokenize(m)).collect();
        let vocab = Vocabulary::build(&tokens).map_err(to_py)?;
        let payload = match config.frame_length_override {
            Some(m) => m as usize,
            None => compute_frame_length(&tokens).map_err(to_py)?,
        };
        let model_config = ModelConfig {
            epochs: epochs.unwrap_or(config.epochs as usize),
            batch_size,
            seed,
            ..ModelConfig::new(vocab.len(), payload + 1).with_width(width, heads)
        };
        let seqs: Vec<_> = tokens
            .into_iter()
            .enumerate()
            .map(|(i, t)| frame(i, t, payload, &vocab))
            .collect();
        let trained = py
            .detach(|| train_with(&seqs, &model_config, &TrainOptions::default()))
            .map_err(to_py)?;
        Ok(PyModel {
            state: trained.state,
            vocab,
            config,
            epoch_losses: trained.epoch_losses,
        })
    }

    /// Loads an archive; `config` supplies the tokenization filter.
    #[staticmethod]
    fn load(path: &str, config: PyDatasetConfig) -> PyResult<Self> {
        let (state, vocab, _) = persistence::load_model(path).map_err(to_py)?;
        Ok(PyModel {
            state,
            vocab,
            config: config.inner,
            epoch_losses: Vec::new(),
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        persistence::save_model(&self.state, &self.vocab, path).map_err(to_py)
    }

    /// One dict per message with `template`, `variables` and `template_id`.
    #[pyo3(signature = (messages, epsilon = None))]
    fn parse<'py>(
        &self,
        py: Python<'py>,
        messages: Vec<String>,
        epsilon: Option<u32>,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let mut config = self.config.clone();
        if let Some(e) = epsilon {
            config.epsilon = e;
        }
        let records = records_of(messages);
        let (parsed, _) = py
            .detach(|| parse_corpus(&records, &self.state, &self.vocab, &config))
            .map_err(to_py)?;
        parsed
            .into_iter()
            .map(|p| {
                let d = PyDict::new(py);
                d.set_item("template", p.template)?;
                d.set_item("variables", p.variables)?;
                d.set_item("template_id", p.template_id)?;
                Ok(d)
            })
            .collect()
    }

    /// Share of each message's tokens outside the top-ε predictions.
    #[pyo3(signature = (messages, epsilon = None))]
    fn anomaly_fractions(&self, py: Python<'_>, messages: Vec<String>, epsilon: Option<usize>) -> PyResult<Vec<f64>> {
        let eps = epsilon.unwrap_or(self.config.epsilon as usize);
        let tokenizer = Tokenizer::new(&self.config.tokenization_filter).map_err(to_py)?;
        let payload = self.state.config().frame_length - 1;
        py.detach(|| {
            messages
                .iter()
                .enumerate()
                .map(|(i, m)| {
                    let seq = frame(i, tokenizer.tokenize(m), payload, &self.vocab);
                    anomaly::token_anomaly_fraction(&seq, &self.state, eps)
                })
                .collect::<Result<Vec<_>, _>>()
        })
        .map_err(to_py)
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    #[getter]
    fn frame_length(&self) -> usize {
        self.state.config().frame_length
    }

    #[getter]
    fn epoch_losses(&self) -> Vec<f32> {
        self.epoch_losses.clone()
    }
}

#[pyfunction]
fn tokenize(content: &str, filter: &str) -> PyResult<Vec<String>> {
    nulog_core::tokenizer::tokenize(content, filter).map_err(to_py)
}

#[pyfunction]
fn levenshtein(a: &str, b: &str) -> usize {
    evaluation::levenshtein(a, b)
}

/// Group-based accuracy of two label lists over the same messages.
#[pyfunction]
fn parsing_accuracy(predicted: Vec<String>, truth: Vec<String>) -> PyResult<f64> {
    evaluation::parsing_accuracy(&predicted, &truth).map_err(to_py)
}

/// `(min, q1, median, q3, max)` with linear-interpolation quartiles.
#[pyfunction]
fn robustness_summary(scores: Vec<f64>) -> PyResult<(f64, f64, f64, f64, f64)> {
    let named: Vec<(String, f64)> = scores.into_iter().map(|s| (String::new(), s)).collect();
    let s = evaluation::robustness_summary(&named).map_err(to_py)?;
    Ok((s.min, s.q1, s.median, s.q3, s.max))
}

fn labels(flags: &[bool]) -> Vec<AnomalyLabel> {
    flags
        .iter()
        .map(|&a| if a { AnomalyLabel::Anomaly } else { AnomalyLabel::Normal })
        .collect()
}

/// Accuracy, precision, recall and F1 with `True` meaning anomaly.
#[pyfunction]
fn detection_metrics<'py>(py: Python<'py>, verdicts: Vec<bool>, truth: Vec<bool>) -> PyResult<Bound<'py, PyDict>> {
    let m = anomaly::compute_metrics(&labels(&verdicts), &labels(&truth)).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("accuracy", m.accuracy)?;
    d.set_item("precision", m.precision)?;
    d.set_item("recall", m.recall)?;
    d.set_item("f1", m.f1)?;
    Ok(d)
}

/// Generated messages with their template index and `<*>` templates.
#[pyfunction]
#[pyo3(signature = (n, seed = 0))]
fn synthetic_corpus(n: usize, seed: u64) -> (Vec<String>, Vec<usize>, Vec<String>) {
    let c = synthetic::generate(n, seed);
    (
        c.records.into_iter().map(|r| r.content).collect(),
        c.assignment,
        c.templates,
    )
}

#[pymodule]
fn nulog(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDatasetConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(levenshtein, m)?)?;
    m.add_function(wrap_pyfunction!(parsing_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(robustness_summary, m)?)?;
    m.add_function(wrap_pyfunction!(detection_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_corpus, m)?)?;
    m.add("SYNTHETIC_FILTER", synthetic::SYNTHETIC_FILTER)?;
    Ok(())
}
