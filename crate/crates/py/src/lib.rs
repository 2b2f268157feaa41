//! Python bindings: checkpoints, streaming translation, training from a run
//! config, latency/quality metrics and the attention kernels.

use std::path::PathBuf;

use pyo3::exceptions::{PyFileNotFoundError, PyIOError, PyValueError};
use pyo3::prelude::*;

use gma_simt::cli::train_run;
use gma_simt::config::RunConfig;
use gma_simt::data::{parse_alignments, tokenize, Sentence};
use gma_simt::gma::{self, PriorVariant};
use gma_simt::metrics;
use gma_simt::model::checkpoint::Checkpoint;
use gma_simt::policy::{self, simulate_streaming, PolicyTrace};
use gma_simt::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::FileNotFound(p) => PyFileNotFoundError::new_err(p.display().to_string()),
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn lines(text: &[String]) -> Vec<Sentence> {
    text.iter().map(|l| tokenize(l)).collect()
}

/// Result of streaming one sentence.
#[pyclass(get_all, frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct Translation {
    pub hypothesis: String,
    /// Source words received at each write, the final EOS write included.
    pub g: Vec<usize>,
    /// READ/WRITE string, e.g. "RRWRW".
    pub actions: String,
    pub source_len: usize,
    pub truncated: bool,
    /// Per write, per decoder layer aligned position.
    pub layer_p: Vec<Vec<f64>>,
}

#[pymethods]
impl Translation {
    /// Output positions of the content tokens (EOS write dropped).
    fn content_g(&self) -> PyResult<Vec<usize>> {
        let trace = PolicyTrace {
            g: self.g.clone(),
            actions: policy::parse_actions(&self.actions).map_err(to_py)?,
            source_len: self.source_len,
            target_len: self.g.len(),
            truncated: self.truncated,
        };
        Ok(trace.content_g().to_vec())
    }

    fn __repr__(&self) -> String {
        format!("Translation({:?}, actions={:?})", self.hypothesis, self.actions)
    }
}

/// A trained model with its vocabularies.
#[pyclass]
pub struct Translator {
    inner: Checkpoint,
}

#[pymethods]
impl Translator {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: Checkpoint::load(&path).map_err(to_py)? })
    }

    /// Builds and trains a model from a JSON run configuration string.
    #[staticmethod]
    fn train(config_json: &str) -> PyResult<(Self, Vec<f64>)> {
        let cfg = RunConfig::from_json(config_json).map_err(to_py)?;
        let mut losses = Vec::new();
        let inner = train_run(&cfg, |e| losses.push(e.loss)).map_err(to_py)?;
        Ok((Self { inner }, losses))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    fn to_bytes(&self) -> PyResult<Vec<u8>> {
        self.inner.to_bytes().map_err(to_py)
    }

    #[getter]
    fn delta(&self) -> f64 {
        self.inner.model.delta()
    }

    #[setter]
    fn set_delta(&mut self, delta: f64) -> PyResult<()> {
        self.inner.model.set_delta(delta).map_err(to_py)
    }

    /// Model configuration as a JSON string.
    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(self.inner.model.config()).map_err(|e| to_py(e.into()))
    }

    #[getter]
    fn source_vocab(&self) -> Vec<String> {
        self.inner.source_vocab.tokens().to_vec()
    }

    #[getter]
    fn target_vocab(&self) -> Vec<String> {
        self.inner.target_vocab.tokens().to_vec()
    }

    /// Streams a whitespace-tokenized sentence through the read/write policy.
    #[pyo3(signature = (sentence, delta=None))]
    fn translate(&self, sentence: &str, delta: Option<f64>) -> PyResult<Translation> {
        let ids = self.inner.source_vocab.encode(&tokenize(sentence));
        let delta = delta.unwrap_or_else(|| self.inner.model.delta());
        let out = simulate_streaming(&self.inner.model, ids, delta, None).map_err(to_py)?;
        Ok(Translation {
            hypothesis: self.inner.target_vocab.decode(&out.hypothesis).join(" "),
            actions: out.trace.action_string(),
            g: out.trace.g,
            source_len: out.trace.source_len,
            truncated: out.trace.truncated,
            layer_p: out.layer_p,
        })
    }
}

#[pyfunction]
fn average_lagging(g: Vec<usize>, source_len: usize, target_len: usize) -> PyResult<f64> {
    metrics::average_lagging(&g, source_len, target_len).map_err(to_py)
}

#[pyfunction]
fn consecutive_wait(g: Vec<usize>) -> PyResult<f64> {
    metrics::consecutive_wait(&g).map_err(to_py)
}

#[pyfunction]
fn average_proportion(g: Vec<usize>, source_len: usize, target_len: usize) -> PyResult<f64> {
    metrics::average_proportion(&g, source_len, target_len).map_err(to_py)
}

#[pyfunction]
fn differentiable_average_lagging(g: Vec<usize>, source_len: usize, target_len: usize) -> PyResult<f64> {
    metrics::differentiable_average_lagging(&g, source_len, target_len).map_err(to_py)
}

/// Corpus BLEU-4 over whitespace-tokenized lines.
#[pyfunction]
fn bleu(hypotheses: Vec<String>, references: Vec<String>) -> PyResult<f64> {
    metrics::bleu(&lines(&hypotheses), &lines(&references)).map_err(to_py)
}

/// AER between two alignment sets in Pharaoh text, one sentence per line.
#[pyfunction]
fn aer(predicted: &str, gold: &str) -> PyResult<f64> {
    let origin = PathBuf::from("<string>");
    let a = parse_alignments(predicted, &origin).map_err(to_py)?;
    let s = parse_alignments(gold, &origin).map_err(to_py)?;
    metrics::aer(&a, &s).map_err(to_py)
}

/// Output positions of the wait-k schedule.
#[pyfunction]
fn wait_k(k: usize, source_len: usize, target_len: usize) -> PyResult<Vec<usize>> {
    Ok(policy::wait_k_trace(k, source_len, target_len).map_err(to_py)?.g)
}

/// Raises `ValueError` naming the first violated invariant.
#[pyfunction]
fn validate_trace(g: Vec<usize>, actions: &str, source_len: usize) -> PyResult<()> {
    let trace = PolicyTrace {
        target_len: g.len(),
        g,
        actions: policy::parse_actions(actions).map_err(to_py)?,
        source_len,
        truncated: false,
    };
    policy::validate_trace(&trace).map_err(|v| PyValueError::new_err(v.to_string()))
}

/// Aligned positions `p_i = 1 + Σ_{k≤i} Δp_k`.
#[pyfunction]
fn aligned_positions(delta_p: Vec<f64>) -> PyResult<Vec<f64>> {
    gma::aligned_positions(&delta_p).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (p, delta, source_len, source_complete=true))]
fn output_positions(p: Vec<f64>, delta: f64, source_len: usize, source_complete: bool) -> Vec<usize> {
    gma::output_positions(&p, delta, source_len, source_complete)
}

fn prior_variant(name: &str) -> PyResult<PriorVariant> {
    serde_json::from_value(serde_json::Value::String(name.into()))
        .map_err(|_| PyValueError::new_err(format!("unknown prior {name:?}")))
}

/// Normalized prior over `1..=source_len`, zero beyond `support`.
#[pyfunction]
#[pyo3(signature = (p, sigma, support, source_len, variant="gaussian"))]
fn prior_distribution(p: f64, sigma: f64, support: usize, source_len: usize, variant: &str) -> PyResult<Vec<f64>> {
    gma::prior_distribution(p, sigma, support, source_len, prior_variant(variant)?).map_err(to_py)
}

/// `normalize(α ⊙ prior)` over the first `support` positions.
#[pyfunction]
fn posterior_attention(alpha: Vec<f64>, prior: Vec<f64>, support: usize) -> PyResult<Vec<f64>> {
    gma::posterior_attention(&alpha, &prior, support).map_err(to_py)
}

#[pymodule]
fn pygma(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Translator>()?;
    m.add_class::<Translation>()?;
    m.add_function(wrap_pyfunction!(average_lagging, m)?)?;
    m.add_function(wrap_pyfunction!(consecutive_wait, m)?)?;
    m.add_function(wrap_pyfunction!(average_proportion, m)?)?;
    m.add_function(wrap_pyfunction!(differentiable_average_lagging, m)?)?;
    m.add_function(wrap_pyfunction!(bleu, m)?)?;
    m.add_function(wrap_pyfunction!(aer, m)?)?;
    m.add_function(wrap_pyfunction!(wait_k, m)?)?;
    m.add_function(wrap_pyfunction!(validate_trace, m)?)?;
    m.add_function(wrap_pyfunction!(aligned_positions, m)?)?;
    m.add_function(wrap_pyfunction!(output_positions, m)?)?;
    m.add_function(wrap_pyfunction!(prior_distribution, m)?)?;
    m.add_function(wrap_pyfunction!(posterior_attention, m)?)?;
    Ok(())
}
