//! Python bindings: the main types and operations of the context-extension
//! library, driven in-process from Python. Tokens cross the boundary as
//! plain `list[int]`, vectors as `list[list[float]]`.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use exembed::corpus::{CorpusSpec, GeneratorKind};
use exembed::evaluation::{EvalContext, EvalMethod, EvalSpec};
use exembed::extension::{DownscaleScheme, ScalingFactor};
use exembed::inference::{Sampler, ScalingChoice, SessionState};
use exembed::model::{ForwardOpts, ModelConfig, PretrainConfig};
use exembed::tensor::{Graph, ParamSet};
use exembed::training::{Objective, TrainerConfig};

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn parse_scheme(s: &str) -> PyResult<DownscaleScheme> {
    match s {
        "strided" => Ok(DownscaleScheme::Strided),
        "random" => Ok(DownscaleScheme::Random),
        "terminal" => Ok(DownscaleScheme::Terminal),
        other => Err(PyValueError::new_err(format!("unknown scheme `{other}`"))),
    }
}

fn parse_method(s: &str) -> PyResult<EvalMethod> {
    match s {
        "truncate" => Ok(EvalMethod::Truncate),
        "sliding_window" => Ok(EvalMethod::SlidingWindow),
        "ext_embedding" => Ok(EvalMethod::ExtEmbedding),
        "full_attention" => Ok(EvalMethod::FullAttention),
        other => Err(PyValueError::new_err(format!("unknown method `{other}`"))),
    }
}

/// Architecture hyperparameters.
#[pyclass(name = "ModelConfig")]
#[derive(Clone)]
struct PyModelConfig {
    inner: ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    #[new]
    #[pyo3(signature = (vocab_size=259, model_dim=128, n_layers=4, n_heads=4,
                        n_embedder_layers=2, max_window=512, rope_base=10000.0,
                        ffn_dim=None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        vocab_size: usize,
        model_dim: usize,
        n_layers: usize,
        n_heads: usize,
        n_embedder_layers: usize,
        max_window: usize,
        rope_base: f64,
        ffn_dim: Option<usize>,
    ) -> PyResult<Self> {
        let inner = ModelConfig {
            vocab_size,
            model_dim,
            n_layers,
            n_heads,
            n_embedder_layers,
            max_window,
            rope_base,
            ffn_dim,
        };
        inner.validate().map_err(err)?;
        Ok(PyModelConfig { inner })
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size
    }

    #[getter]
    fn model_dim(&self) -> usize {
        self.inner.model_dim
    }

    #[getter]
    fn max_window(&self) -> usize {
        self.inner.max_window
    }

    fn __repr__(&self) -> String {
        format!(
            "ModelConfig(vocab_size={}, model_dim={}, n_layers={}, n_heads={}, \
             n_embedder_layers={}, max_window={})",
            self.inner.vocab_size,
            self.inner.model_dim,
            self.inner.n_layers,
            self.inner.n_heads,
            self.inner.n_embedder_layers,
            self.inner.max_window
        )
    }
}

/// A frozen downstream language model.
#[pyclass(name = "Model")]
struct PyModel {
    cfg: ModelConfig,
    params: ParamSet<f32>,
}

#[pymethods]
impl PyModel {
    /// Pretrain on token documents by plain next-token prediction, then
    /// freeze.
    #[staticmethod]
    #[pyo3(signature = (config, docs, steps=200, batch_size=2, window=64,
                        learning_rate=1e-3, seed=0))]
    fn pretrain(
        config: &PyModelConfig,
        docs: Vec<Vec<u32>>,
        steps: usize,
        batch_size: usize,
        window: usize,
        learning_rate: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let pc = PretrainConfig { steps, batch_size, window, learning_rate, seed };
        let (params, _) =
            exembed::model::pretrain_downstream(&docs, &config.inner, &pc).map_err(err)?;
        Ok(PyModel { cfg: config.inner.clone(), params })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (cfg, params) = exembed::checkpoint::load(&path, "base", false).map_err(err)?;
        Ok(PyModel { cfg, params })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        exembed::checkpoint::save(&path, &self.cfg, &self.params).map_err(err)
    }

    #[getter]
    fn config(&self) -> PyModelConfig {
        PyModelConfig { inner: self.cfg.clone() }
    }

    /// Fresh embedder initialized from the first layers of this model.
    fn init_embedder(&self) -> PyEmbedder {
        PyEmbedder {
            cfg: self.cfg.clone(),
            params: exembed::model::embedder_from_downstream(&self.cfg, &self.params),
        }
    }

    /// Next-token logits at every position, `[len(tokens)][vocab]`.
    fn logits(&self, tokens: Vec<u32>) -> PyResult<Vec<Vec<f32>>> {
        let mut g: Graph<f32> = Graph::new();
        let out =
            exembed::model::forward_tokens(&mut g, &tokens, &self.params, &self.cfg, ForwardOpts::default())
                .map_err(err)?;
        let t = g.value(out.logits);
        Ok((0..t.rows()).map(|r| t.row(r).to_vec()).collect())
    }
}

/// The trainable compression model (shallow prefix of the downstream
/// stack).
#[pyclass(name = "Embedder")]
struct PyEmbedder {
    cfg: ModelConfig,
    params: ParamSet<f32>,
}

#[pymethods]
impl PyEmbedder {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (cfg, params) = exembed::checkpoint::load(&path, "ex", false).map_err(err)?;
        Ok(PyEmbedder { cfg, params })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        exembed::checkpoint::save(&path, &self.cfg, &self.params).map_err(err)
    }

    /// Compress a document: one row set per full chunk, each
    /// `ceil(chunk/k)` rows of model dimension.
    #[pyo3(signature = (tokens, chunk_len, k, scheme="strided", seed=0))]
    fn compress(
        &self,
        tokens: Vec<u32>,
        chunk_len: usize,
        k: usize,
        scheme: &str,
        seed: u64,
    ) -> PyResult<Vec<Vec<Vec<f32>>>> {
        use rand::SeedableRng;
        let scheme = parse_scheme(scheme)?;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
        let sets = exembed::extension::compress_document(
            &tokens,
            chunk_len,
            ScalingFactor(k),
            scheme,
            &self.params,
            &self.cfg,
            &mut rng,
        )
        .map_err(err)?;
        Ok(sets
            .iter()
            .map(|s| (0..s.rows.rows()).map(|r| s.rows.row(r).to_vec()).collect())
            .collect())
    }
}

/// Train an embedder against a frozen model; returns the trained embedder
/// and the per-step losses.
#[pyfunction]
#[pyo3(signature = (model, embedder, docs, objective="two_stream_ar",
                    k_candidates=vec![2, 4, 8], train_chunk_size=16,
                    sample_len=64, learning_rate=5e-5, lr_multiplier=10.0,
                    batch_size=2, max_steps=20, seed=0))]
#[allow(clippy::too_many_arguments)]
fn train_embedder(
    model: &PyModel,
    embedder: &PyEmbedder,
    docs: Vec<Vec<u32>>,
    objective: &str,
    k_candidates: Vec<usize>,
    train_chunk_size: usize,
    sample_len: usize,
    learning_rate: f64,
    lr_multiplier: f64,
    batch_size: usize,
    max_steps: usize,
    seed: u64,
) -> PyResult<(PyEmbedder, Vec<f64>)> {
    let objective = match objective {
        "two_stream_ar" => Objective::TwoStreamAr,
        "auto_encoding" => Objective::AutoEncoding,
        "text_continuation" => Objective::TextContinuation,
        other => return Err(PyValueError::new_err(format!("unknown objective `{other}`"))),
    };
    let tc = TrainerConfig {
        objective,
        k_candidates,
        train_chunk_size,
        sample_len,
        learning_rate,
        lr_multiplier,
        batch_size,
        max_steps,
        seed,
        checkpoint_every: 0,
    };
    let mut ex = embedder.params.clone();
    ex.set_trainable_all(true);
    let outcome =
        exembed::training::train(&docs, &model.params, ex, &model.cfg, &tc, None).map_err(err)?;
    let losses = outcome.log.iter().map(|r| r.loss).collect();
    Ok((PyEmbedder { cfg: embedder.cfg.clone(), params: outcome.params_ex }, losses))
}

/// Tail perplexity of one document under a context method
/// ("truncate" | "sliding_window" | "ext_embedding" | "full_attention").
#[pyfunction]
#[pyo3(signature = (model, embedder, doc, context_len, method="ext_embedding",
                    k=8, tail_len=16, chunk_len=16, recent_raw=16, scheme="strided"))]
#[allow(clippy::too_many_arguments)]
fn tail_perplexity(
    model: &PyModel,
    embedder: &PyEmbedder,
    doc: Vec<u32>,
    context_len: usize,
    method: &str,
    k: usize,
    tail_len: usize,
    chunk_len: usize,
    recent_raw: usize,
    scheme: &str,
) -> PyResult<f64> {
    let spec = EvalSpec {
        predict_tail_len: tail_len,
        chunk_len,
        recent_raw,
        scheme: parse_scheme(scheme)?,
        ..EvalSpec::default()
    };
    let ectx = EvalContext { base: &model.params, ex: &embedder.params, cfg: &model.cfg };
    exembed::evaluation::tail_perplexity(&ectx, &doc, context_len, parse_method(method)?, k, &spec)
        .map_err(err)
}

/// Smallest candidate factor fitting the window, or None when the raw
/// document already fits.
#[pyfunction]
fn select_scaling_factor(
    doc_len: usize,
    question_len: usize,
    window: usize,
    chunk_len: usize,
    k_candidates: Vec<usize>,
) -> PyResult<Option<usize>> {
    match exembed::inference::select_scaling_factor(
        doc_len,
        question_len,
        window,
        chunk_len,
        &k_candidates,
    )
    .map_err(err)?
    {
        ScalingChoice::Uncompressed => Ok(None),
        ScalingChoice::Factor(k) => Ok(Some(k.get())),
    }
}

/// Streaming generation session with automatic condensation.
#[pyclass(name = "Session")]
struct PySession {
    state: SessionState,
}

#[pymethods]
impl PySession {
    #[new]
    #[pyo3(signature = (model, k=8, capacity=None, session_len=None))]
    fn new(
        model: &PyModel,
        k: usize,
        capacity: Option<usize>,
        session_len: Option<usize>,
    ) -> PyResult<Self> {
        let capacity = capacity.unwrap_or(model.cfg.max_window);
        let session_len = session_len.unwrap_or((capacity / 8).max(1));
        let state = SessionState::with_layout(capacity, session_len, k).map_err(err)?;
        Ok(PySession { state })
    }

    /// Feed external tokens; sessions condense automatically.
    fn push(&mut self, model: &PyModel, embedder: &PyEmbedder, tokens: Vec<u32>) -> PyResult<()> {
        let _ = model;
        for t in tokens {
            self.state.push_token(t, &embedder.params, &model.cfg).map_err(err)?;
        }
        Ok(())
    }

    /// Generate `n` tokens greedily.
    fn generate(&mut self, model: &PyModel, embedder: &PyEmbedder, n: usize) -> PyResult<Vec<u32>> {
        let mut sampler = Sampler::greedy();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(
                self.state
                    .step(&model.params, &embedder.params, &model.cfg, &mut sampler)
                    .map_err(err)?,
            );
        }
        Ok(out)
    }

    #[getter]
    fn live_rows(&self) -> usize {
        self.state.live_rows()
    }

    #[getter]
    fn condensations(&self) -> usize {
        self.state.condensations()
    }
}

/// Deterministic synthetic documents (token lists, BOS/EOS included).
#[pyfunction]
#[pyo3(signature = (n_docs, generator="mixed", doc_len=512, kv_pairs_per_doc=4,
                    dep_distance_min=16, dep_distance_max=200, seed=0))]
fn generate_corpus(
    n_docs: usize,
    generator: &str,
    doc_len: usize,
    kv_pairs_per_doc: usize,
    dep_distance_min: usize,
    dep_distance_max: usize,
    seed: u64,
) -> PyResult<Vec<Vec<u32>>> {
    let generator = match generator {
        "markov" => GeneratorKind::Markov,
        "kv_recall" => GeneratorKind::KvRecall,
        "mixed" => GeneratorKind::Mixed,
        other => return Err(PyValueError::new_err(format!("unknown generator `{other}`"))),
    };
    let spec = CorpusSpec {
        generator,
        doc_len,
        kv_pairs_per_doc,
        dep_distance_min,
        dep_distance_max,
        seed,
        ..CorpusSpec::default()
    };
    exembed::corpus::generate_tokens(&spec, n_docs).map_err(err)
}

/// Byte-level tokenization (one token per byte).
#[pyfunction]
fn tokenize(data: Vec<u8>) -> Vec<u32> {
    exembed::corpus::tokenize(&data)
}

/// Inverse of tokenize; special tokens are dropped.
#[pyfunction]
fn detokenize(ids: Vec<u32>) -> Vec<u8> {
    exembed::corpus::detokenize(&ids)
}

#[pymodule]
fn exembed_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyEmbedder>()?;
    m.add_class::<PySession>()?;
    m.add_function(wrap_pyfunction!(train_embedder, m)?)?;
    m.add_function(wrap_pyfunction!(tail_perplexity, m)?)?;
    m.add_function(wrap_pyfunction!(select_scaling_factor, m)?)?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(detokenize, m)?)?;
    m.add("BOS", exembed::corpus::BOS)?;
    m.add("EOS", exembed::corpus::EOS)?;
    m.add("VOCAB_SIZE", exembed::corpus::VOCAB_SIZE)?;
    Ok(())
}
