//! Perplexity and synthetic-recall harness.
//!
//! The central measurement is tail perplexity: exp of the mean NLL over the
//! final `predict_tail_len` tokens of a document, conditioned on the
//! preceding context presented one of four ways:
//!
//! * `ext_embedding` — far context compressed through the embedder at
//!   factor `k`, recent tokens kept raw;
//! * `truncate` — only the last `max_window` tokens, raw;
//! * `sliding_window` — each tail token scored with attention over exactly
//!   the preceding `max_window - 1` tokens, positions reset per window;
//! * `full_attention` — the whole context in one forward, window check
//!   bypassed (reference oracle; costs grow quadratically).

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extension::{build_context, compress_document, DownscaleScheme, ScalingFactor};
use crate::model::{forward_lm, rows_from_tokens, ForwardOpts, InputRow, ModelConfig};
use crate::tensor::{Graph, ParamSet, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMethod {
    Truncate,
    SlidingWindow,
    ExtEmbedding,
    FullAttention,
}

impl EvalMethod {
    pub fn name(self) -> &'static str {
        match self {
            EvalMethod::Truncate => "truncate",
            EvalMethod::SlidingWindow => "sliding_window",
            EvalMethod::ExtEmbedding => "ext_embedding",
            EvalMethod::FullAttention => "full_attention",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalSpec {
    /// Context lengths (tokens) to evaluate; each must be >= the tail.
    #[serde(default = "default_context_lens")]
    pub context_lens: Vec<usize>,
    #[serde(default = "default_tail")]
    pub predict_tail_len: usize,
    #[serde(default = "default_k_values")]
    pub k_values: Vec<usize>,
    #[serde(default)]
    pub scheme: DownscaleScheme,
    #[serde(default = "default_methods")]
    pub methods: Vec<EvalMethod>,
    /// Chunk length fed to the embedder when compressing context.
    #[serde(default = "default_chunk_len")]
    pub chunk_len: usize,
    /// Recent tokens kept raw in front of the tail.
    #[serde(default = "default_recent_raw")]
    pub recent_raw: usize,
    #[serde(default = "default_n_docs")]
    pub n_docs: usize,
}

fn default_context_lens() -> Vec<usize> {
    vec![512, 1024, 2048]
}
fn default_tail() -> usize {
    64
}
fn default_k_values() -> Vec<usize> {
    vec![4, 8, 16]
}
fn default_methods() -> Vec<EvalMethod> {
    vec![EvalMethod::Truncate, EvalMethod::ExtEmbedding]
}
fn default_chunk_len() -> usize {
    64
}
fn default_recent_raw() -> usize {
    64
}
fn default_n_docs() -> usize {
    20
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            context_lens: default_context_lens(),
            predict_tail_len: default_tail(),
            k_values: default_k_values(),
            scheme: DownscaleScheme::default(),
            methods: default_methods(),
            chunk_len: default_chunk_len(),
            recent_raw: default_recent_raw(),
            n_docs: default_n_docs(),
        }
    }
}

/// Model pair under evaluation.
#[derive(Clone, Copy)]
pub struct EvalContext<'a> {
    pub base: &'a ParamSet<f32>,
    pub ex: &'a ParamSet<f32>,
    pub cfg: &'a ModelConfig,
}

/// One aggregated result row (CSV: method,context_len,k,ppl,n_tokens,seconds).
#[derive(Clone, Debug)]
pub struct EvalRow {
    pub method: String,
    pub context_len: usize,
    /// 0 for methods without a scaling factor.
    pub k: usize,
    pub ppl: f64,
    pub n_tokens: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default)]
pub struct EvalResult {
    pub rows: Vec<EvalRow>,
}

impl EvalResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,context_len,k,ppl,n_tokens,seconds\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.6},{},{:.3}\n",
                r.method, r.context_len, r.k, r.ppl, r.n_tokens, r.seconds
            ));
        }
        out
    }

    pub fn find(&self, method: &str, context_len: usize, k: usize) -> Option<&EvalRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.context_len == context_len && r.k == k)
    }
}

/// Mean NLL (nats, 64-bit accumulation) of `targets[j]` read from logits
/// row `first_row + j`.
fn span_nll(logits: &Tensor<f32>, first_row: usize, targets: &[u32]) -> f64 {
    let vocab = logits.cols();
    let mut total = 0.0f64;
    for (j, &t) in targets.iter().enumerate() {
        let row = logits.row(first_row + j);
        let mut max = f64::NEG_INFINITY;
        for &v in row {
            max = max.max(v as f64);
        }
        let mut denom = 0.0f64;
        for &v in row {
            denom += ((v as f64) - max).exp();
        }
        debug_assert!((t as usize) < vocab);
        total += max + denom.ln() - row[t as usize] as f64;
    }
    total / targets.len() as f64
}

/// Tail NLL for a row sequence already assembled: the last `tail_len` rows
/// are the tail tokens. When the tail is the whole sequence its first token
/// has no predecessor and is skipped.
fn score_tail_rows(
    rows: &[InputRow<f32>],
    tail: &[u32],
    params: &ParamSet<f32>,
    cfg: &ModelConfig,
    oracle: bool,
) -> Result<f64> {
    let n = rows.len();
    let opts = ForwardOpts {
        causal: true,
        window_override: if oracle { Some(usize::MAX) } else { None },
    };
    let mut g: Graph<f32> = Graph::new();
    let out = forward_lm(&mut g, rows, params, cfg, opts)?;
    let logits = g.value(out.logits);
    if n == tail.len() {
        Ok(span_nll(logits, 0, &tail[1..]))
    } else {
        Ok(span_nll(logits, n - tail.len() - 1, tail))
    }
}

/// Tail perplexity of one document at a given context length and method.
/// `k` is ignored except for `ext_embedding`.
pub fn tail_perplexity(
    ectx: &EvalContext,
    doc: &[u32],
    context_len: usize,
    method: EvalMethod,
    k: usize,
    spec: &EvalSpec,
) -> Result<f64> {
    let tail_len = spec.predict_tail_len;
    if doc.len() < context_len {
        return Err(Error::InvalidArg(format!(
            "document of {} tokens shorter than context {context_len}",
            doc.len()
        )));
    }
    if context_len < tail_len || tail_len == 0 {
        return Err(Error::InvalidArg(format!(
            "context {context_len} must cover a nonempty tail of {tail_len}"
        )));
    }
    let window = &doc[..context_len];
    let tail = &window[context_len - tail_len..];
    let cfg = ectx.cfg;

    let nll = match method {
        EvalMethod::Truncate => {
            let keep = window.len().min(cfg.max_window);
            let kept = &window[window.len() - keep..];
            score_tail_rows(&rows_from_tokens(kept), tail, ectx.base, cfg, false)?
        }
        EvalMethod::FullAttention => {
            score_tail_rows(&rows_from_tokens(window), tail, ectx.base, cfg, true)?
        }
        EvalMethod::SlidingWindow => {
            if window.len() <= cfg.max_window {
                score_tail_rows(&rows_from_tokens(window), tail, ectx.base, cfg, false)?
            } else {
                // per-token window, positions reset to 0..W-1
                let w = cfg.max_window;
                let mut total = 0.0f64;
                for j in 0..tail_len {
                    let t = context_len - tail_len + j;
                    let ctx_tokens = &window[t - (w - 1)..t];
                    let mut g: Graph<f32> = Graph::new();
                    let out = forward_lm(
                        &mut g,
                        &rows_from_tokens::<f32>(ctx_tokens),
                        ectx.base,
                        cfg,
                        ForwardOpts::default(),
                    )?;
                    let logits = g.value(out.logits);
                    total += span_nll(logits, logits.rows() - 1, &[window[t]]);
                }
                total / tail_len as f64
            }
        }
        EvalMethod::ExtEmbedding => {
            let prefix = &window[..context_len - tail_len];
            let compress_upto = prefix.len().saturating_sub(spec.recent_raw);
            let compress_len = (compress_upto / spec.chunk_len) * spec.chunk_len;
            let (to_compress, raw_recent) = prefix.split_at(compress_len);
            let sets = if to_compress.is_empty() {
                Vec::new()
            } else {
                let mut rng = ChaCha20Rng::seed_from_u64(0x5eed ^ context_len as u64);
                compress_document(
                    to_compress,
                    spec.chunk_len,
                    ScalingFactor(k),
                    spec.scheme,
                    ectx.ex,
                    cfg,
                    &mut rng,
                )?
            };
            let mut recent = raw_recent.to_vec();
            recent.extend_from_slice(tail);
            let rows = build_context::<f32>(&sets, &recent, cfg.max_window)?;
            score_tail_rows(&rows, tail, ectx.base, cfg, false)?
        }
    };
    Ok(nll.exp())
}

/// The compressed-context tail perplexity computed through the offline
/// path: full embedder states are precomputed into an [`EmbeddingStore`]
/// and rows are sampled from it at query time. Produces bit-identical
/// perplexity to the direct (online) path because both chunk and select
/// rows the same way.
///
/// [`EmbeddingStore`]: crate::inference::EmbeddingStore
pub fn tail_perplexity_offline(
    ectx: &EvalContext,
    doc: &[u32],
    context_len: usize,
    k: usize,
    spec: &EvalSpec,
) -> Result<f64> {
    let tail_len = spec.predict_tail_len;
    if doc.len() < context_len {
        return Err(Error::InvalidArg(format!(
            "document of {} tokens shorter than context {context_len}",
            doc.len()
        )));
    }
    if context_len < tail_len || tail_len == 0 {
        return Err(Error::InvalidArg(format!(
            "context {context_len} must cover a nonempty tail of {tail_len}"
        )));
    }
    let window = &doc[..context_len];
    let tail = &window[context_len - tail_len..];
    let prefix = &window[..context_len - tail_len];
    let compress_upto = prefix.len().saturating_sub(spec.recent_raw);
    let compress_len = (compress_upto / spec.chunk_len) * spec.chunk_len;
    let (to_compress, raw_recent) = prefix.split_at(compress_len);

    let sets = if to_compress.is_empty() {
        Vec::new()
    } else {
        let store =
            crate::inference::precompute("eval", to_compress, spec.chunk_len, ectx.ex, ectx.cfg)?;
        let mut rng = ChaCha20Rng::seed_from_u64(0x5eed ^ context_len as u64);
        store.sample_sets(k, spec.scheme, &mut rng)?
    };
    let mut recent = raw_recent.to_vec();
    recent.extend_from_slice(tail);
    let rows = build_context::<f32>(&sets, &recent, ectx.cfg.max_window)?;
    let nll = score_tail_rows(&rows, tail, ectx.base, ectx.cfg, false)?;
    Ok(nll.exp())
}

/// Grid evaluation over context lengths x methods x factors, aggregated
/// over documents (arithmetic mean of per-document tail perplexities).
/// Combinations that overflow the window are skipped and reported back.
pub fn sweep(
    ectx: &EvalContext,
    docs: &[Vec<u32>],
    spec: &EvalSpec,
    timing: bool,
) -> Result<(EvalResult, Vec<String>)> {
    sweep_with_path(ectx, docs, spec, timing, false)
}

/// [`sweep`] with the compressed-context rows read back through the
/// precomputed-store path instead of compressed on the fly.
pub fn sweep_with_path(
    ectx: &EvalContext,
    docs: &[Vec<u32>],
    spec: &EvalSpec,
    timing: bool,
    offline: bool,
) -> Result<(EvalResult, Vec<String>)> {
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for &context_len in &spec.context_lens {
        for &method in &spec.methods {
            let ks: &[usize] =
                if method == EvalMethod::ExtEmbedding { &spec.k_values } else { &[0] };
            for &k in ks {
                let t0 = Instant::now();
                let mut sum = 0.0f64;
                let mut n_docs = 0usize;
                let mut overflowed = false;
                for doc in docs.iter().take(spec.n_docs) {
                    let ppl = if offline && method == EvalMethod::ExtEmbedding {
                        tail_perplexity_offline(ectx, doc, context_len, k, spec)
                    } else {
                        tail_perplexity(ectx, doc, context_len, method, k, spec)
                    };
                    match ppl {
                        Ok(ppl) => {
                            sum += ppl;
                            n_docs += 1;
                        }
                        Err(Error::Capacity { needed, capacity }) => {
                            skipped.push(format!(
                                "{} ctx={context_len} k={k}: needs {needed} rows, window {capacity}",
                                method.name()
                            ));
                            overflowed = true;
                            break;
                        }
                        Err(e) => return Err(e),
                    }
                }
                if overflowed || n_docs == 0 {
                    continue;
                }
                rows.push(EvalRow {
                    method: method.name().to_string(),
                    context_len,
                    k,
                    ppl: sum / n_docs as f64,
                    n_tokens: n_docs * spec.predict_tail_len,
                    seconds: if timing { t0.elapsed().as_secs_f64() } else { 0.0 },
                });
            }
        }
    }
    Ok((EvalResult { rows }, skipped))
}

/// Exact-match accuracy on planted key-value recall. A probe plants a
/// binding `distance` tokens before a trailing `?key=` prompt; the model
/// generates the value greedily under the chosen context method.
pub fn synth_recall_accuracy(
    ectx: &EvalContext,
    corpus_spec: &crate::corpus::CorpusSpec,
    n_probes: usize,
    distance: usize,
    k: usize,
    method: EvalMethod,
    spec: &EvalSpec,
) -> Result<f64> {
    let mut hits = 0usize;
    for i in 0..n_probes {
        let lead_in = 48 + (i % 7) * 8;
        let probe = crate::corpus::recall_probe(corpus_spec, distance, lead_in, i as u64 + 1)?;
        let got = generate_with_method(ectx, &probe.context, probe.answer.len(), method, k, spec)?;
        if got == probe.answer {
            hits += 1;
        }
    }
    Ok(hits as f64 / n_probes as f64)
}

/// Greedy generation of `n_new` tokens conditioned on `context` presented
/// under `method`.
pub fn generate_with_method(
    ectx: &EvalContext,
    context: &[u32],
    n_new: usize,
    method: EvalMethod,
    k: usize,
    spec: &EvalSpec,
) -> Result<Vec<u32>> {
    let cfg = ectx.cfg;
    let mut generated = Vec::with_capacity(n_new);

    match method {
        EvalMethod::ExtEmbedding => {
            let compress_upto = context.len().saturating_sub(spec.recent_raw);
            let compress_len = (compress_upto / spec.chunk_len) * spec.chunk_len;
            let (to_compress, raw_recent) = context.split_at(compress_len);
            let sets = if to_compress.is_empty() {
                Vec::new()
            } else {
                let mut rng = ChaCha20Rng::seed_from_u64(0x9e37);
                compress_document(
                    to_compress,
                    spec.chunk_len,
                    ScalingFactor(k),
                    spec.scheme,
                    ectx.ex,
                    cfg,
                    &mut rng,
                )?
            };
            let mut recent = raw_recent.to_vec();
            for _ in 0..n_new {
                let rows = build_context::<f32>(&sets, &recent, cfg.max_window)?;
                let mut g: Graph<f32> = Graph::new();
                let out = forward_lm(&mut g, &rows, ectx.base, cfg, ForwardOpts::default())?;
                let logits = g.value(out.logits);
                let next = argmax_row(logits, logits.rows() - 1);
                generated.push(next);
                recent.push(next);
            }
        }
        EvalMethod::Truncate | EvalMethod::SlidingWindow => {
            let mut tokens = context.to_vec();
            for _ in 0..n_new {
                let keep = tokens.len().min(cfg.max_window);
                let kept = &tokens[tokens.len() - keep..];
                let mut g: Graph<f32> = Graph::new();
                let out = forward_lm(
                    &mut g,
                    &rows_from_tokens::<f32>(kept),
                    ectx.base,
                    cfg,
                    ForwardOpts::default(),
                )?;
                let logits = g.value(out.logits);
                let next = argmax_row(logits, logits.rows() - 1);
                generated.push(next);
                tokens.push(next);
            }
        }
        EvalMethod::FullAttention => {
            let mut tokens = context.to_vec();
            for _ in 0..n_new {
                let mut g: Graph<f32> = Graph::new();
                let opts = ForwardOpts { causal: true, window_override: Some(usize::MAX) };
                let out =
                    forward_lm(&mut g, &rows_from_tokens::<f32>(&tokens), ectx.base, cfg, opts)?;
                let logits = g.value(out.logits);
                let next = argmax_row(logits, logits.rows() - 1);
                generated.push(next);
                tokens.push(next);
            }
        }
    }
    Ok(generated)
}

fn argmax_row(logits: &Tensor<f32>, row: usize) -> u32 {
    let r = logits.row(row);
    let mut best = 0usize;
    for (i, &v) in r.iter().enumerate() {
        if v > r[best] {
            best = i;
        }
    }
    best as u32
}

/// Evaluate the same embedder under the base model and a fine-tuned
/// derivative; returns (base rows, derivative rows) with the derivative's
/// own truncate baseline included.
pub fn compatibility_probe(
    base: &ParamSet<f32>,
    derivative: &ParamSet<f32>,
    ex: &ParamSet<f32>,
    cfg: &ModelConfig,
    docs: &[Vec<u32>],
    spec: &EvalSpec,
) -> Result<(EvalResult, EvalResult)> {
    let ectx_base = EvalContext { base, ex, cfg };
    let (res_base, _) = sweep(&ectx_base, docs, spec, false)?;
    let ectx_deriv = EvalContext { base: derivative, ex, cfg };
    let (res_deriv, _) = sweep(&ectx_deriv, docs, spec, false)?;
    Ok((res_base, res_deriv))
}
