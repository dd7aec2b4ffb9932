//! Online (streaming) and offline (precomputed) inference.
//!
//! Online: generation runs in sessions. Raw tokens accumulate in a buffer;
//! when the session fills, the buffer is condensed through the embedder
//! into compressed rows and the next session starts. When the compressed
//! cache itself approaches the window, the oldest sets are re-condensed at
//! twice their factor rather than dropped, so far context degrades
//! gradually instead of vanishing.
//!
//! Offline: the embedder's full output states are precomputed and stored
//! per chunk; any scaling factor can be sampled from them at query time.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::extension::{
    build_context, downscale_indices, embed_chunk, make_chunk_plan, strided_indices,
    DownscaleScheme, ExtensibleEmbeddingSet, ScalingFactor,
};
use crate::model::{forward_lm, ForwardOpts, ModelConfig};
use crate::tensor::{Graph, ParamSet, Tensor};

/// Streaming state: compressed rows from closed sessions plus the raw
/// token buffer of the current session.
#[derive(Clone, Debug)]
pub struct SessionState {
    pub ex_cache: Vec<ExtensibleEmbeddingSet>,
    pub token_buffer: Vec<u32>,
    /// Window capacity in rows (compressed + raw).
    pub capacity: usize,
    /// Raw tokens condensed per session; also the raw-token reserve.
    pub session_len: usize,
    pub k: usize,
    pub scheme: DownscaleScheme,
    pub session_index: usize,
    peak_rows: usize,
    condensations: usize,
    /// Only consulted by the random downscale scheme.
    rng: ChaCha20Rng,
}

impl SessionState {
    /// Capacity defaults to the model window with one eighth reserved for
    /// raw tokens per session.
    pub fn new(cfg: &ModelConfig, k: usize) -> Result<Self> {
        Self::with_layout(cfg.max_window, (cfg.max_window / 8).max(1), k)
    }

    pub fn with_layout(capacity: usize, session_len: usize, k: usize) -> Result<Self> {
        if session_len == 0 || session_len >= capacity {
            return Err(Error::InvalidArg(format!(
                "session length {session_len} must be in [1, capacity={capacity})"
            )));
        }
        if k == 0 || k > session_len {
            return Err(Error::InvalidArg(format!(
                "scaling factor {k} must be in [1, session_len={session_len}]"
            )));
        }
        Ok(SessionState {
            ex_cache: Vec::new(),
            token_buffer: Vec::new(),
            capacity,
            session_len,
            k,
            scheme: DownscaleScheme::Strided,
            session_index: 0,
            peak_rows: 0,
            condensations: 0,
            rng: ChaCha20Rng::seed_from_u64(0),
        })
    }

    pub fn with_scheme(mut self, scheme: DownscaleScheme, seed: u64) -> Self {
        self.scheme = scheme;
        self.rng = ChaCha20Rng::seed_from_u64(seed);
        self
    }

    pub fn ex_rows(&self) -> usize {
        self.ex_cache.iter().map(|s| s.n_rows()).sum()
    }

    pub fn live_rows(&self) -> usize {
        self.ex_rows() + self.token_buffer.len()
    }

    /// High-water mark of simultaneously live rows.
    pub fn peak_rows(&self) -> usize {
        self.peak_rows
    }

    pub fn condensations(&self) -> usize {
        self.condensations
    }

    fn note_rows(&mut self) {
        self.peak_rows = self.peak_rows.max(self.live_rows());
    }

    /// Feed one external token, condensing when the session fills.
    pub fn push_token(
        &mut self,
        token: u32,
        params_ex: &ParamSet<f32>,
        cfg: &ModelConfig,
    ) -> Result<()> {
        self.token_buffer.push(token);
        self.note_rows();
        if self.token_buffer.len() >= self.session_len || self.live_rows() >= self.capacity {
            self.condense(params_ex, cfg)?;
        }
        Ok(())
    }

    /// Logits at the last live row (ordinary LM step when the cache is
    /// empty and the buffer holds raw tokens).
    pub fn last_logits(&mut self, params: &ParamSet<f32>, cfg: &ModelConfig) -> Result<Vec<f32>> {
        if self.live_rows() == 0 {
            return Err(Error::InvalidArg("empty session has nothing to condition on".into()));
        }
        self.note_rows();
        let rows = build_context::<f32>(&self.ex_cache, &self.token_buffer, self.capacity)?;
        let mut g: Graph<f32> = Graph::new();
        let out = forward_lm(&mut g, &rows, params, cfg, ForwardOpts::default())?;
        let logits = g.value(out.logits);
        Ok(logits.row(logits.rows() - 1).to_vec())
    }

    /// Predict one token, append it to the buffer, and condense if the
    /// session is now full.
    pub fn step(
        &mut self,
        params: &ParamSet<f32>,
        params_ex: &ParamSet<f32>,
        cfg: &ModelConfig,
        sampler: &mut Sampler,
    ) -> Result<u32> {
        let logits = self.last_logits(params, cfg)?;
        let token = sampler.pick(&logits);
        self.push_token(token, params_ex, cfg)?;
        Ok(token)
    }

    /// Compress the token buffer into one compressed set (session close).
    /// The buffer must hold at least `k` tokens.
    pub fn condense(&mut self, params_ex: &ParamSet<f32>, cfg: &ModelConfig) -> Result<()> {
        if self.token_buffer.len() < self.k {
            return Err(Error::InvalidArg(format!(
                "cannot condense a buffer of {} tokens with factor {}",
                self.token_buffer.len(),
                self.k
            )));
        }
        self.note_rows();
        let hidden = embed_chunk(&self.token_buffer, params_ex, cfg)?;
        let idx = downscale_indices(hidden.rows(), self.k, self.scheme, &mut self.rng)?;
        self.ex_cache.push(ExtensibleEmbeddingSet {
            rows: hidden.select_rows(&idx),
            chunk_index: self.session_index,
            k: self.k,
        });
        self.token_buffer.clear();
        self.session_index += 1;
        self.condensations += 1;

        // hierarchical re-condensation: halve the oldest sets (doubling
        // their effective factor) until the compressed cache leaves room
        // for a full session of raw tokens. Once every set is down to a
        // single row, the two oldest sets merge into one coarser set, so
        // far context degrades instead of vanishing.
        let budget = self.capacity - self.session_len;
        let mut cursor = 0usize;
        while self.ex_rows() > budget {
            if cursor >= self.ex_cache.len() {
                cursor = 0;
                if self.ex_cache.iter().all(|s| s.n_rows() <= 1) {
                    if self.ex_cache.len() < 2 {
                        return Err(Error::Capacity { needed: self.ex_rows(), capacity: budget });
                    }
                    let b = self.ex_cache.remove(1);
                    let a = &mut self.ex_cache[0];
                    let mut data = a.rows.data().to_vec();
                    data.extend_from_slice(b.rows.data());
                    let rows = a.rows.rows() + b.rows.rows();
                    a.rows = Tensor::new(vec![rows, a.rows.cols()], data)?;
                    a.k += b.k;
                }
            }
            let set = &mut self.ex_cache[cursor];
            if set.n_rows() > 1 {
                let keep = strided_indices(set.n_rows(), 2)?;
                set.rows = set.rows.select_rows(&keep);
                set.k *= 2;
            }
            cursor += 1;
        }
        Ok(())
    }
}

/// Decoding rule for generation.
pub enum Sampler {
    Greedy,
    Temperature { temp: f64, rng: ChaCha20Rng },
}

impl Sampler {
    pub fn greedy() -> Self {
        Sampler::Greedy
    }

    pub fn temperature(temp: f64, seed: u64) -> Self {
        Sampler::Temperature { temp, rng: ChaCha20Rng::seed_from_u64(seed) }
    }

    pub fn pick(&mut self, logits: &[f32]) -> u32 {
        match self {
            Sampler::Greedy => argmax(logits),
            Sampler::Temperature { temp, rng } => {
                use rand::Rng;
                let t = (*temp).max(1e-6) as f32;
                let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let weights: Vec<f64> =
                    logits.iter().map(|&l| (((l - max) / t) as f64).exp()).collect();
                let total: f64 = weights.iter().sum();
                let mut dart = rng.random::<f64>() * total;
                for (i, w) in weights.iter().enumerate() {
                    dart -= w;
                    if dart <= 0.0 {
                        return i as u32;
                    }
                }
                (weights.len() - 1) as u32
            }
        }
    }
}

fn argmax(xs: &[f32]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best as u32
}

// ---- offline path ----------------------------------------------------------

/// Precomputed embedder output for one document. Either the full per-chunk
/// states (any factor can be sampled later) or pre-downscaled rows.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    pub doc_id: String,
    pub chunk_len: usize,
    pub dim: usize,
    /// `None`: full output states stored. `Some`: rows were already
    /// downscaled at this factor/scheme.
    pub k: Option<(usize, DownscaleScheme)>,
    pub chunks: Vec<Tensor<f32>>,
    /// Raw trailing tokens (shorter than one chunk), kept uncompressed.
    pub remainder_tokens: Vec<u32>,
}

/// Run the embedder over every full chunk and store the whole output
/// states, so any scaling factor can be sampled at query time.
pub fn precompute(
    doc_id: &str,
    tokens: &[u32],
    chunk_len: usize,
    params_ex: &ParamSet<f32>,
    cfg: &ModelConfig,
) -> Result<EmbeddingStore> {
    let plan = make_chunk_plan(tokens.len(), chunk_len)?;
    let mut chunks = Vec::with_capacity(plan.n_chunks());
    for &(s, e) in &plan.chunks {
        chunks.push(embed_chunk(&tokens[s..e], params_ex, cfg)?);
    }
    Ok(EmbeddingStore {
        doc_id: doc_id.to_string(),
        chunk_len,
        dim: cfg.model_dim,
        k: None,
        chunks,
        remainder_tokens: tokens[plan.remainder.0..plan.remainder.1].to_vec(),
    })
}

impl EmbeddingStore {
    /// Downscale stored states at an ad-hoc factor. A pre-downscaled store
    /// only serves its own factor and scheme. The RNG is consulted only by
    /// the random scheme, which re-samples on every call.
    pub fn sample_sets<R: rand::Rng + ?Sized>(
        &self,
        k: usize,
        scheme: DownscaleScheme,
        rng: &mut R,
    ) -> Result<Vec<ExtensibleEmbeddingSet>> {
        if let Some((stored_k, stored_scheme)) = self.k {
            if stored_k != k || stored_scheme != scheme {
                return Err(Error::InvalidArg(format!(
                    "store holds rows pre-downscaled at k={stored_k} ({stored_scheme:?}); \
                     requested k={k} ({scheme:?})"
                )));
            }
            return Ok(self
                .chunks
                .iter()
                .enumerate()
                .map(|(i, rows)| ExtensibleEmbeddingSet {
                    rows: rows.clone(),
                    chunk_index: i,
                    k,
                })
                .collect());
        }
        let mut sets = Vec::with_capacity(self.chunks.len());
        for (i, full) in self.chunks.iter().enumerate() {
            let idx = downscale_indices(full.rows(), k, scheme, rng)?;
            sets.push(ExtensibleEmbeddingSet { rows: full.select_rows(&idx), chunk_index: i, k });
        }
        Ok(sets)
    }

    /// Reduce a full store to pre-downscaled rows (what `compress --k`
    /// writes).
    pub fn downscaled<R: rand::Rng + ?Sized>(
        &self,
        k: usize,
        scheme: DownscaleScheme,
        rng: &mut R,
    ) -> Result<EmbeddingStore> {
        let sets = self.sample_sets(k, scheme, rng)?;
        Ok(EmbeddingStore {
            doc_id: self.doc_id.clone(),
            chunk_len: self.chunk_len,
            dim: self.dim,
            k: Some((k, scheme)),
            chunks: sets.into_iter().map(|s| s.rows).collect(),
            remainder_tokens: self.remainder_tokens.clone(),
        })
    }
}

/// Logits at the last row of `[compressed context, remainder, question]`.
pub fn query_offline<R: rand::Rng + ?Sized>(
    store: &EmbeddingStore,
    k: usize,
    scheme: DownscaleScheme,
    question: &[u32],
    params: &ParamSet<f32>,
    cfg: &ModelConfig,
    rng: &mut R,
) -> Result<Vec<f32>> {
    let sets = store.sample_sets(k, scheme, rng)?;
    let mut recent = store.remainder_tokens.clone();
    recent.extend_from_slice(question);
    let rows = build_context::<f32>(&sets, &recent, cfg.max_window)?;
    let mut g: Graph<f32> = Graph::new();
    let out = forward_lm(&mut g, &rows, params, cfg, ForwardOpts::default())?;
    let logits = g.value(out.logits);
    Ok(logits.row(logits.rows() - 1).to_vec())
}

/// Outcome of [`select_scaling_factor`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScalingChoice {
    /// The document fits raw; no compression needed.
    Uncompressed,
    Factor(ScalingFactor),
}

/// Smallest candidate factor whose compressed rows plus remainder plus
/// question fit the window. Errors when even the largest candidate
/// overflows (the caller must truncate).
pub fn select_scaling_factor(
    doc_len: usize,
    question_len: usize,
    window: usize,
    chunk_len: usize,
    k_candidates: &[usize],
) -> Result<ScalingChoice> {
    if doc_len + question_len <= window {
        return Ok(ScalingChoice::Uncompressed);
    }
    let full_chunks = doc_len / chunk_len;
    let remainder = doc_len % chunk_len;
    let mut candidates: Vec<usize> = k_candidates.to_vec();
    candidates.sort_unstable();
    for k in candidates {
        if k == 0 || k > chunk_len {
            continue;
        }
        let rows = full_chunks * chunk_len.div_ceil(k) + remainder + question_len;
        if rows <= window {
            return Ok(ScalingChoice::Factor(ScalingFactor(k)));
        }
    }
    Err(Error::Capacity {
        needed: full_chunks * chunk_len.div_ceil(*k_candidates.iter().max().unwrap_or(&1))
            + remainder
            + question_len,
        capacity: window,
    })
}

// ---- store file format -------------------------------------------------

// magic "XEMBSTOR", version u32, doc id (u32 len + utf8),
// chunk_len u32, dim u32, k u32 (0 = full), scheme u8 (255 when full),
// remainder (u32 count + u32 tokens), chunk row counts (u32 count + u32 each),
// then per chunk rows*dim f32, all little-endian.

const STORE_MAGIC: &[u8; 8] = b"XEMBSTOR";
const STORE_VERSION: u32 = 1;

fn scheme_code(s: DownscaleScheme) -> u8 {
    match s {
        DownscaleScheme::Strided => 0,
        DownscaleScheme::Random => 1,
        DownscaleScheme::Terminal => 2,
    }
}

fn scheme_from_code(c: u8) -> Result<DownscaleScheme> {
    Ok(match c {
        0 => DownscaleScheme::Strided,
        1 => DownscaleScheme::Random,
        2 => DownscaleScheme::Terminal,
        _ => return Err(Error::Format(format!("unknown scheme code {c}"))),
    })
}

pub fn store_to_bytes(store: &EmbeddingStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(STORE_MAGIC);
    out.extend_from_slice(&STORE_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.doc_id.len() as u32).to_le_bytes());
    out.extend_from_slice(store.doc_id.as_bytes());
    out.extend_from_slice(&(store.chunk_len as u32).to_le_bytes());
    out.extend_from_slice(&(store.dim as u32).to_le_bytes());
    match store.k {
        Some((k, scheme)) => {
            out.extend_from_slice(&(k as u32).to_le_bytes());
            out.push(scheme_code(scheme));
        }
        None => {
            out.extend_from_slice(&0u32.to_le_bytes());
            out.push(255);
        }
    }
    out.extend_from_slice(&(store.remainder_tokens.len() as u32).to_le_bytes());
    for &t in &store.remainder_tokens {
        out.extend_from_slice(&t.to_le_bytes());
    }
    out.extend_from_slice(&(store.chunks.len() as u32).to_le_bytes());
    for c in &store.chunks {
        out.extend_from_slice(&(c.rows() as u32).to_le_bytes());
    }
    for c in &store.chunks {
        for &v in c.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn store_from_bytes(bytes: &[u8]) -> Result<EmbeddingStore> {
    let mut at = 0usize;
    let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
        if *at + n > bytes.len() {
            return Err(Error::Format("truncated embedding store".into()));
        }
        let s = &bytes[*at..*at + n];
        *at += n;
        Ok(s)
    };
    let u32_at = |at: &mut usize| -> Result<u32> {
        let b = take(at, 4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    };

    if take(&mut at, 8)? != STORE_MAGIC {
        return Err(Error::Format("bad embedding-store magic".into()));
    }
    let version = u32_at(&mut at)?;
    if version != STORE_VERSION {
        return Err(Error::Format(format!("unsupported store version {version}")));
    }
    let id_len = u32_at(&mut at)? as usize;
    let doc_id = String::from_utf8(take(&mut at, id_len)?.to_vec())
        .map_err(|_| Error::Format("non-utf8 doc id".into()))?;
    let chunk_len = u32_at(&mut at)? as usize;
    let dim = u32_at(&mut at)? as usize;
    let k_raw = u32_at(&mut at)? as usize;
    let scheme_raw = take(&mut at, 1)?[0];
    let k = if k_raw == 0 { None } else { Some((k_raw, scheme_from_code(scheme_raw)?)) };
    let n_rem = u32_at(&mut at)? as usize;
    let mut remainder_tokens = Vec::with_capacity(n_rem);
    for _ in 0..n_rem {
        remainder_tokens.push(u32_at(&mut at)?);
    }
    let n_chunks = u32_at(&mut at)? as usize;
    let mut row_counts = Vec::with_capacity(n_chunks);
    for _ in 0..n_chunks {
        row_counts.push(u32_at(&mut at)? as usize);
    }
    let mut chunks = Vec::with_capacity(n_chunks);
    for rows in row_counts {
        let raw = take(&mut at, rows * dim * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        chunks.push(Tensor::new(vec![rows, dim], data)?);
    }
    if at != bytes.len() {
        return Err(Error::Format(format!(
            "trailing bytes in embedding store ({} unread)",
            bytes.len() - at
        )));
    }
    Ok(EmbeddingStore { doc_id, chunk_len, dim, k, chunks, remainder_tokens })
}

pub fn save_store(path: &Path, store: &EmbeddingStore) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&store_to_bytes(store))?;
    Ok(())
}

pub fn load_store(path: &Path) -> Result<EmbeddingStore> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    store_from_bytes(&bytes)
}
