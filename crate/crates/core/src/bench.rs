//! Efficiency accounting: peak live rows, analytic FLOP estimates, and
//! wall-clock timings for the tail-prediction workload under three modes.
//!
//! "Live rows" counts rows materialized inside a forward pass (activations
//! scale with them); compressed vectors cached between passes are storage,
//! one d-vector each, and are not counted as live. Online mode therefore
//! peaks at the embedder's chunk window no matter how long the document
//! grows, which is the constant-memory property under test. Phase 1 is
//! embedding generation, phase 2 the final inference over compressed rows
//! plus recent tokens; the two run consecutively, so their costs do not
//! accumulate.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extension::{build_context, strided_indices, ExtensibleEmbeddingSet};
use crate::model::{forward_lm, rows_from_tokens, ForwardOpts, ModelConfig};
use crate::tensor::{Graph, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMode {
    Online,
    Offline,
    FullAttentionOracle,
}

impl BenchMode {
    pub fn name(self) -> &'static str {
        match self {
            BenchMode::Online => "online",
            BenchMode::Offline => "offline",
            BenchMode::FullAttentionOracle => "full_attention_oracle",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchConfig {
    #[serde(default = "default_context_lens")]
    pub context_lens: Vec<usize>,
    #[serde(default = "default_tail")]
    pub tail_len: usize,
    #[serde(default = "default_recent")]
    pub recent_raw: usize,
    /// Compression chunk length; defaults to the model window at run time.
    #[serde(default)]
    pub chunk_len: Option<usize>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
}

fn default_context_lens() -> Vec<usize> {
    vec![512, 1024, 2048, 4096]
}
fn default_tail() -> usize {
    64
}
fn default_recent() -> usize {
    64
}
fn default_k() -> usize {
    32
}
fn default_repeats() -> usize {
    10
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            context_lens: default_context_lens(),
            tail_len: default_tail(),
            recent_raw: default_recent(),
            chunk_len: None,
            k: default_k(),
            repeats: default_repeats(),
        }
    }
}

/// One profiled configuration (CSV: mode,context_len,peak_rows,flops,
/// seconds,phase1_s,phase2_s).
#[derive(Clone, Debug)]
pub struct CostReport {
    pub mode: BenchMode,
    pub context_len: usize,
    pub peak_live_rows: usize,
    pub flops_estimate: f64,
    pub wall_seconds: f64,
    pub phase1_seconds: f64,
    pub phase2_seconds: f64,
}

pub fn reports_to_csv(reports: &[CostReport]) -> String {
    let mut out = String::from("mode,context_len,peak_rows,flops,seconds,phase1_s,phase2_s\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{:.3e},{:.6},{:.6},{:.6}\n",
            r.mode.name(),
            r.context_len,
            r.peak_live_rows,
            r.flops_estimate,
            r.wall_seconds,
            r.phase1_seconds,
            r.phase2_seconds
        ));
    }
    out
}

/// Analytic forward cost of `n` rows through `n_layers`, plus the output
/// head over `head_rows` rows. Causal attention counts n(n+1)/2 pairs.
pub fn forward_flops(cfg: &ModelConfig, n: usize, n_layers: usize, head_rows: usize) -> f64 {
    let (d, f, v) = (cfg.model_dim as f64, cfg.ffn() as f64, cfg.vocab_size as f64);
    let n = n as f64;
    let pairs = n * (n + 1.0) / 2.0;
    let per_layer = 8.0 * n * d * d + 4.0 * pairs * d + 6.0 * n * d * f;
    n_layers as f64 * per_layer + 2.0 * head_rows as f64 * d * v
}

/// Compressible region split into embedder chunks: full chunks of
/// `chunk_len` plus one trailing partial chunk, leaving `reserve` tokens
/// raw at the end.
fn compression_layout(context_len: usize, reserve: usize, chunk_len: usize) -> Vec<(usize, usize)> {
    let compressible = context_len.saturating_sub(reserve);
    let mut chunks = Vec::new();
    let mut at = 0;
    while compressible - at >= chunk_len {
        chunks.push((at, at + chunk_len));
        at += chunk_len;
    }
    if compressible > at {
        chunks.push((at, compressible));
    }
    chunks
}

/// Run the tail-prediction workload `bc.repeats` times and report mean
/// timings. Peak rows and FLOPs are deterministic.
pub fn profile(
    mode: BenchMode,
    context_len: usize,
    doc: &[u32],
    base: &ParamSet<f32>,
    ex: &ParamSet<f32>,
    cfg: &ModelConfig,
    bc: &BenchConfig,
) -> Result<CostReport> {
    if doc.len() < context_len {
        return Err(Error::InvalidArg(format!(
            "bench document of {} tokens shorter than context {context_len}",
            doc.len()
        )));
    }
    let chunk_len = bc.chunk_len.unwrap_or(cfg.max_window);
    let reserve = bc.recent_raw + bc.tail_len;
    if context_len < reserve {
        return Err(Error::InvalidArg(format!(
            "context {context_len} below the raw reserve {reserve}"
        )));
    }
    let window = &doc[..context_len];
    let tail = &window[context_len - bc.tail_len..];
    let chunks = compression_layout(context_len, reserve, chunk_len);
    let raw_start = chunks.last().map_or(0, |&(_, e)| e);
    let raw = &window[raw_start..];

    // offline mode samples from a store computed outside the timed region
    let precomputed: Option<Vec<crate::tensor::Tensor<f32>>> =
        if let BenchMode::Offline = mode {
            let mut states = Vec::with_capacity(chunks.len());
            for &(s, e) in &chunks {
                states.push(crate::extension::embed_chunk(&window[s..e], ex, cfg)?);
            }
            Some(states)
        } else {
            None
        };

    let mut peak_rows = 0usize;
    let mut flops = 0.0f64;
    let mut p1_total = 0.0f64;
    let mut p2_total = 0.0f64;
    let mut wall_total = 0.0f64;

    for rep in 0..bc.repeats.max(1) {
        let t_start = Instant::now();
        let mut phase1 = 0.0f64;
        let mut peak = 0usize;
        let mut rep_flops = 0.0f64;

        let sets: Vec<ExtensibleEmbeddingSet> = match mode {
            BenchMode::Online => {
                let t1 = Instant::now();
                let mut sets = Vec::with_capacity(chunks.len());
                for (i, &(s, e)) in chunks.iter().enumerate() {
                    let hidden = crate::extension::embed_chunk(&window[s..e], ex, cfg)?;
                    peak = peak.max(e - s);
                    rep_flops += forward_flops(cfg, e - s, cfg.n_embedder_layers, 0);
                    let idx = strided_indices(e - s, bc.k.min(e - s))?;
                    sets.push(ExtensibleEmbeddingSet {
                        rows: hidden.select_rows(&idx),
                        chunk_index: i,
                        k: bc.k,
                    });
                }
                phase1 = t1.elapsed().as_secs_f64();
                sets
            }
            BenchMode::Offline => {
                let t1 = Instant::now();
                let states = precomputed.as_ref().unwrap();
                let mut sets = Vec::with_capacity(states.len());
                for (i, hidden) in states.iter().enumerate() {
                    let idx = strided_indices(hidden.rows(), bc.k.min(hidden.rows()))?;
                    sets.push(ExtensibleEmbeddingSet {
                        rows: hidden.select_rows(&idx),
                        chunk_index: i,
                        k: bc.k,
                    });
                }
                phase1 = t1.elapsed().as_secs_f64();
                sets
            }
            BenchMode::FullAttentionOracle => Vec::new(),
        };

        let t2 = Instant::now();
        let nll = match mode {
            BenchMode::FullAttentionOracle => {
                peak = peak.max(context_len);
                rep_flops += forward_flops(cfg, context_len, cfg.n_layers, context_len);
                let rows = rows_from_tokens::<f32>(window);
                let opts = ForwardOpts { causal: true, window_override: Some(usize::MAX) };
                let mut g: Graph<f32> = Graph::new();
                let out = forward_lm(&mut g, &rows, base, cfg, opts)?;
                mean_tail_nll(g.value(out.logits), tail)
            }
            _ => {
                let rows = build_context::<f32>(&sets, raw, cfg.max_window)?;
                peak = peak.max(rows.len());
                rep_flops += forward_flops(cfg, rows.len(), cfg.n_layers, rows.len());
                let mut g: Graph<f32> = Graph::new();
                let out = forward_lm(&mut g, &rows, base, cfg, ForwardOpts::default())?;
                mean_tail_nll(g.value(out.logits), tail)
            }
        };
        if !nll.is_finite() {
            return Err(Error::Numeric(format!("bench workload produced NLL {nll}")));
        }
        let phase2 = t2.elapsed().as_secs_f64();
        wall_total += t_start.elapsed().as_secs_f64();
        p1_total += phase1;
        p2_total += phase2;
        if rep == 0 {
            peak_rows = peak;
            flops = rep_flops;
        }
    }

    let n = bc.repeats.max(1) as f64;
    Ok(CostReport {
        mode,
        context_len,
        peak_live_rows: peak_rows,
        flops_estimate: flops,
        wall_seconds: wall_total / n,
        phase1_seconds: p1_total / n,
        phase2_seconds: p2_total / n,
    })
}

fn mean_tail_nll(logits: &crate::tensor::Tensor<f32>, tail: &[u32]) -> f64 {
    let n = logits.rows();
    let first = n - tail.len() - 1;
    let mut total = 0.0f64;
    for (j, &t) in tail.iter().enumerate() {
        let row = logits.row(first + j);
        let mut max = f64::NEG_INFINITY;
        for &v in row {
            max = max.max(v as f64);
        }
        let mut denom = 0.0f64;
        for &v in row {
            denom += (v as f64 - max).exp();
        }
        total += max + denom.ln() - row[t as usize] as f64;
    }
    total / tail.len() as f64
}

/// Least-squares slope of ln(y) against ln(x).
pub fn fit_loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    slope(&lx, &ly)
}

/// Coefficient of determination of the best linear fit y = a + b x.
pub fn linear_r2(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let b = slope(xs, ys);
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_y = ys.iter().sum::<f64>() / n;
    let a = mean_y - b * mean_x;
    let ss_res: f64 = xs.iter().zip(ys).map(|(&x, &y)| (y - (a + b * x)).powi(2)).sum();
    let ss_tot: f64 = ys.iter().map(|&y| (y - mean_y).powi(2)).sum();
    if ss_tot == 0.0 {
        1.0
    } else {
        1.0 - ss_res / ss_tot
    }
}

fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_y = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(ys).map(|(&x, &y)| (x - mean_x) * (y - mean_y)).sum();
    let var: f64 = xs.iter().map(|&x| (x - mean_x).powi(2)).sum();
    cov / var
}
