//! Embedder training. The main objective is the two-pass auto-regression:
//! pass 1 compresses every chunk but the last into soft rows, pass 2
//! predicts every token of chunks 2..N conditioned on the compressed rows
//! of the preceding chunks plus within-chunk history, sliding the oldest
//! compressed sets out when the window fills. Gradients reach the embedder
//! through the compressed rows; the downstream model stays frozen.
//!
//! Two baseline objectives are provided for comparison: auto-encoding
//! (reconstruct all chunks from the full encoding) and text continuation
//! (encode the first half, decode the second).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extension::{make_chunk_plan, strided_indices, ChunkPlan};
use crate::model::{embedder_forward, forward_hidden, logits_for_rows, ModelConfig};
use crate::tensor::{Graph, ParamSet, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    TwoStreamAr,
    AutoEncoding,
    TextContinuation,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainerConfig {
    #[serde(default)]
    pub objective: Objective,
    #[serde(default = "default_k_candidates")]
    pub k_candidates: Vec<usize>,
    /// Training chunk length; much smaller than the model window so most
    /// context arrives through compressed rows.
    #[serde(default = "default_chunk")]
    pub train_chunk_size: usize,
    /// Tokens per training sample (truncated to a chunk multiple).
    #[serde(default = "default_sample_len")]
    pub sample_len: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    /// Multiplier applied to the learning rate for desk-scale dimensions.
    #[serde(default = "default_lr_multiplier")]
    pub lr_multiplier: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_steps")]
    pub max_steps: usize,
    #[serde(default)]
    pub seed: u64,
    /// Write an intermediate checkpoint every n steps (0 = only at the end).
    #[serde(default)]
    pub checkpoint_every: usize,
}

fn default_k_candidates() -> Vec<usize> {
    vec![2, 4, 8, 16, 32]
}
fn default_chunk() -> usize {
    64
}
fn default_sample_len() -> usize {
    512
}
fn default_lr() -> f64 {
    5e-5
}
fn default_lr_multiplier() -> f64 {
    20.0
}
fn default_batch() -> usize {
    8
}
fn default_steps() -> usize {
    500
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            objective: Objective::default(),
            k_candidates: default_k_candidates(),
            train_chunk_size: default_chunk(),
            sample_len: default_sample_len(),
            learning_rate: default_lr(),
            lr_multiplier: default_lr_multiplier(),
            batch_size: default_batch(),
            max_steps: default_steps(),
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainerConfig {
    pub fn effective_lr(&self) -> f64 {
        self.learning_rate * self.lr_multiplier
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.train_chunk_size == 0 || self.train_chunk_size >= cfg.max_window {
            return Err(Error::Config(format!(
                "train_chunk_size {} must be positive and below max_window {}",
                self.train_chunk_size, cfg.max_window
            )));
        }
        if self.k_candidates.is_empty() {
            return Err(Error::Config("k_candidates must be nonempty".into()));
        }
        if let Some(&bad) =
            self.k_candidates.iter().find(|&&k| k == 0 || k > self.train_chunk_size)
        {
            return Err(Error::Config(format!(
                "k candidate {bad} outside [1, train_chunk_size={}]",
                self.train_chunk_size
            )));
        }
        if self.sample_len < 2 * self.train_chunk_size {
            return Err(Error::Config(format!(
                "sample_len {} must cover at least two chunks of {}",
                self.sample_len, self.train_chunk_size
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// One training sample: a token window with a sampled scaling factor and a
/// chunk plan at the training chunk size. Always at least two chunks; the
/// window is truncated to a chunk multiple so every chunk is full.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub tokens: Vec<u32>,
    pub k: usize,
    pub plan: ChunkPlan,
}

impl TrainSample {
    pub fn new(mut tokens: Vec<u32>, k: usize, chunk_size: usize) -> Result<Self> {
        if chunk_size == 0 {
            return Err(Error::InvalidArg("chunk size must be positive".into()));
        }
        let n = tokens.len() / chunk_size;
        if n < 2 {
            return Err(Error::InvalidArg(format!(
                "training sample needs at least 2 chunks of {chunk_size}, got {} tokens",
                tokens.len()
            )));
        }
        if k == 0 || k > chunk_size {
            return Err(Error::InvalidArg(format!(
                "scaling factor {k} outside [1, chunk_size={chunk_size}]"
            )));
        }
        tokens.truncate(n * chunk_size);
        let plan = make_chunk_plan(tokens.len(), chunk_size)?;
        Ok(TrainSample { tokens, k, plan })
    }

    pub fn n_chunks(&self) -> usize {
        self.plan.n_chunks()
    }

    fn chunk(&self, i: usize) -> &[u32] {
        let (s, e) = self.plan.chunks[i];
        &self.tokens[s..e]
    }
}

/// Uniform draw from the candidate scaling factors.
pub fn sample_scaling_factor<R: Rng + ?Sized>(tc: &TrainerConfig, rng: &mut R) -> Result<usize> {
    if tc.k_candidates.is_empty() {
        return Err(Error::Config("k_candidates must be nonempty".into()));
    }
    Ok(tc.k_candidates[rng.random_range(0..tc.k_candidates.len())])
}

// ---- two-pass schedule ----------------------------------------------------

/// Pass-2 schedule for one supervised chunk: which compressed sets are
/// retained after sliding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChunkStep {
    /// 0-based index of the chunk being predicted.
    pub chunk_index: usize,
    /// Half-open range of compressed-set indices kept in the window.
    pub ex_range: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TwoStreamPlan {
    pub n_chunks: usize,
    pub chunk_len: usize,
    pub k: usize,
    /// Rows per compressed set: ceil(chunk_len / k).
    pub rows_per_set: usize,
    pub steps: Vec<ChunkStep>,
}

impl TwoStreamPlan {
    pub fn supervised_tokens(&self) -> usize {
        self.steps.len() * self.chunk_len
    }

    /// Total compressed sets dropped by sliding across all steps.
    pub fn slides(&self) -> usize {
        self.steps.iter().map(|s| s.ex_range.0).sum()
    }
}

/// Pure schedule computation: chunk i (0-based, i >= 1) is conditioned on
/// the compressed sets of chunks `0..i`, dropping the oldest sets while
/// `sets * rows_per_set + chunk_len` exceeds the window.
pub fn plan_two_stream(
    n_chunks: usize,
    chunk_len: usize,
    k: usize,
    window: usize,
) -> Result<TwoStreamPlan> {
    if n_chunks < 2 {
        return Err(Error::InvalidArg(format!(
            "two-pass objective needs at least 2 chunks, got {n_chunks}"
        )));
    }
    let rows_per_set = chunk_len.div_ceil(k);
    if chunk_len + rows_per_set > window {
        return Err(Error::Capacity {
            needed: chunk_len + rows_per_set,
            capacity: window,
        });
    }
    let max_sets = (window - chunk_len) / rows_per_set;
    let steps = (1..n_chunks)
        .map(|i| {
            let keep = i.min(max_sets);
            ChunkStep { chunk_index: i, ex_range: (i - keep, i) }
        })
        .collect();
    Ok(TwoStreamPlan { n_chunks, chunk_len, k, rows_per_set, steps })
}

// ---- objectives ------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default)]
pub struct LossStats {
    pub supervised_tokens: usize,
    pub ex_sets_built: usize,
    pub ex_sets_dropped: usize,
}

/// Pass 1: compress chunks `0..limit` with strided selection at the
/// sample's factor, keeping everything on the graph so gradients flow from
/// pass 2 into the embedder.
fn pass1_compress<F: Scalar>(
    g: &mut Graph<F>,
    sample: &TrainSample,
    params_ex: &ParamSet<F>,
    cfg: &ModelConfig,
    limit: usize,
) -> Result<Vec<Var>> {
    let idx = strided_indices(sample.plan.chunk_len, sample.k)?;
    let mut ex_vars = Vec::with_capacity(limit);
    for i in 0..limit {
        let hidden = embedder_forward(g, sample.chunk(i), params_ex, cfg)?;
        ex_vars.push(g.gather_rows(hidden, &idx));
    }
    Ok(ex_vars)
}

/// Supervised forward for one span: rows are `[retained EX sets, span
/// tokens]`; logits at the last EX row predict the first span token, and
/// each token row predicts its successor. Returns the cross-entropy sum.
fn supervised_span<F: Scalar>(
    g: &mut Graph<F>,
    ex_vars: &[Var],
    span_tokens: &[u32],
    base: &ParamSet<F>,
    cfg: &ModelConfig,
) -> Result<(Var, usize)> {
    debug_assert!(!ex_vars.is_empty());
    let ex_rows: usize = ex_vars.iter().map(|&v| g.rows(v)).sum();
    let table = g.param(base, "tok_embed");
    let ids: Vec<usize> = span_tokens.iter().map(|&t| t as usize).collect();
    let tok_embeds = g.gather_rows(table, &ids);

    let mut parts = ex_vars.to_vec();
    parts.push(tok_embeds);
    let x = g.concat_rows(&parts);
    let n = ex_rows + span_tokens.len();
    if n > cfg.max_window {
        return Err(Error::Capacity { needed: n, capacity: cfg.max_window });
    }
    let positions: Vec<usize> = (0..n).collect();
    let hidden = forward_hidden(g, x, &positions, base, cfg, true)?;
    // rows [ex_rows-1, ex_rows+len-2] predict tokens [0, len)
    let logits = logits_for_rows(g, hidden, ex_rows - 1, span_tokens.len(), base);
    let mask = vec![true; span_tokens.len()];
    g.cross_entropy_sum(logits, span_tokens, &mask)
}

/// The main objective. Mean cross-entropy over every token of chunks 2..N.
pub fn two_stream_loss<F: Scalar>(
    g: &mut Graph<F>,
    sample: &TrainSample,
    base: &ParamSet<F>,
    params_ex: &ParamSet<F>,
    cfg: &ModelConfig,
) -> Result<(Var, LossStats)> {
    let plan = plan_two_stream(sample.n_chunks(), sample.plan.chunk_len, sample.k, cfg.max_window)?;
    // the last chunk is exempt from compression
    let ex_vars = pass1_compress(g, sample, params_ex, cfg, sample.n_chunks() - 1)?;

    let mut total: Option<Var> = None;
    let mut count = 0usize;
    for step in &plan.steps {
        let retained = &ex_vars[step.ex_range.0..step.ex_range.1];
        let (sum, c) = supervised_span(g, retained, sample.chunk(step.chunk_index), base, cfg)?;
        count += c;
        total = Some(match total {
            Some(acc) => g.add(acc, sum),
            None => sum,
        });
    }
    let loss = g.scale(total.expect("plan has at least one step"), 1.0 / count as f64);
    let stats = LossStats {
        supervised_tokens: count,
        ex_sets_built: ex_vars.len(),
        ex_sets_dropped: plan.slides(),
    };
    Ok((loss, stats))
}

/// Baseline: compress the full sequence (every chunk), then reconstruct
/// each chunk conditioned on the encoding.
pub fn auto_encoding_loss<F: Scalar>(
    g: &mut Graph<F>,
    sample: &TrainSample,
    base: &ParamSet<F>,
    params_ex: &ParamSet<F>,
    cfg: &ModelConfig,
) -> Result<(Var, LossStats)> {
    let n = sample.n_chunks();
    let rows_per_set = sample.plan.chunk_len.div_ceil(sample.k);
    if sample.plan.chunk_len + rows_per_set > cfg.max_window {
        return Err(Error::Capacity {
            needed: sample.plan.chunk_len + rows_per_set,
            capacity: cfg.max_window,
        });
    }
    let ex_vars = pass1_compress(g, sample, params_ex, cfg, n)?;
    let max_sets = (cfg.max_window - sample.plan.chunk_len) / rows_per_set;
    let keep = n.min(max_sets);
    let retained = &ex_vars[n - keep..];

    let mut total: Option<Var> = None;
    let mut count = 0usize;
    let mut dropped = 0usize;
    for i in 0..n {
        dropped += n - keep;
        let (sum, c) = supervised_span(g, retained, sample.chunk(i), base, cfg)?;
        count += c;
        total = Some(match total {
            Some(acc) => g.add(acc, sum),
            None => sum,
        });
    }
    let loss = g.scale(total.expect("nonempty"), 1.0 / count as f64);
    Ok((
        loss,
        LossStats { supervised_tokens: count, ex_sets_built: n, ex_sets_dropped: dropped },
    ))
}

/// Baseline: compress the first half of the chunks, supervise the second
/// half of the tokens in one causal span.
pub fn text_continuation_loss<F: Scalar>(
    g: &mut Graph<F>,
    sample: &TrainSample,
    base: &ParamSet<F>,
    params_ex: &ParamSet<F>,
    cfg: &ModelConfig,
) -> Result<(Var, LossStats)> {
    let n = sample.n_chunks();
    let head_chunks = (n / 2).max(1);
    let ex_vars = pass1_compress(g, sample, params_ex, cfg, head_chunks)?;
    let tail_start = head_chunks * sample.plan.chunk_len;
    let tail = &sample.tokens[tail_start..];
    let rows_per_set = sample.plan.chunk_len.div_ceil(sample.k);
    if tail.len() + rows_per_set > cfg.max_window {
        return Err(Error::Capacity {
            needed: tail.len() + rows_per_set,
            capacity: cfg.max_window,
        });
    }
    let max_sets = (cfg.max_window - tail.len()) / rows_per_set;
    let keep = head_chunks.min(max_sets);
    let retained = &ex_vars[head_chunks - keep..];

    let (sum, count) = supervised_span(g, retained, tail, base, cfg)?;
    let loss = g.scale(sum, 1.0 / count as f64);
    Ok((
        loss,
        LossStats {
            supervised_tokens: count,
            ex_sets_built: head_chunks,
            ex_sets_dropped: head_chunks - keep,
        },
    ))
}

fn objective_loss<F: Scalar>(
    objective: Objective,
    g: &mut Graph<F>,
    sample: &TrainSample,
    base: &ParamSet<F>,
    params_ex: &ParamSet<F>,
    cfg: &ModelConfig,
) -> Result<(Var, LossStats)> {
    match objective {
        Objective::TwoStreamAr => two_stream_loss(g, sample, base, params_ex, cfg),
        Objective::AutoEncoding => auto_encoding_loss(g, sample, base, params_ex, cfg),
        Objective::TextContinuation => text_continuation_loss(g, sample, base, params_ex, cfg),
    }
}

// ---- optimizer -------------------------------------------------------------

/// Adam with bias correction and a linear learning-rate decay over the
/// configured horizon.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    total_steps: usize,
    t: usize,
    m: std::collections::BTreeMap<String, Vec<f64>>,
    v: std::collections::BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, total_steps: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            total_steps: total_steps.max(1),
            t: 0,
            m: Default::default(),
            v: Default::default(),
        }
    }

    pub fn step<F: Scalar>(
        &mut self,
        params: &mut ParamSet<F>,
        grads: &[(String, Tensor<F>)],
    ) -> Result<()> {
        self.t += 1;
        let decay = 1.0 - (self.t - 1) as f64 / self.total_steps as f64;
        let lr_t = self.lr * decay.max(0.0);
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, grad) in grads {
            if !grad.all_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for `{name}`")));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; grad.numel()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; grad.numel()]);
            let value = params.tensor_mut(name);
            debug_assert_eq!(value.numel(), grad.numel());
            for (i, &gf) in grad.data().iter().enumerate() {
                let gd = gf.to_f64();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gd;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gd * gd;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let upd = lr_t * mhat / (vhat.sqrt() + self.eps);
                let cur = value.data()[i].to_f64();
                value.data_mut()[i] = F::from_f64(cur - upd);
            }
        }
        Ok(())
    }
}

// ---- training loop ----------------------------------------------------------

/// One row of the training log CSV (`step,loss,k,seconds`).
#[derive(Clone, Copy, Debug)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    /// Scaling factor of the first batch element (0 for pretraining).
    pub k: usize,
    pub seconds: f64,
}

/// Render the training log; timings are written as 0.000 when `timing` is
/// off so reruns under a fixed seed are byte-identical.
pub fn log_to_csv(log: &[StepRecord], timing: bool) -> String {
    let mut out = String::from("step,loss,k,seconds\n");
    for r in log {
        let secs = if timing { r.seconds } else { 0.0 };
        out.push_str(&format!("{},{:.6},{},{secs:.3}\n", r.step, r.loss, r.k));
    }
    out
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params_ex: ParamSet<f32>,
    pub log: Vec<StepRecord>,
}

/// Train the embedder against a frozen downstream model.
///
/// Batch elements are evaluated concurrently on independent graphs;
/// gradients are merged in batch order, so results are deterministic for a
/// given seed regardless of thread count. Errors with a diagnostic on NaN
/// loss. The downstream parameters are never touched.
pub fn train(
    docs: &[Vec<u32>],
    base: &ParamSet<f32>,
    params_ex: ParamSet<f32>,
    cfg: &ModelConfig,
    tc: &TrainerConfig,
    mut on_checkpoint: Option<&mut dyn FnMut(usize, &ParamSet<f32>) -> Result<()>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    tc.validate(cfg)?;
    if !base.all_frozen() {
        return Err(Error::InvalidArg(
            "downstream parameters must be frozen before embedder training".into(),
        ));
    }
    let usable: Vec<&Vec<u32>> =
        docs.iter().filter(|d| d.len() >= 2 * tc.train_chunk_size).collect();
    if usable.is_empty() {
        return Err(Error::InvalidArg(format!(
            "no document long enough for 2 chunks of {}",
            tc.train_chunk_size
        )));
    }

    let mut params_ex = params_ex;
    let mut rng = ChaCha20Rng::seed_from_u64(tc.seed ^ 0x7261_696e);
    let mut opt = Adam::new(tc.effective_lr(), tc.max_steps);
    let mut log = Vec::with_capacity(tc.max_steps);
    let t0 = std::time::Instant::now();

    for step in 0..tc.max_steps {
        // sample batch specs serially so the RNG stream is stable
        let mut specs = Vec::with_capacity(tc.batch_size);
        for _ in 0..tc.batch_size {
            let doc = usable[rng.random_range(0..usable.len())];
            let span = tc.sample_len.min(doc.len());
            let start = rng.random_range(0..=doc.len() - span);
            let k = sample_scaling_factor(tc, &mut rng)?;
            specs.push((doc, start, span, k));
        }

        let results: Vec<Result<(f64, Vec<(String, Tensor<f32>)>)>> = specs
            .par_iter()
            .map(|&(doc, start, span, k)| {
                let sample =
                    TrainSample::new(doc[start..start + span].to_vec(), k, tc.train_chunk_size)?;
                let mut g: Graph<f32> = Graph::new();
                let (loss, _) =
                    objective_loss(tc.objective, &mut g, &sample, base, &params_ex, cfg)?;
                let loss_val = g.scalar(loss).to_f64();
                g.backward(loss)?;
                Ok((loss_val, g.param_grads("ex")))
            })
            .collect();

        let mut merged: std::collections::BTreeMap<String, Tensor<f32>> = Default::default();
        let mut loss_sum = 0.0;
        for r in results {
            let (loss_val, grads) = r?;
            if !loss_val.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss diverged to {loss_val} at step {step} (objective {:?})",
                    tc.objective
                )));
            }
            loss_sum += loss_val;
            for (name, grad) in grads {
                match merged.get_mut(&name) {
                    Some(acc) => {
                        for (a, &g) in acc.data_mut().iter_mut().zip(grad.data()) {
                            *a += g;
                        }
                    }
                    None => {
                        merged.insert(name, grad);
                    }
                }
            }
        }
        let scale = 1.0 / tc.batch_size as f32;
        let grads: Vec<(String, Tensor<f32>)> = merged
            .into_iter()
            .map(|(name, mut t)| {
                for v in t.data_mut() {
                    *v *= scale;
                }
                (name, t)
            })
            .collect();
        opt.step(&mut params_ex, &grads)?;

        log.push(StepRecord {
            step,
            loss: loss_sum / tc.batch_size as f64,
            k: specs[0].3,
            seconds: t0.elapsed().as_secs_f64(),
        });
        if tc.checkpoint_every > 0 && (step + 1) % tc.checkpoint_every == 0 {
            if let Some(cb) = on_checkpoint.as_deref_mut() {
                cb(step + 1, &params_ex)?;
            }
        }
    }

    Ok(TrainOutcome { params_ex, log })
}
