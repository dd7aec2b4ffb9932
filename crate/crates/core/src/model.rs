//! Decoder-only transformer used in two instantiations: the frozen
//! downstream LM (all layers, output head) and the trainable embedder
//! (the first `n_embedder_layers` of the same stack, no head).
//!
//! Pre-norm blocks, rotary position encoding, RMS-norm, gated SiLU MLP,
//! no biases. Input rows are either token ids (embedded via lookup) or
//! soft vectors injected directly into the first layer.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamSet, Scalar, Tensor, Var};

/// Architecture hyperparameters shared by the downstream LM and embedder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Token vocabulary size (byte-level default: 256 bytes + specials).
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default = "default_dim")]
    pub model_dim: usize,
    #[serde(default = "default_layers")]
    pub n_layers: usize,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    /// Embedder depth: the first `n_embedder_layers` of the downstream stack.
    #[serde(default = "default_embedder_layers")]
    pub n_embedder_layers: usize,
    /// Maximum input rows (tokens + soft rows) per forward pass.
    #[serde(default = "default_window")]
    pub max_window: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    /// MLP inner width; defaults to `4 * model_dim` when absent.
    #[serde(default)]
    pub ffn_dim: Option<usize>,
}

fn default_vocab() -> usize {
    crate::corpus::VOCAB_SIZE
}
fn default_dim() -> usize {
    128
}
fn default_layers() -> usize {
    4
}
fn default_heads() -> usize {
    4
}
fn default_embedder_layers() -> usize {
    2
}
fn default_window() -> usize {
    512
}
fn default_rope_base() -> f64 {
    10000.0
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: default_vocab(),
            model_dim: default_dim(),
            n_layers: default_layers(),
            n_heads: default_heads(),
            n_embedder_layers: default_embedder_layers(),
            max_window: default_window(),
            rope_base: default_rope_base(),
            ffn_dim: None,
        }
    }
}

impl ModelConfig {
    pub fn ffn(&self) -> usize {
        self.ffn_dim.unwrap_or(4 * self.model_dim)
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.model_dim == 0 || self.n_layers == 0 || self.max_window == 0
        {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.model_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::Config(format!(
                "head dim {} must be even for rotary encoding",
                self.head_dim()
            )));
        }
        if self.n_embedder_layers > self.n_layers {
            return Err(Error::Config(format!(
                "n_embedder_layers {} exceeds n_layers {}",
                self.n_embedder_layers, self.n_layers
            )));
        }
        Ok(())
    }
}

/// One input row: a token id to embed, or a soft vector injected directly.
#[derive(Clone, Debug)]
pub struct InputRow<F> {
    pub kind: RowKind<F>,
    pub pos: usize,
}

#[derive(Clone, Debug)]
pub enum RowKind<F> {
    Token(u32),
    Soft(Vec<F>),
}

impl<F: Scalar> InputRow<F> {
    pub fn token(id: u32, pos: usize) -> Self {
        InputRow { kind: RowKind::Token(id), pos }
    }

    pub fn soft(v: Vec<F>, pos: usize) -> Self {
        InputRow { kind: RowKind::Soft(v), pos }
    }
}

/// Token rows with consecutive positions starting at 0.
pub fn rows_from_tokens<F: Scalar>(tokens: &[u32]) -> Vec<InputRow<F>> {
    tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| InputRow::token(t, i))
        .collect()
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOpts {
    pub causal: bool,
    /// Override the window check (used by the full-attention oracle to score
    /// sequences longer than `max_window`).
    pub window_override: Option<usize>,
}

impl Default for ForwardOpts {
    fn default() -> Self {
        ForwardOpts { causal: true, window_override: None }
    }
}

pub struct LmOutput {
    /// `[n, vocab]` next-token logits at every row.
    pub logits: Var,
    /// `[n, model_dim]` activations after the final layer (pre output norm).
    pub hidden: Var,
}

/// Full downstream forward: mixed token/soft rows to logits at every row.
pub fn forward_lm<F: Scalar>(
    g: &mut Graph<F>,
    rows: &[InputRow<F>],
    params: &ParamSet<F>,
    cfg: &ModelConfig,
    opts: ForwardOpts,
) -> Result<LmOutput> {
    if rows.is_empty() {
        return Err(Error::InvalidArg("forward_lm: empty input".into()));
    }
    let window = opts.window_override.unwrap_or(cfg.max_window);
    if rows.len() > window {
        return Err(Error::Capacity { needed: rows.len(), capacity: window });
    }
    let mut positions = Vec::with_capacity(rows.len());
    for r in rows {
        if let Some(&last) = positions.last() {
            if r.pos <= last {
                return Err(Error::InvalidArg(format!(
                    "positions must be strictly increasing ({last} then {})",
                    r.pos
                )));
            }
        }
        positions.push(r.pos);
    }

    let x = build_input_matrix(g, rows, params, cfg)?;
    forward_prebuilt(g, x, &positions, params, cfg, opts)
}

/// Forward over plain token ids.
pub fn forward_tokens<F: Scalar>(
    g: &mut Graph<F>,
    tokens: &[u32],
    params: &ParamSet<F>,
    cfg: &ModelConfig,
    opts: ForwardOpts,
) -> Result<LmOutput> {
    forward_lm(g, &rows_from_tokens(tokens), params, cfg, opts)
}

/// Downstream forward over an already-assembled input matrix (used by the
/// training objectives, which inject compressed rows as live graph nodes).
pub fn forward_prebuilt<F: Scalar>(
    g: &mut Graph<F>,
    x: Var,
    positions: &[usize],
    params: &ParamSet<F>,
    cfg: &ModelConfig,
    opts: ForwardOpts,
) -> Result<LmOutput> {
    let hidden = trunk(g, x, positions, params, cfg, cfg.n_layers, opts.causal);
    let normed = {
        let gain = g.param(params, "out_norm");
        g.rms_norm(hidden, gain)
    };
    let head = g.param(params, "lm_head");
    let logits = g.matmul(normed, head);
    g.ensure_healthy()?;
    Ok(LmOutput { logits, hidden })
}

/// Hidden trunk without the output head, for callers that only need logits
/// at a few rows (see [`logits_for_rows`]).
pub fn forward_hidden<F: Scalar>(
    g: &mut Graph<F>,
    x: Var,
    positions: &[usize],
    params: &ParamSet<F>,
    cfg: &ModelConfig,
    causal: bool,
) -> Result<Var> {
    let hidden = trunk(g, x, positions, params, cfg, cfg.n_layers, causal);
    g.ensure_healthy()?;
    Ok(hidden)
}

/// Logits restricted to the row span `[start, start+len)`; avoids running
/// the output head over rows nothing is read at.
pub fn logits_for_rows<F: Scalar>(
    g: &mut Graph<F>,
    hidden: Var,
    start: usize,
    len: usize,
    params: &ParamSet<F>,
) -> Var {
    let sliced = g.slice_rows(hidden, start, len);
    let gain = g.param(params, "out_norm");
    let normed = g.rms_norm(sliced, gain);
    let head = g.param(params, "lm_head");
    g.matmul(normed, head)
}

/// Embedder forward: activations after the first `n_embedder_layers` layers.
/// No output norm is applied; the raw residual stream is the embedding.
pub fn embedder_forward<F: Scalar>(
    g: &mut Graph<F>,
    chunk_tokens: &[u32],
    params_ex: &ParamSet<F>,
    cfg: &ModelConfig,
) -> Result<Var> {
    if chunk_tokens.is_empty() {
        return Err(Error::InvalidArg("embedder_forward: empty chunk".into()));
    }
    if chunk_tokens.len() > cfg.max_window {
        return Err(Error::Capacity { needed: chunk_tokens.len(), capacity: cfg.max_window });
    }
    check_tokens(chunk_tokens, cfg.vocab_size)?;
    let table = g.param(params_ex, "tok_embed");
    let ids: Vec<usize> = chunk_tokens.iter().map(|&t| t as usize).collect();
    let x = g.gather_rows(table, &ids);
    let positions: Vec<usize> = (0..chunk_tokens.len()).collect();
    let out = trunk(g, x, &positions, params_ex, cfg, cfg.n_embedder_layers, true);
    g.ensure_healthy()?;
    Ok(out)
}

fn check_tokens(tokens: &[u32], vocab: usize) -> Result<()> {
    for &t in tokens {
        if t as usize >= vocab {
            return Err(Error::InvalidArg(format!("token id {t} out of vocab {vocab}")));
        }
    }
    Ok(())
}

fn build_input_matrix<F: Scalar>(
    g: &mut Graph<F>,
    rows: &[InputRow<F>],
    params: &ParamSet<F>,
    cfg: &ModelConfig,
) -> Result<Var> {
    let d = cfg.model_dim;
    let mut parts: Vec<Var> = Vec::new();
    let mut token_run: Vec<usize> = Vec::new();
    let mut soft_run: Vec<F> = Vec::new();
    let mut soft_rows = 0usize;

    fn flush_tokens<F: Scalar>(
        g: &mut Graph<F>,
        params: &ParamSet<F>,
        run: &mut Vec<usize>,
        parts: &mut Vec<Var>,
    ) {
        if !run.is_empty() {
            let table = g.param(params, "tok_embed");
            parts.push(g.gather_rows(table, run));
            run.clear();
        }
    }
    fn flush_soft<F: Scalar>(
        g: &mut Graph<F>,
        d: usize,
        run: &mut Vec<F>,
        rows: &mut usize,
        parts: &mut Vec<Var>,
    ) {
        if *rows > 0 {
            let t = Tensor::new(vec![*rows, d], std::mem::take(run)).unwrap();
            parts.push(g.leaf(t));
            *rows = 0;
        }
    }

    for row in rows {
        match &row.kind {
            RowKind::Token(id) => {
                if *id as usize >= cfg.vocab_size {
                    return Err(Error::InvalidArg(format!(
                        "token id {id} out of vocab {}",
                        cfg.vocab_size
                    )));
                }
                flush_soft(g, d, &mut soft_run, &mut soft_rows, &mut parts);
                token_run.push(*id as usize);
            }
            RowKind::Soft(v) => {
                if v.len() != d {
                    return Err(Error::InvalidArg(format!(
                        "soft row dimension {} != model_dim {d}",
                        v.len()
                    )));
                }
                flush_tokens(g, params, &mut token_run, &mut parts);
                soft_run.extend_from_slice(v);
                soft_rows += 1;
            }
        }
    }
    flush_tokens(g, params, &mut token_run, &mut parts);
    flush_soft(g, d, &mut soft_run, &mut soft_rows, &mut parts);

    Ok(if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts) })
}

/// Pre-norm transformer stack over the first `n_layers` layers of `params`.
fn trunk<F: Scalar>(
    g: &mut Graph<F>,
    x: Var,
    positions: &[usize],
    params: &ParamSet<F>,
    cfg: &ModelConfig,
    n_layers: usize,
    causal: bool,
) -> Var {
    let hd = cfg.head_dim();
    let mut h = x;
    for layer in 0..n_layers {
        let p = |name: &str| format!("layers.{layer}.{name}");

        let attn_gain = g.param(params, &p("attn_norm"));
        let xn = g.rms_norm(h, attn_gain);
        let wq = g.param(params, &p("wq"));
        let wk = g.param(params, &p("wk"));
        let wv = g.param(params, &p("wv"));
        let q = g.matmul(xn, wq);
        let k = g.matmul(xn, wk);
        let v = g.matmul(xn, wv);
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for hi in 0..cfg.n_heads {
            let qh = g.slice_cols(q, hi * hd, hd);
            let kh = g.slice_cols(k, hi * hd, hd);
            let vh = g.slice_cols(v, hi * hd, hd);
            let qr = g.rope(qh, positions, cfg.rope_base);
            let kr = g.rope(kh, positions, cfg.rope_base);
            heads.push(g.attn(qr, kr, vh, causal));
        }
        let ctx = g.concat_cols(&heads);
        let wo = g.param(params, &p("wo"));
        let attn_out = g.matmul(ctx, wo);
        h = g.add(h, attn_out);

        let mlp_gain = g.param(params, &p("mlp_norm"));
        let xn2 = g.rms_norm(h, mlp_gain);
        let wg = g.param(params, &p("w_gate"));
        let wu = g.param(params, &p("w_up"));
        let wd = g.param(params, &p("w_down"));
        let gate = g.matmul(xn2, wg);
        let up = g.matmul(xn2, wu);
        let act = g.silu(gate);
        let gated = g.mul(act, up);
        let down = g.matmul(gated, wd);
        h = g.add(h, down);
    }
    h
}

// ---- parameter construction -------------------------------------------

const LAYER_PARTS: [&str; 9] =
    ["attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_gate", "w_up", "w_down"];

/// Randomly initialized downstream parameter set (tag "base", trainable).
/// Deterministic for a given seed.
pub fn init_downstream_params(cfg: &ModelConfig, seed: u64) -> ParamSet<f32> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (d, f, v) = (cfg.model_dim, cfg.ffn(), cfg.vocab_size);
    let std = 0.02;
    let mut set = ParamSet::new("base");
    set.insert("tok_embed", Tensor::randn(vec![v, d], std, &mut rng), true).unwrap();
    for layer in 0..cfg.n_layers {
        let p = |name: &str| format!("layers.{layer}.{name}");
        set.insert(p("attn_norm"), Tensor::filled(vec![d], 1.0), true).unwrap();
        for w in ["wq", "wk", "wv", "wo"] {
            set.insert(p(w), Tensor::randn(vec![d, d], std, &mut rng), true).unwrap();
        }
        set.insert(p("mlp_norm"), Tensor::filled(vec![d], 1.0), true).unwrap();
        set.insert(p("w_gate"), Tensor::randn(vec![d, f], std, &mut rng), true).unwrap();
        set.insert(p("w_up"), Tensor::randn(vec![d, f], std, &mut rng), true).unwrap();
        set.insert(p("w_down"), Tensor::randn(vec![f, d], std, &mut rng), true).unwrap();
    }
    set.insert("out_norm", Tensor::filled(vec![d], 1.0), true).unwrap();
    set.insert("lm_head", Tensor::randn(vec![d, v], std, &mut rng), true).unwrap();
    set
}

/// Trainable embedder initialized as a byte-for-byte copy of the first
/// `n_embedder_layers` downstream layers plus the token embedding.
pub fn embedder_from_downstream(cfg: &ModelConfig, base: &ParamSet<f32>) -> ParamSet<f32> {
    let mut set = ParamSet::new("ex");
    set.insert("tok_embed", base.tensor("tok_embed").clone(), true).unwrap();
    for layer in 0..cfg.n_embedder_layers {
        for name in LAYER_PARTS {
            let full = format!("layers.{layer}.{name}");
            set.insert(full.clone(), base.tensor(&full).clone(), true).unwrap();
        }
    }
    set
}

// ---- downstream pretraining ---------------------------------------------

/// Plain next-token pretraining over short windows.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainConfig {
    #[serde(default = "default_pretrain_steps")]
    pub steps: usize,
    #[serde(default = "default_pretrain_batch")]
    pub batch_size: usize,
    /// Window length in tokens (window + 1 must fit max_window).
    #[serde(default = "default_pretrain_window")]
    pub window: usize,
    #[serde(default = "default_pretrain_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_pretrain_steps() -> usize {
    1500
}
fn default_pretrain_batch() -> usize {
    4
}
fn default_pretrain_window() -> usize {
    192
}
fn default_pretrain_lr() -> f64 {
    1e-3
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: default_pretrain_steps(),
            batch_size: default_pretrain_batch(),
            window: default_pretrain_window(),
            learning_rate: default_pretrain_lr(),
            seed: 0,
        }
    }
}

/// Pretrain a downstream LM by next-token prediction on short windows, then
/// freeze it. The result carries every parameter with `trainable = false`.
pub fn pretrain_downstream(
    docs: &[Vec<u32>],
    cfg: &ModelConfig,
    pc: &PretrainConfig,
) -> Result<(ParamSet<f32>, Vec<crate::training::StepRecord>)> {
    use rand::Rng;

    cfg.validate()?;
    if docs.is_empty() {
        return Err(Error::InvalidArg("pretrain: empty corpus".into()));
    }
    if pc.window + 1 > cfg.max_window {
        return Err(Error::Config(format!(
            "pretrain window {} + 1 exceeds max_window {}",
            pc.window, cfg.max_window
        )));
    }
    let mut params = init_downstream_params(cfg, pc.seed);
    let mut rng = ChaCha20Rng::seed_from_u64(pc.seed ^ 0x5eed_f00d);
    let mut opt = crate::training::Adam::new(pc.learning_rate, pc.steps);
    let mut log = Vec::new();
    let t0 = std::time::Instant::now();

    for step in 0..pc.steps {
        let mut g: Graph<f32> = Graph::new();
        let mut ce_sum: Option<Var> = None;
        let mut count = 0usize;
        for _ in 0..pc.batch_size {
            let doc = &docs[rng.random_range(0..docs.len())];
            if doc.len() < 2 {
                continue;
            }
            let span = pc.window.min(doc.len() - 1);
            let start = rng.random_range(0..=doc.len() - span - 1);
            let window = &doc[start..start + span + 1];
            let out =
                forward_tokens(&mut g, &window[..span], &params, cfg, ForwardOpts::default())?;
            let targets: Vec<u32> = window[1..].to_vec();
            let mask = vec![true; span];
            let (s, c) = g.cross_entropy_sum(out.logits, &targets, &mask)?;
            count += c;
            ce_sum = Some(match ce_sum {
                Some(acc) => g.add(acc, s),
                None => s,
            });
        }
        let Some(sum) = ce_sum else { continue };
        let loss = g.scale(sum, 1.0 / count as f64);
        let loss_val = g.scalar(loss).to_f64();
        if !loss_val.is_finite() {
            return Err(Error::Numeric(format!("pretrain loss diverged at step {step}")));
        }
        g.backward(loss)?;
        let grads = g.param_grads("base");
        opt.step(&mut params, &grads)?;
        log.push(crate::training::StepRecord {
            step,
            loss: loss_val,
            k: 0,
            seconds: t0.elapsed().as_secs_f64(),
        });
    }

    params.freeze_all();
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            model_dim: 8,
            n_layers: 2,
            n_heads: 2,
            n_embedder_layers: 1,
            max_window: 32,
            rope_base: 10000.0,
            ffn_dim: Some(16),
        }
    }

    #[test]
    fn single_token_logits_shape_and_finite() {
        let cfg = tiny_cfg();
        let params = init_downstream_params(&cfg, 1);
        let mut g: Graph<f32> = Graph::new();
        let out = forward_tokens(&mut g, &[0], &params, &cfg, ForwardOpts::default()).unwrap();
        let logits = g.value(out.logits);
        assert_eq!(logits.shape(), &[1, 11]);
        assert!(logits.all_finite());
    }

    #[test]
    fn causality_shared_prefix_logits_identical() {
        let cfg = tiny_cfg();
        let params = init_downstream_params(&cfg, 2);
        let run = |tokens: &[u32]| -> Vec<u32> {
            let mut g: Graph<f32> = Graph::new();
            let out = forward_tokens(&mut g, tokens, &params, &cfg, ForwardOpts::default()).unwrap();
            g.value(out.logits).data()[..3 * 11].iter().map(|v| v.to_bits()).collect()
        };
        let a = run(&[1, 2, 3, 4, 5]);
        let b = run(&[1, 2, 3, 9, 10]);
        assert_eq!(a, b, "prefix logits must not depend on the suffix");
    }

    #[test]
    fn embedder_is_causal_and_deterministic() {
        let cfg = tiny_cfg();
        let base = init_downstream_params(&cfg, 3);
        let ex = embedder_from_downstream(&cfg, &base);

        let run = |tokens: &[u32]| -> Vec<f32> {
            let mut g: Graph<f32> = Graph::new();
            let h = embedder_forward(&mut g, tokens, &ex, &cfg).unwrap();
            g.value(h).data().to_vec()
        };
        let a = run(&[1, 2, 3, 4]);
        let a2 = run(&[1, 2, 3, 4]);
        assert_eq!(a, a2);

        // perturb token 3 (index 2): rows 0..2 unchanged, row >= 2 changes
        let b = run(&[1, 2, 9, 4]);
        let d = cfg.model_dim;
        assert_eq!(&a[..2 * d], &b[..2 * d]);
        assert_ne!(&a[2 * d..3 * d], &b[2 * d..3 * d]);
    }

    #[test]
    fn embedder_single_row() {
        let cfg = tiny_cfg();
        let base = init_downstream_params(&cfg, 4);
        let ex = embedder_from_downstream(&cfg, &base);
        let mut g: Graph<f32> = Graph::new();
        let h = embedder_forward(&mut g, &[5], &ex, &cfg).unwrap();
        assert_eq!(g.value(h).shape(), &[1, 8]);
    }

    #[test]
    fn embedder_init_matches_downstream_bytes() {
        let cfg = tiny_cfg();
        let base = init_downstream_params(&cfg, 5);
        let ex = embedder_from_downstream(&cfg, &base);
        assert_eq!(ex.len(), 1 + 9 * cfg.n_embedder_layers);
        for (name, p) in ex.iter() {
            let b = base.tensor(name);
            let same = p
                .value
                .data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same, "embedder param {name} differs from downstream at init");
        }
    }

    #[test]
    fn rope_shift_leaves_logits_unchanged() {
        let cfg = tiny_cfg();
        let params = init_downstream_params(&cfg, 6);
        let run = |offset: usize| -> Vec<f32> {
            let mut g: Graph<f32> = Graph::new();
            let rows: Vec<InputRow<f32>> =
                vec![InputRow::token(3, offset), InputRow::token(7, offset + 1)];
            let out = forward_lm(&mut g, &rows, &params, &cfg, ForwardOpts::default()).unwrap();
            g.value(out.logits).data().to_vec()
        };
        let a = run(0);
        let b = run(5);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-4, "relative encoding: {x} vs {y}");
        }
    }

    #[test]
    fn soft_rows_must_match_model_dim() {
        let cfg = tiny_cfg();
        let params = init_downstream_params(&cfg, 7);
        let mut g: Graph<f32> = Graph::new();
        let rows = vec![InputRow::soft(vec![0.0f32; 5], 0)];
        assert!(forward_lm(&mut g, &rows, &params, &cfg, ForwardOpts::default()).is_err());
    }

    #[test]
    fn window_capacity_enforced_and_overridable() {
        let cfg = tiny_cfg();
        let params = init_downstream_params(&cfg, 8);
        let tokens: Vec<u32> = (0..40).map(|i| (i % 11) as u32).collect();
        let mut g: Graph<f32> = Graph::new();
        assert!(matches!(
            forward_tokens(&mut g, &tokens, &params, &cfg, ForwardOpts::default()),
            Err(Error::Capacity { .. })
        ));
        let mut g2: Graph<f32> = Graph::new();
        let opts = ForwardOpts { causal: true, window_override: Some(usize::MAX) };
        assert!(forward_tokens(&mut g2, &tokens, &params, &cfg, opts).is_ok());
    }

    #[test]
    fn mixed_soft_and_token_rows_run() {
        let cfg = tiny_cfg();
        let params = init_downstream_params(&cfg, 9);
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let soft: Vec<f32> = (0..8).map(|_| f32::sample_normal(&mut r)).collect();
        let rows = vec![
            InputRow::soft(soft.clone(), 0),
            InputRow::soft(soft, 1),
            InputRow::token(2, 2),
            InputRow::token(3, 3),
        ];
        let mut g: Graph<f32> = Graph::new();
        let out = forward_lm(&mut g, &rows, &params, &cfg, ForwardOpts::default()).unwrap();
        assert_eq!(g.value(out.logits).shape(), &[4, 11]);
    }

    #[test]
    fn pretrain_reduces_loss_and_freezes() {
        let cfg = ModelConfig {
            vocab_size: 16,
            model_dim: 16,
            n_layers: 1,
            n_heads: 2,
            n_embedder_layers: 1,
            max_window: 64,
            rope_base: 10000.0,
            ffn_dim: Some(32),
        };
        // a strongly patterned corpus: abcabc...
        let docs: Vec<Vec<u32>> = (0..4)
            .map(|s| (0..200).map(|i| ((i + s) % 3 + 1) as u32).collect())
            .collect();
        let pc = PretrainConfig {
            steps: 60,
            batch_size: 2,
            window: 24,
            learning_rate: 3e-3,
            seed: 0,
        };
        let (params, log) = pretrain_downstream(&docs, &cfg, &pc).unwrap();
        assert!(params.all_frozen());
        let first = log.first().unwrap().loss;
        let last = log.last().unwrap().loss;
        assert!(last < first * 0.5, "pretrain loss should drop: {first} -> {last}");
    }
}
