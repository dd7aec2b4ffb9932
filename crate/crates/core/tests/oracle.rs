//! Independent 64-bit reference recomputation of the model forward and the
//! two-pass training loss, written with plain loops and no tape, plus
//! end-to-end finite-difference checks of the gradients that reach the
//! embedder. The reference deliberately shares no code with the graph
//! implementation.

use exembed::extension::strided_indices;
use exembed::model::{
    embedder_from_downstream, forward_tokens, init_downstream_params, ForwardOpts, ModelConfig,
};
use exembed::tensor::{Graph, ParamSet};
use exembed::training::{two_stream_loss, TrainSample};

mod reference {
    use exembed::model::ModelConfig;
    use exembed::tensor::ParamSet;

    fn rms_norm(row: &[f64], gain: &[f64]) -> Vec<f64> {
        let d = row.len() as f64;
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d;
        let inv = 1.0 / (ms + 1e-5).sqrt();
        row.iter().zip(gain).map(|(&v, &g)| v * inv * g).collect()
    }

    // x [d] times W [d, out], row-major
    fn vec_mat(x: &[f64], w: &[f64], out_dim: usize) -> Vec<f64> {
        let d = x.len();
        let mut out = vec![0.0; out_dim];
        for (i, &xi) in x.iter().enumerate() {
            for j in 0..out_dim {
                out[j] += xi * w[i * out_dim + j];
            }
        }
        debug_assert_eq!(w.len(), d * out_dim);
        out
    }

    fn rope_rotate(v: &mut [f64], pos: usize, base: f64) {
        let h = v.len();
        for p in 0..h / 2 {
            let theta = pos as f64 * base.powf(-2.0 * p as f64 / h as f64);
            let (s, c) = theta.sin_cos();
            let (a, b) = (v[2 * p], v[2 * p + 1]);
            v[2 * p] = a * c - b * s;
            v[2 * p + 1] = a * s + b * c;
        }
    }

    /// Forward over explicit input vectors; returns hidden rows after
    /// `n_layers` blocks (no output norm or head).
    pub fn trunk(
        params: &ParamSet<f64>,
        cfg: &ModelConfig,
        input: &[Vec<f64>],
        positions: &[usize],
        n_layers: usize,
    ) -> Vec<Vec<f64>> {
        let n = input.len();
        let d = cfg.model_dim;
        let hd = cfg.head_dim();
        let mut h: Vec<Vec<f64>> = input.to_vec();

        for layer in 0..n_layers {
            let name = |part: &str| format!("layers.{layer}.{part}");
            let gain_a = params.tensor(&name("attn_norm")).data();
            let wq = params.tensor(&name("wq")).data();
            let wk = params.tensor(&name("wk")).data();
            let wv = params.tensor(&name("wv")).data();
            let wo = params.tensor(&name("wo")).data();

            let xn: Vec<Vec<f64>> = h.iter().map(|r| rms_norm(r, gain_a)).collect();
            let q: Vec<Vec<f64>> = xn.iter().map(|r| vec_mat(r, wq, d)).collect();
            let k: Vec<Vec<f64>> = xn.iter().map(|r| vec_mat(r, wk, d)).collect();
            let v: Vec<Vec<f64>> = xn.iter().map(|r| vec_mat(r, wv, d)).collect();

            let mut ctx = vec![vec![0.0; d]; n];
            for head in 0..cfg.n_heads {
                let s = head * hd;
                for i in 0..n {
                    let mut qi = q[i][s..s + hd].to_vec();
                    rope_rotate(&mut qi, positions[i], cfg.rope_base);
                    // causal scores over rows 0..=i
                    let mut scores = Vec::with_capacity(i + 1);
                    for j in 0..=i {
                        let mut kj = k[j][s..s + hd].to_vec();
                        rope_rotate(&mut kj, positions[j], cfg.rope_base);
                        let dot: f64 = qi.iter().zip(&kj).map(|(a, b)| a * b).sum();
                        scores.push(dot / (hd as f64).sqrt());
                    }
                    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = scores.iter().map(|x| (x - max).exp()).collect();
                    let denom: f64 = exps.iter().sum();
                    for j in 0..=i {
                        let p = exps[j] / denom;
                        for c in 0..hd {
                            ctx[i][s + c] += p * v[j][s + c];
                        }
                    }
                }
            }
            for i in 0..n {
                let o = vec_mat(&ctx[i], wo, d);
                for c in 0..d {
                    h[i][c] += o[c];
                }
            }

            let gain_m = params.tensor(&name("mlp_norm")).data();
            let wg = params.tensor(&name("w_gate")).data();
            let wu = params.tensor(&name("w_up")).data();
            let wd = params.tensor(&name("w_down")).data();
            let f = cfg.ffn();
            for i in 0..n {
                let xn2 = rms_norm(&h[i], gain_m);
                let gate = vec_mat(&xn2, wg, f);
                let up = vec_mat(&xn2, wu, f);
                let act: Vec<f64> = gate
                    .iter()
                    .zip(&up)
                    .map(|(&g, &u)| g / (1.0 + (-g).exp()) * u)
                    .collect();
                let down = vec_mat(&act, wd, d);
                for c in 0..d {
                    h[i][c] += down[c];
                }
            }
        }
        h
    }

    pub fn embed_tokens(params: &ParamSet<f64>, cfg: &ModelConfig, tokens: &[u32]) -> Vec<Vec<f64>> {
        let table = params.tensor("tok_embed").data();
        let d = cfg.model_dim;
        tokens
            .iter()
            .map(|&t| table[t as usize * d..(t as usize + 1) * d].to_vec())
            .collect()
    }

    pub fn logits(params: &ParamSet<f64>, cfg: &ModelConfig, hidden: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let gain = params.tensor("out_norm").data();
        let head = params.tensor("lm_head").data();
        hidden
            .iter()
            .map(|h| vec_mat(&rms_norm(h, gain), head, cfg.vocab_size))
            .collect()
    }

    pub fn nll(logits_row: &[f64], target: u32) -> f64 {
        let max = logits_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = logits_row.iter().map(|x| (x - max).exp()).sum();
        max + denom.ln() - logits_row[target as usize]
    }

    /// Straight-line recomputation of the two-pass objective: compress all
    /// chunks but the last with strided selection, then for each chunk
    /// i >= 2 predict all its tokens from [retained EX rows, within-chunk
    /// history], sliding the oldest sets out when the window would
    /// overflow.
    pub fn two_pass_loss(
        base: &ParamSet<f64>,
        ex: &ParamSet<f64>,
        cfg: &ModelConfig,
        tokens: &[u32],
        chunk: usize,
        k: usize,
    ) -> f64 {
        let n_chunks = tokens.len() / chunk;
        let m = chunk.div_ceil(k);
        // pass 1
        let mut ex_rows: Vec<Vec<Vec<f64>>> = Vec::new();
        for i in 0..n_chunks - 1 {
            let toks = &tokens[i * chunk..(i + 1) * chunk];
            let input = embed_tokens(ex, cfg, toks);
            let positions: Vec<usize> = (0..chunk).collect();
            let hidden = trunk(ex, cfg, &input, &positions, cfg.n_embedder_layers);
            let mut rows = Vec::with_capacity(m);
            for j in 1..=chunk / k {
                rows.push(hidden[j * k - 1].clone());
            }
            if chunk % k != 0 {
                rows.push(hidden[chunk - 1].clone());
            }
            ex_rows.push(rows);
        }
        // pass 2
        let max_sets = (cfg.max_window - chunk) / m;
        let mut total = 0.0;
        let mut count = 0usize;
        for i in 1..n_chunks {
            let keep = i.min(max_sets);
            let mut input: Vec<Vec<f64>> = Vec::new();
            for set in &ex_rows[i - keep..i] {
                input.extend(set.iter().cloned());
            }
            let n_ex = input.len();
            let toks = &tokens[i * chunk..(i + 1) * chunk];
            input.extend(embed_tokens(base, cfg, toks));
            let positions: Vec<usize> = (0..input.len()).collect();
            let hidden = trunk(base, cfg, &input, &positions, cfg.n_layers);
            let lg = logits(base, cfg, &hidden);
            for (j, &t) in toks.iter().enumerate() {
                total += nll(&lg[n_ex - 1 + j], t);
                count += 1;
            }
        }
        total / count as f64
    }
}

fn oracle_cfg() -> ModelConfig {
    ModelConfig {
        vocab_size: 11,
        model_dim: 8,
        n_layers: 2,
        n_heads: 2,
        n_embedder_layers: 1,
        max_window: 40,
        rope_base: 10000.0,
        ffn_dim: Some(16),
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

#[test]
fn graph_forward_matches_straight_line_reference() {
    let cfg = oracle_cfg();
    let base = init_downstream_params(&cfg, 42).to_f64_set();
    let tokens: Vec<u32> = vec![1, 5, 2, 9, 0, 10, 3];

    let mut g: Graph<f64> = Graph::new();
    let out = forward_tokens(&mut g, &tokens, &base, &cfg, ForwardOpts::default()).unwrap();
    let got = g.value(out.logits);

    let input = reference::embed_tokens(&base, &cfg, &tokens);
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let hidden = reference::trunk(&base, &cfg, &input, &positions, cfg.n_layers);
    let want = reference::logits(&base, &cfg, &hidden);

    for (r, want_row) in want.iter().enumerate() {
        for (c, &w) in want_row.iter().enumerate() {
            let have = got.at(r, c);
            assert!(
                rel_err(have, w) < 1e-9,
                "logits[{r}][{c}]: graph {have} vs reference {w}"
            );
        }
    }
}

#[test]
fn two_pass_loss_matches_reference_factorization() {
    let cfg = oracle_cfg();
    let base32 = {
        let mut b = init_downstream_params(&cfg, 7);
        b.freeze_all();
        b
    };
    let ex32 = embedder_from_downstream(&cfg, &base32);
    let base = base32.to_f64_set();
    let ex = {
        let mut e = ex32.to_f64_set();
        e.set_trainable_all(true);
        e
    };

    for (len, chunk, k) in [(20, 5, 2), (24, 4, 4), (36, 6, 3)] {
        let tokens: Vec<u32> = (0..len).map(|i| ((i * 5 + 3) % 11) as u32).collect();
        let sample = TrainSample::new(tokens.clone(), k, chunk).unwrap();
        let mut g: Graph<f64> = Graph::new();
        let (loss, _) = two_stream_loss(&mut g, &sample, &base, &ex, &cfg).unwrap();
        let got = g.scalar(loss);
        let want = reference::two_pass_loss(&base, &ex, &cfg, &tokens, chunk, k);
        assert!(
            rel_err(got, want) < 1e-9,
            "len {len} chunk {chunk} k {k}: graph {got} vs reference {want}"
        );
    }
}

#[test]
fn two_pass_reference_slides_like_the_graph() {
    // window 14, chunk 4, k 2 -> 2 rows per set, at most 5 sets; by chunk 7
    // the plan must drop the oldest sets and both paths must agree
    let cfg = ModelConfig { max_window: 14, ..oracle_cfg() };
    let base = {
        let mut b = init_downstream_params(&cfg, 9);
        b.freeze_all();
        b.to_f64_set()
    };
    let mut ex = embedder_from_downstream(&cfg, &init_downstream_params(&cfg, 9)).to_f64_set();
    ex.set_trainable_all(true);

    let tokens: Vec<u32> = (0..32).map(|i| ((i * 3 + 1) % 11) as u32).collect();
    let sample = TrainSample::new(tokens.clone(), 2, 4).unwrap();
    let mut g: Graph<f64> = Graph::new();
    let (loss, stats) = two_stream_loss(&mut g, &sample, &base, &ex, &cfg).unwrap();
    assert!(stats.ex_sets_dropped > 0, "expected sliding in this geometry");
    let got = g.scalar(loss);
    let want = reference::two_pass_loss(&base, &ex, &cfg, &tokens, 4, 2);
    assert!(rel_err(got, want) < 1e-9, "graph {got} vs reference {want}");
}

#[test]
fn embedder_gradients_match_finite_differences_end_to_end() {
    let cfg = oracle_cfg();
    let base = {
        let mut b = init_downstream_params(&cfg, 3);
        b.freeze_all();
        b.to_f64_set()
    };
    let mut ex = embedder_from_downstream(&cfg, &init_downstream_params(&cfg, 3)).to_f64_set();
    ex.set_trainable_all(true);

    let tokens: Vec<u32> = (0..15).map(|i| ((i * 7 + 2) % 11) as u32).collect();
    let sample = TrainSample::new(tokens, 2, 5).unwrap();

    let loss_for = |params_ex: &ParamSet<f64>| -> f64 {
        let mut g: Graph<f64> = Graph::new();
        let (loss, _) = two_stream_loss(&mut g, &sample, &base, params_ex, &cfg).unwrap();
        g.scalar(loss)
    };

    let mut g: Graph<f64> = Graph::new();
    let (loss, _) = two_stream_loss(&mut g, &sample, &base, &ex, &cfg).unwrap();
    g.backward(loss).unwrap();
    let grads = g.param_grads("ex");
    assert!(!grads.is_empty());
    // no gradient may reach the frozen downstream parameters
    assert!(g.param_grads("base").is_empty());

    let h = 1e-4;
    let mut checked = 0usize;
    for (name, grad) in &grads {
        // probe a few entries of every parameter
        let n = grad.numel();
        for &e in &[0usize, n / 2, n - 1] {
            let mut plus = ex.clone();
            plus.tensor_mut(name).data_mut()[e] += h;
            let mut minus = ex.clone();
            minus.tensor_mut(name).data_mut()[e] -= h;
            let numeric = (loss_for(&plus) - loss_for(&minus)) / (2.0 * h);
            let analytic = grad.data()[e];
            let denom = analytic.abs().max(numeric.abs());
            if denom < 1e-8 {
                continue;
            }
            let rel = (analytic - numeric).abs() / denom;
            assert!(
                rel < 1e-3,
                "{name}[{e}]: analytic {analytic} vs numeric {numeric} (rel {rel:.2e})"
            );
            checked += 1;
        }
    }
    assert!(checked > 20, "checked only {checked} coordinates");
}

#[test]
fn strided_reference_agrees_with_library_indices() {
    for (len, k) in [(10, 3), (64, 8), (7, 7), (9, 1)] {
        let lib = strided_indices(len, k).unwrap();
        let mut manual: Vec<usize> = (1..=len / k).map(|j| j * k - 1).collect();
        if len % k != 0 {
            manual.push(len - 1);
        }
        assert_eq!(lib, manual);
    }
}
