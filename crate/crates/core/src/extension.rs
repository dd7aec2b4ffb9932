//! The extension pipeline: chunk a long input, run each chunk through the
//! embedder, down-scale the output states by a factor `k`, and assemble the
//! compressed rows together with recent raw tokens into one model input.
//!
//! One compressed row stands in for `k` tokens, so a window of `W` rows
//! holding `p` compressed rows and `W - p` raw tokens covers
//! `p * k + (W - p)` tokens of context.

use rand::seq::index::sample as index_sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{embedder_forward, InputRow, ModelConfig};
use crate::tensor::{Graph, ParamSet, Scalar, Tensor};

/// Partition of a token sequence into fixed-length chunks plus a trailing
/// raw remainder shorter than one chunk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChunkPlan {
    pub chunk_len: usize,
    /// `(start, end)` half-open ranges, each exactly `chunk_len` long.
    pub chunks: Vec<(usize, usize)>,
    /// Half-open trailing range; empty when the length divides evenly.
    pub remainder: (usize, usize),
}

impl ChunkPlan {
    pub fn n_chunks(&self) -> usize {
        self.chunks.len()
    }

    pub fn remainder_len(&self) -> usize {
        self.remainder.1 - self.remainder.0
    }
}

/// Split `input_len` tokens into full chunks of length `chunk_len` plus a
/// remainder of `input_len % chunk_len` raw tokens.
pub fn make_chunk_plan(input_len: usize, chunk_len: usize) -> Result<ChunkPlan> {
    if input_len == 0 || chunk_len == 0 {
        return Err(Error::InvalidArg(format!(
            "chunk plan requires positive lengths (input {input_len}, chunk {chunk_len})"
        )));
    }
    let n = input_len / chunk_len;
    let chunks = (0..n).map(|i| (i * chunk_len, (i + 1) * chunk_len)).collect();
    Ok(ChunkPlan { chunk_len, chunks, remainder: (n * chunk_len, input_len) })
}

/// Down-sampling rate: one compressed row per `k` output embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScalingFactor(pub usize);

impl ScalingFactor {
    pub fn get(self) -> usize {
        self.0
    }
}

/// How rows are selected from the embedder output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DownscaleScheme {
    /// Last embedding of every k-step stride (the trained default).
    #[default]
    Strided,
    /// ceil(len/k) distinct uniformly sampled rows, in order.
    Random,
    /// The last ceil(len/k) rows.
    Terminal,
}

/// Strided selection: rows `k-1, 2k-1, ...` (1-based `k, 2k, ...`), plus
/// the final row when `k` does not divide `len`, giving `ceil(len/k)` rows.
pub fn strided_indices(len: usize, k: usize) -> Result<Vec<usize>> {
    check_k(len, k)?;
    let mut v: Vec<usize> = (1..=len / k).map(|j| j * k - 1).collect();
    if len % k != 0 {
        v.push(len - 1);
    }
    Ok(v)
}

fn check_k(len: usize, k: usize) -> Result<()> {
    if k == 0 || k > len {
        return Err(Error::InvalidArg(format!(
            "scaling factor {k} out of range for chunk length {len}"
        )));
    }
    Ok(())
}

/// Row indices (0-based) selected from a chunk of `len` output embeddings.
/// Every scheme yields `ceil(len / k)` rows in increasing order.
pub fn downscale_indices<R: Rng + ?Sized>(
    len: usize,
    k: usize,
    scheme: DownscaleScheme,
    rng: &mut R,
) -> Result<Vec<usize>> {
    check_k(len, k)?;
    let m = len.div_ceil(k);
    let idx = match scheme {
        DownscaleScheme::Strided => strided_indices(len, k)?,
        DownscaleScheme::Random => {
            let mut v = index_sample(rng, len, m).into_vec();
            v.sort_unstable();
            v
        }
        DownscaleScheme::Terminal => (len - m..len).collect(),
    };
    debug_assert_eq!(idx.len(), m);
    Ok(idx)
}

/// Compressed representation of one chunk: `ceil(len/k)` rows of model
/// dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtensibleEmbeddingSet {
    pub rows: Tensor<f32>,
    pub chunk_index: usize,
    pub k: usize,
}

impl ExtensibleEmbeddingSet {
    pub fn n_rows(&self) -> usize {
        self.rows.rows()
    }
}

/// Select rows of a computed hidden-state matrix.
pub fn downscale<R: Rng + ?Sized>(
    hidden: &Tensor<f32>,
    chunk_index: usize,
    k: ScalingFactor,
    scheme: DownscaleScheme,
    rng: &mut R,
) -> Result<ExtensibleEmbeddingSet> {
    let idx = downscale_indices(hidden.rows(), k.get(), scheme, rng)?;
    Ok(ExtensibleEmbeddingSet {
        rows: hidden.select_rows(&idx),
        chunk_index,
        k: k.get(),
    })
}

/// Compressed rows (in chunk order) followed by recent raw tokens, with
/// consecutive positions. Errors when the result would overflow `window`,
/// signalling the caller to condense or raise `k`.
pub fn build_context<F: Scalar>(
    ex_sets: &[ExtensibleEmbeddingSet],
    recent_tokens: &[u32],
    window: usize,
) -> Result<Vec<InputRow<F>>> {
    let ex_rows: usize = ex_sets.iter().map(|s| s.n_rows()).sum();
    let needed = ex_rows + recent_tokens.len();
    if needed > window {
        return Err(Error::Capacity { needed, capacity: window });
    }
    let mut rows = Vec::with_capacity(needed);
    let mut pos = 0usize;
    for set in ex_sets {
        for r in 0..set.n_rows() {
            let v: Vec<F> = set.rows.row(r).iter().map(|&x| F::from_f32(x)).collect();
            rows.push(InputRow::soft(v, pos));
            pos += 1;
        }
    }
    for &t in recent_tokens {
        rows.push(InputRow::token(t, pos));
        pos += 1;
    }
    Ok(rows)
}

/// Run the embedder over one chunk and return the full output states as a
/// plain tensor (inference path; no gradients retained).
pub fn embed_chunk(
    chunk_tokens: &[u32],
    params_ex: &ParamSet<f32>,
    cfg: &ModelConfig,
) -> Result<Tensor<f32>> {
    let mut g: Graph<f32> = Graph::new();
    let h = embedder_forward(&mut g, chunk_tokens, params_ex, cfg)?;
    Ok(g.value(h).clone())
}

/// Compress every full chunk of a document; the trailing remainder is left
/// raw. Deterministic for strided/terminal; the random scheme draws from
/// the caller's RNG.
pub fn compress_document<R: Rng + ?Sized>(
    tokens: &[u32],
    chunk_len: usize,
    k: ScalingFactor,
    scheme: DownscaleScheme,
    params_ex: &ParamSet<f32>,
    cfg: &ModelConfig,
    rng: &mut R,
) -> Result<Vec<ExtensibleEmbeddingSet>> {
    let plan = make_chunk_plan(tokens.len(), chunk_len)?;
    let mut sets = Vec::with_capacity(plan.n_chunks());
    for (i, &(start, end)) in plan.chunks.iter().enumerate() {
        let hidden = embed_chunk(&tokens[start..end], params_ex, cfg)?;
        sets.push(downscale(&hidden, i, k, scheme, rng)?);
    }
    Ok(sets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn chunk_plan_sixteen_k_into_four_k() {
        let plan = make_chunk_plan(16384, 4096).unwrap();
        assert_eq!(plan.n_chunks(), 4);
        assert_eq!(plan.remainder_len(), 0);
    }

    #[test]
    fn chunk_plan_sub_chunk_input() {
        let plan = make_chunk_plan(5, 8).unwrap();
        assert_eq!(plan.n_chunks(), 0);
        assert_eq!(plan.remainder, (0, 5));
    }

    #[test]
    fn chunk_plan_hand_count() {
        let plan = make_chunk_plan(10, 3).unwrap();
        assert_eq!(plan.chunks, vec![(0, 3), (3, 6), (6, 9)]);
        assert_eq!(plan.remainder, (9, 10));
    }

    #[test]
    fn strided_indices_four_k_by_thirty_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let idx = downscale_indices(4096, 32, DownscaleScheme::Strided, &mut rng).unwrap();
        assert_eq!(idx.len(), 128);
        assert_eq!(idx[0], 31); // 1-based row 32
        assert_eq!(*idx.last().unwrap(), 4095); // 1-based row 4096
        for (j, &i) in idx.iter().enumerate() {
            assert_eq!(i, 32 * (j + 1) - 1);
        }
    }

    #[test]
    fn strided_k1_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let idx = downscale_indices(7, 1, DownscaleScheme::Strided, &mut rng).unwrap();
        assert_eq!(idx, vec![0, 1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn strided_partial_stride_appends_final_row() {
        // len 10, k 3: strides end at 1-based rows 3, 6, 9 and the final
        // row 10 completes ceil(10/3) = 4 selections.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let idx = downscale_indices(10, 3, DownscaleScheme::Strided, &mut rng).unwrap();
        assert_eq!(idx, vec![2, 5, 8, 9]);
    }

    #[test]
    fn terminal_takes_last_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let idx = downscale_indices(10, 3, DownscaleScheme::Terminal, &mut rng).unwrap();
        assert_eq!(idx, vec![6, 7, 8, 9]);
    }

    #[test]
    fn random_indices_are_distinct_sorted_and_counted() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let idx = downscale_indices(50, 7, DownscaleScheme::Random, &mut rng).unwrap();
        assert_eq!(idx.len(), 8);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        assert!(idx.iter().all(|&i| i < 50));
    }

    #[test]
    fn k_larger_than_chunk_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(downscale_indices(4, 5, DownscaleScheme::Strided, &mut rng).is_err());
    }

    #[test]
    fn coverage_when_k_divides_len() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (len, k) = (64, 8);
        let idx = downscale_indices(len, k, DownscaleScheme::Strided, &mut rng).unwrap();
        assert_eq!(idx.len(), len / k);
        assert_eq!(*idx.last().unwrap(), len - 1);
        // consecutive selections are exactly k apart: equal strides
        assert!(idx.windows(2).all(|w| w[1] - w[0] == k));
    }

    #[test]
    fn extension_arithmetic_exceeds_hundred_k() {
        // p compressed rows at factor k plus (W - p) raw tokens
        let (w, k) = (4096usize, 32usize);
        let p = w - 512;
        let representable = p * k + (w - p);
        assert!(representable > 100_000, "got {representable}");
    }

    #[test]
    fn build_context_orders_rows_and_enforces_capacity() {
        let set = ExtensibleEmbeddingSet {
            rows: Tensor::new(vec![2, 4], vec![1.0; 8]).unwrap(),
            chunk_index: 0,
            k: 2,
        };
        let rows: Vec<InputRow<f32>> = build_context(&[set.clone()], &[7, 8], 8).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(matches!(rows[0].kind, crate::model::RowKind::Soft(_)));
        assert!(matches!(rows[2].kind, crate::model::RowKind::Token(7)));
        assert!(rows.iter().enumerate().all(|(i, r)| r.pos == i));

        let err = build_context::<f32>(&[set], &[1, 2, 3], 4);
        assert!(matches!(err, Err(Error::Capacity { needed: 5, capacity: 4 })));
    }

    #[test]
    fn chunk_embeddings_independent_of_other_chunks() {
        use crate::model::{embedder_from_downstream, init_downstream_params};
        let cfg = ModelConfig {
            vocab_size: 300,
            model_dim: 8,
            n_layers: 1,
            n_heads: 2,
            n_embedder_layers: 1,
            max_window: 32,
            rope_base: 10000.0,
            ffn_dim: Some(16),
        };
        let base = init_downstream_params(&cfg, 0);
        let ex = embedder_from_downstream(&cfg, &base);
        let mut tokens: Vec<u32> = (0..12).map(|i| i % 7).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = compress_document(
            &tokens,
            4,
            ScalingFactor(2),
            DownscaleScheme::Strided,
            &ex,
            &cfg,
            &mut rng,
        )
        .unwrap();
        tokens[9] = 6; // edit chunk 2 only
        let b = compress_document(
            &tokens,
            4,
            ScalingFactor(2),
            DownscaleScheme::Strided,
            &ex,
            &cfg,
            &mut rng,
        )
        .unwrap();
        assert_eq!(a[0], b[0]);
        assert_eq!(a[1], b[1]);
        assert_ne!(a[2], b[2]);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn chunk_plan_partitions_input(len in 1usize..5000, chunk in 1usize..600) {
                let plan = make_chunk_plan(len, chunk).unwrap();
                let mut covered = 0usize;
                for (i, &(s, e)) in plan.chunks.iter().enumerate() {
                    prop_assert_eq!(s, i * chunk);
                    prop_assert_eq!(e - s, chunk);
                    covered = e;
                }
                prop_assert_eq!(plan.remainder.0, covered);
                prop_assert_eq!(plan.remainder.1, len);
                prop_assert!(plan.remainder_len() < chunk);
            }

            #[test]
            fn downscale_counts_and_bounds(
                len in 1usize..500,
                k_raw in 1usize..64,
                scheme_pick in 0usize..3,
                seed in 0u64..1000,
            ) {
                let k = k_raw.min(len);
                let scheme = [DownscaleScheme::Strided, DownscaleScheme::Random, DownscaleScheme::Terminal][scheme_pick];
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let idx = downscale_indices(len, k, scheme, &mut rng).unwrap();
                prop_assert_eq!(idx.len(), len.div_ceil(k));
                prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
                prop_assert!(idx.iter().all(|&i| i < len));
                if matches!(scheme, DownscaleScheme::Strided) {
                    prop_assert_eq!(*idx.last().unwrap(), len - 1);
                }
            }
        }
    }
}
