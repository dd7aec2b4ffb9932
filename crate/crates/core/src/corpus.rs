//! Deterministic synthetic corpora and byte-level tokenization.
//!
//! Two generators matter: an order-1 Markov stream over lowercase text
//! (local structure a small LM can learn) and key-value recall documents
//! that plant `&key=value;` bindings whose value reappears after a query
//! marker `?key=` at a controlled distance. Values are independent of
//! everything except their key binding, so a model whose effective context
//! is shorter than the planted distance can only guess them.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Byte-level vocabulary: 256 raw bytes plus BOS/EOS/PAD.
pub const VOCAB_SIZE: usize = 259;
pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;

const PAIR_MARK: u8 = b'&';
const QUERY_MARK: u8 = b'?';
const ASSIGN: u8 = b'=';
const END_MARK: u8 = b';';

/// Bytes map to their own token id; round-trip exact.
pub fn tokenize(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| b as u32).collect()
}

/// Inverse of [`tokenize`]; special tokens (BOS/EOS/PAD) are dropped.
pub fn detokenize(ids: &[u32]) -> Vec<u8> {
    ids.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    /// Pure Markov filler.
    Markov,
    /// Markov filler with planted key-value bindings and queries.
    KvRecall,
    /// Per-document coin flip between the two above.
    Mixed,
    /// Raw bytes from a file, one document per line.
    File,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub generator: GeneratorKind,
    /// Mean document length in tokens (excluding BOS/EOS).
    #[serde(default = "default_doc_len")]
    pub doc_len: usize,
    /// Uniform +/- jitter applied to the length.
    #[serde(default = "default_jitter")]
    pub doc_len_jitter: usize,
    /// Planted pair-to-query distances are drawn uniformly from this range.
    #[serde(default = "default_dist_min")]
    pub dep_distance_min: usize,
    #[serde(default = "default_dist_max")]
    pub dep_distance_max: usize,
    #[serde(default = "default_pairs")]
    pub kv_pairs_per_doc: usize,
    /// Of the planted pairs, how many queries are forced into the final
    /// `tail_zone` tokens of the document.
    #[serde(default = "default_tail_recurrences")]
    pub tail_recurrences: usize,
    #[serde(default = "default_tail_zone")]
    pub tail_zone: usize,
    #[serde(default = "default_key_len")]
    pub key_len: usize,
    #[serde(default = "default_value_len")]
    pub value_len: usize,
    #[serde(default)]
    pub seed: u64,
    /// Source for [`GeneratorKind::File`].
    #[serde(default)]
    pub file: Option<PathBuf>,
}

fn default_doc_len() -> usize {
    4096
}
fn default_jitter() -> usize {
    0
}
fn default_dist_min() -> usize {
    16
}
fn default_dist_max() -> usize {
    1536
}
fn default_pairs() -> usize {
    10
}
fn default_tail_recurrences() -> usize {
    3
}
fn default_tail_zone() -> usize {
    96
}
fn default_key_len() -> usize {
    3
}
fn default_value_len() -> usize {
    2
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            generator: GeneratorKind::Mixed,
            doc_len: default_doc_len(),
            doc_len_jitter: default_jitter(),
            dep_distance_min: default_dist_min(),
            dep_distance_max: default_dist_max(),
            kv_pairs_per_doc: default_pairs(),
            tail_recurrences: default_tail_recurrences(),
            tail_zone: default_tail_zone(),
            key_len: default_key_len(),
            value_len: default_value_len(),
            seed: 0,
            file: None,
        }
    }
}

/// Order-1 Markov chain over lowercase letters plus space. The transition
/// table is a pure function of the seed, shared by every document of a
/// corpus, so the structure is learnable.
struct MarkovChain {
    // per symbol: (successor, cumulative weight) entries
    succ: Vec<Vec<(u8, f64)>>,
}

const FILLER_SYMS: usize = 27;

fn sym_byte(i: usize) -> u8 {
    if i < 26 {
        b'a' + i as u8
    } else {
        b' '
    }
}

impl MarkovChain {
    fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x6d61_726b_6f76);
        let branch = 4;
        let mut succ = Vec::with_capacity(FILLER_SYMS);
        for _ in 0..FILLER_SYMS {
            let mut entries: Vec<(u8, f64)> = Vec::with_capacity(branch);
            let mut total = 0.0;
            for _ in 0..branch {
                let s = sym_byte(rng.random_range(0..FILLER_SYMS));
                let w = 0.25 + rng.random::<f64>();
                total += w;
                entries.push((s, total));
            }
            for e in &mut entries {
                e.1 /= total;
            }
            succ.push(entries);
        }
        MarkovChain { succ }
    }

    fn sym_index(b: u8) -> usize {
        if b == b' ' {
            26
        } else {
            (b - b'a') as usize
        }
    }

    fn step<R: Rng>(&self, current: u8, rng: &mut R) -> u8 {
        let entries = &self.succ[Self::sym_index(current)];
        let x = rng.random::<f64>();
        for &(s, cum) in entries {
            if x <= cum {
                return s;
            }
        }
        entries.last().unwrap().0
    }

    fn fill<R: Rng>(&self, len: usize, rng: &mut R) -> Vec<u8> {
        let mut out = Vec::with_capacity(len);
        let mut cur = sym_byte(rng.random_range(0..FILLER_SYMS));
        for _ in 0..len {
            out.push(cur);
            cur = self.step(cur, rng);
        }
        out
    }
}

fn random_letters<R: Rng>(len: usize, rng: &mut R) -> Vec<u8> {
    (0..len).map(|_| b'a' + rng.random_range(0..26u8)).collect()
}

/// A planted binding: `&key=value;` at `pair_pos`, `?key=value;` at
/// `query_pos`. The value tokens right after `?key=` are the long-range
/// recoverable span.
#[derive(Clone, Debug)]
pub struct PlantedPair {
    pub key: Vec<u8>,
    pub value: Vec<u8>,
    pub pair_pos: usize,
    pub query_pos: usize,
}

impl PlantedPair {
    pub fn pair_span_len(key_len: usize, value_len: usize) -> usize {
        key_len + value_len + 3
    }

    fn pair_bytes(&self) -> Vec<u8> {
        let mut b = vec![PAIR_MARK];
        b.extend_from_slice(&self.key);
        b.push(ASSIGN);
        b.extend_from_slice(&self.value);
        b.push(END_MARK);
        b
    }

    fn query_bytes(&self) -> Vec<u8> {
        let mut b = vec![QUERY_MARK];
        b.extend_from_slice(&self.key);
        b.push(ASSIGN);
        b.extend_from_slice(&self.value);
        b.push(END_MARK);
        b
    }

    /// Offset (from `query_pos`) of the first value byte in the query span.
    pub fn value_offset_in_query(&self) -> usize {
        1 + self.key.len() + 1
    }
}

/// One generated document plus its planted-pair metadata.
#[derive(Clone, Debug)]
pub struct Document {
    pub tokens: Vec<u32>,
    pub pairs: Vec<PlantedPair>,
}

/// Generate `n_docs` documents. Deterministic in `(spec, doc index)`: the
/// i-th document does not depend on how many documents are requested.
pub fn generate(spec: &CorpusSpec, n_docs: usize) -> Result<Vec<Document>> {
    if let GeneratorKind::File = spec.generator {
        return generate_from_file(spec);
    }
    let chain = MarkovChain::from_seed(spec.seed);
    let mut docs = Vec::with_capacity(n_docs);
    for i in 0..n_docs {
        let mut rng = ChaCha20Rng::seed_from_u64(spec.seed.wrapping_add(0x9e37_79b9).wrapping_mul(i as u64 + 1));
        let with_pairs = match spec.generator {
            GeneratorKind::Markov => false,
            GeneratorKind::KvRecall => true,
            GeneratorKind::Mixed => rng.random::<f64>() < 0.5 || spec.kv_pairs_per_doc == 0,
            GeneratorKind::File => unreachable!(),
        };
        docs.push(generate_doc(spec, &chain, with_pairs, &mut rng));
    }
    Ok(docs)
}

/// Token documents only (drops pair metadata).
pub fn generate_tokens(spec: &CorpusSpec, n_docs: usize) -> Result<Vec<Vec<u32>>> {
    Ok(generate(spec, n_docs)?.into_iter().map(|d| d.tokens).collect())
}

fn generate_doc(
    spec: &CorpusSpec,
    chain: &MarkovChain,
    with_pairs: bool,
    rng: &mut ChaCha20Rng,
) -> Document {
    let len = if spec.doc_len_jitter > 0 {
        let j = rng.random_range(0..=2 * spec.doc_len_jitter);
        (spec.doc_len + j).saturating_sub(spec.doc_len_jitter).max(8)
    } else {
        spec.doc_len
    };
    let mut bytes = chain.fill(len, rng);
    let mut pairs = Vec::new();

    if with_pairs && spec.kv_pairs_per_doc > 0 {
        let span = PlantedPair::pair_span_len(spec.key_len, spec.value_len);
        let mut occupied: Vec<(usize, usize)> = Vec::new();
        let overlaps = |s: usize, e: usize, occ: &[(usize, usize)]| {
            occ.iter().any(|&(a, b)| s < b && a < e)
        };
        for p in 0..spec.kv_pairs_per_doc {
            let force_tail = p < spec.tail_recurrences;
            let mut placed = false;
            for _attempt in 0..24 {
                let dist_hi = spec.dep_distance_max.min(len.saturating_sub(2 * span + 2));
                if dist_hi <= spec.dep_distance_min {
                    break;
                }
                let distance = rng.random_range(spec.dep_distance_min..=dist_hi);
                let query_pos = if force_tail {
                    let zone = spec.tail_zone.min(len.saturating_sub(span));
                    if len < span + zone {
                        break;
                    }
                    rng.random_range(len - zone..=len - span)
                } else {
                    let lo = distance + span;
                    let hi = len - span;
                    if lo >= hi {
                        continue;
                    }
                    rng.random_range(lo..hi)
                };
                let Some(pair_pos) = query_pos.checked_sub(distance) else { continue };
                if pair_pos + span > query_pos {
                    continue; // pair span would run into the query span
                }
                if overlaps(pair_pos, pair_pos + span, &occupied)
                    || overlaps(query_pos, query_pos + span, &occupied)
                {
                    continue;
                }
                let pair = PlantedPair {
                    key: random_letters(spec.key_len, rng),
                    value: random_letters(spec.value_len, rng),
                    pair_pos,
                    query_pos,
                };
                bytes[pair_pos..pair_pos + span].copy_from_slice(&pair.pair_bytes());
                bytes[query_pos..query_pos + span].copy_from_slice(&pair.query_bytes());
                occupied.push((pair_pos, pair_pos + span));
                occupied.push((query_pos, query_pos + span));
                pairs.push(pair);
                placed = true;
                break;
            }
            if !placed {
                continue;
            }
        }
        pairs.sort_by_key(|p| p.query_pos);
    }

    let mut tokens = Vec::with_capacity(len + 2);
    tokens.push(BOS);
    tokens.extend(tokenize(&bytes));
    tokens.push(EOS);
    // account for the BOS shift
    for p in &mut pairs {
        p.pair_pos += 1;
        p.query_pos += 1;
    }
    Document { tokens, pairs }
}

fn generate_from_file(spec: &CorpusSpec) -> Result<Vec<Document>> {
    let path = spec
        .file
        .as_ref()
        .ok_or_else(|| Error::Config("file generator requires a `file` path".into()))?;
    let raw = std::fs::read(path)?;
    let mut docs = Vec::new();
    for line in raw.split(|&b| b == b'\n') {
        if line.is_empty() {
            continue;
        }
        let mut tokens = vec![BOS];
        tokens.extend(tokenize(line));
        tokens.push(EOS);
        docs.push(Document { tokens, pairs: Vec::new() });
    }
    if docs.is_empty() {
        return Err(Error::Config(format!("no documents in {}", path.display())));
    }
    Ok(docs)
}

/// A recall probe: context ending in `?key=`, with the expected value
/// tokens withheld. The binding sits exactly `distance` tokens before the
/// query marker.
#[derive(Clone, Debug)]
pub struct RecallProbe {
    pub context: Vec<u32>,
    pub answer: Vec<u32>,
}

/// Build a deterministic recall probe. The context is
/// `BOS, filler, &key=value;, filler(distance - span), ?key=` and the
/// answer is the value bytes.
pub fn recall_probe(
    spec: &CorpusSpec,
    distance: usize,
    lead_in: usize,
    probe_seed: u64,
) -> Result<RecallProbe> {
    let span = PlantedPair::pair_span_len(spec.key_len, spec.value_len);
    if distance < span {
        return Err(Error::InvalidArg(format!(
            "recall distance {distance} shorter than pair span {span}"
        )));
    }
    let chain = MarkovChain::from_seed(spec.seed);
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed ^ probe_seed.wrapping_mul(0x517c_c1b7));
    let key = random_letters(spec.key_len, &mut rng);
    let value = random_letters(spec.value_len, &mut rng);

    let mut bytes = Vec::new();
    bytes.extend(chain.fill(lead_in, &mut rng));
    bytes.push(PAIR_MARK);
    bytes.extend_from_slice(&key);
    bytes.push(ASSIGN);
    bytes.extend_from_slice(&value);
    bytes.push(END_MARK);
    // distance is measured pair marker -> query marker
    bytes.extend(chain.fill(distance - span, &mut rng));
    bytes.push(QUERY_MARK);
    bytes.extend_from_slice(&key);
    bytes.push(ASSIGN);

    let mut context = vec![BOS];
    context.extend(tokenize(&bytes));
    Ok(RecallProbe { context, answer: tokenize(&value) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn same_spec_and_seed_reproduce_corpora() {
        let spec = CorpusSpec { doc_len: 512, seed: 42, ..CorpusSpec::default() };
        let a = generate_tokens(&spec, 5).unwrap();
        let b = generate_tokens(&spec, 5).unwrap();
        assert_eq!(a, b);
        // prefix stability: doc i independent of n_docs
        let c = generate_tokens(&spec, 3).unwrap();
        assert_eq!(&a[..3], &c[..]);
    }

    #[test]
    fn kv_distance_zero_places_query_right_after_pair() {
        // distance equal to the span means the query marker directly follows
        // the end of the pair span; any causal LM sees both in-window.
        let spec = CorpusSpec { key_len: 3, value_len: 2, seed: 7, ..CorpusSpec::default() };
        let span = PlantedPair::pair_span_len(3, 2);
        let probe = recall_probe(&spec, span, 4, 1).unwrap();
        let bytes = detokenize(&probe.context);
        let s = String::from_utf8_lossy(&bytes);
        let amp = s.find('&').unwrap();
        let q = s.find('?').unwrap();
        assert_eq!(q - amp, span);
    }

    #[test]
    fn planted_value_recoverable_from_key_by_ngram_oracle() {
        // An n-gram oracle that looks the key up in the full document
        // predicts the value exactly; without the key it can only produce
        // the marginal distribution. That gap is the planted dependency.
        let spec = CorpusSpec {
            generator: GeneratorKind::KvRecall,
            doc_len: 1024,
            kv_pairs_per_doc: 4,
            dep_distance_min: 100,
            dep_distance_max: 700,
            seed: 11,
            ..CorpusSpec::default()
        };
        let docs = generate(&spec, 60).unwrap();
        let mut total = 0usize;
        let mut oracle_hits = 0usize;
        let mut value_counts = std::collections::HashMap::new();
        for doc in &docs {
            let bytes = detokenize(&doc.tokens);
            for pair in &doc.pairs {
                total += 1;
                *value_counts.entry(pair.value.clone()).or_insert(0usize) += 1;
                // oracle: find "&key=" anywhere, read the value that follows
                let mut needle = vec![PAIR_MARK];
                needle.extend_from_slice(&pair.key);
                needle.push(ASSIGN);
                if let Some(at) = find_sub(&bytes, &needle) {
                    let got = &bytes[at + needle.len()..at + needle.len() + pair.value.len()];
                    if got == pair.value.as_slice() {
                        oracle_hits += 1;
                    }
                }
            }
        }
        assert!(total >= 100, "expected many planted pairs, got {total}");
        let oracle_acc = oracle_hits as f64 / total as f64;
        // value-given-nothing: best constant guess
        let best_marginal = *value_counts.values().max().unwrap() as f64 / total as f64;
        assert!(oracle_acc > 0.95, "key lookup should recover the value: {oracle_acc}");
        assert!(
            best_marginal < 0.2,
            "values must be near-uniform without the key: {best_marginal}"
        );
    }

    #[test]
    fn long_range_pairs_leave_no_trace_within_short_window() {
        let spec = CorpusSpec {
            generator: GeneratorKind::KvRecall,
            doc_len: 2048,
            kv_pairs_per_doc: 3,
            dep_distance_min: 600,
            dep_distance_max: 1200,
            seed: 13,
            ..CorpusSpec::default()
        };
        let window = 512;
        let docs = generate(&spec, 20).unwrap();
        let mut checked = 0;
        for doc in &docs {
            let bytes = detokenize(&doc.tokens);
            for pair in &doc.pairs {
                let q = pair.query_pos - 1; // byte offset (tokens carry a BOS)
                let start = q.saturating_sub(window);
                let mut needle = vec![PAIR_MARK];
                needle.extend_from_slice(&pair.key);
                assert!(
                    find_sub(&bytes[start..q], &needle).is_none(),
                    "binding leaked into the last {window} tokens before its query"
                );
                checked += 1;
            }
        }
        assert!(checked > 10);
    }

    fn find_sub(haystack: &[u8], needle: &[u8]) -> Option<usize> {
        haystack.windows(needle.len()).position(|w| w == needle)
    }

    proptest! {
        #[test]
        fn tokenize_roundtrip(bytes in proptest::collection::vec(any::<u8>(), 0..512)) {
            prop_assert_eq!(detokenize(&tokenize(&bytes)), bytes);
        }
    }
}
