//! Deterministic synthetic model supplying per-token, per-layer, per-head
//! query/key/value vectors with controllable topic structure.
//!
//! Queries and keys are drawn as `(1 - sigma) * topic_centroid + sigma * noise`,
//! so tokens of the same topic cluster in key space by construction and a
//! decode-time query aimed at a topic lands near that topic's keys. Values are
//! pure seeded noise. Everything is a pure function of its arguments: the same
//! `(token, position, seed, dims)` always yields bit-identical vectors.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Default noise scale: large enough that retrieval is non-trivial, small
/// enough that topic clusters persist.
pub const DEFAULT_SIGMA: f32 = 0.25;

/// Number of fresh needle-topic probe tokens attached to a generated corpus.
pub const NEEDLE_QUERY_LEN: usize = 8;

/// Sentence length bounds (boundary token included) used by the corpus
/// generator.
pub const MIN_SENTENCE_LEN: usize = 20;
pub const MAX_SENTENCE_LEN: usize = 40;

// Domain-separation tags for deriving independent seeded streams.
const TAG_CENTROID: u64 = 0x6b65795f63656e74;
const TAG_NOISE: u64 = 0x746f6b5f6e6f6973;
const TAG_CORPUS: u64 = 0x636f727075735f67;
const TAG_READOUT: u64 = 0x726561646f75745f;

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Collapse a list of words into one stream seed. Each word goes through the
/// full avalanche before the next is folded in, so nearby (token, position)
/// tuples land on unrelated streams.
pub(crate) fn stream_seed(words: &[u64]) -> u64 {
    let mut state = 0x51ed_270b_a95e_41b5u64;
    for &w in words {
        state = mix64(state ^ w);
    }
    state
}

pub(crate) fn readout_seed(seed: u64, token_id: u32) -> u64 {
    stream_seed(&[seed, TAG_READOUT, u64::from(token_id)])
}

// ── Model dimensions ────────────────────────────────────────────────────────

/// Transformer geometry: layer count, head count, head dimension. Value
/// vectors share the head dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl ModelDims {
    pub fn new(layers: usize, heads: usize, head_dim: usize) -> Result<Self> {
        if layers < 1 || heads < 1 || head_dim < 1 {
            return Err(Error::Config(format!(
                "model dims must all be >= 1, got layers={layers} heads={heads} head_dim={head_dim}"
            )));
        }
        Ok(Self { layers, heads, head_dim })
    }

    /// Scalars per token per layer across all heads.
    pub fn layer_width(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Scalars per token across all layers and heads.
    pub fn token_width(&self) -> usize {
        self.layers * self.layer_width()
    }

    /// Offset of `(layer, head)` into a flat `[layers][heads][head_dim]` buffer.
    pub fn offset(&self, layer: usize, head: usize) -> usize {
        debug_assert!(layer < self.layers && head < self.heads);
        (layer * self.heads + head) * self.head_dim
    }
}

// ── Vocabulary ──────────────────────────────────────────────────────────────

/// Synthetic vocabulary: a set of boundary (sentence-terminator) token ids and
/// a topic label for every other token id.
#[derive(Debug, Clone)]
pub struct SyntheticVocab {
    vocab_size: u32,
    boundary_token_ids: BTreeSet<u32>,
    topic_count: u32,
    /// `topic_of[id]` is `None` for boundary tokens.
    topic_of: Vec<Option<u32>>,
    seed: u64,
}

impl SyntheticVocab {
    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn topic_count(&self) -> u32 {
        self.topic_count
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn boundary_token_ids(&self) -> &BTreeSet<u32> {
        &self.boundary_token_ids
    }

    pub fn is_boundary(&self, token_id: u32) -> bool {
        self.boundary_token_ids.contains(&token_id)
    }

    pub fn topic_of_token(&self, token_id: u32) -> Option<u32> {
        self.topic_of.get(token_id as usize).copied().flatten()
    }

    /// All token ids labelled with `topic`.
    pub fn tokens_of_topic(&self, topic: u32) -> Vec<u32> {
        (0..self.vocab_size).filter(|&id| self.topic_of[id as usize] == Some(topic)).collect()
    }
}

/// Build a vocabulary: `ceil(boundary_fraction * vocab_size)` boundary ids
/// (the lowest ids), remaining ids assigned round-robin across topics.
pub fn make_vocab(
    vocab_size: u32,
    topic_count: u32,
    boundary_fraction: f64,
    seed: u64,
) -> Result<SyntheticVocab> {
    if topic_count < 1 {
        return Err(Error::Config("topic_count must be >= 1".into()));
    }
    if vocab_size < topic_count + 1 {
        return Err(Error::Config(format!(
            "vocab_size must be >= topic_count + 1, got {vocab_size} vs {topic_count}"
        )));
    }
    if !(boundary_fraction > 0.0 && boundary_fraction < 0.5) {
        return Err(Error::Config(format!(
            "boundary_fraction must lie in (0, 0.5), got {boundary_fraction}"
        )));
    }
    let boundary_count = (boundary_fraction * f64::from(vocab_size)).ceil() as u32;
    let boundary_count = boundary_count.max(1);
    let topical = vocab_size - boundary_count;
    if topical < topic_count {
        return Err(Error::Config(format!(
            "vocab leaves {topical} topical tokens for {topic_count} topics; every topic needs one"
        )));
    }

    let boundary_token_ids: BTreeSet<u32> = (0..boundary_count).collect();
    let mut topic_of = vec![None; vocab_size as usize];
    for i in 0..topical {
        topic_of[(boundary_count + i) as usize] = Some(i % topic_count);
    }
    Ok(SyntheticVocab { vocab_size, boundary_token_ids, topic_count, topic_of, seed })
}

// ── Per-token Q/K/V ─────────────────────────────────────────────────────────

/// Query/key/value vectors for one token at one position, flat
/// `[layers][heads][head_dim]` layout per role.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenQkv {
    dims: ModelDims,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
}

impl TokenQkv {
    /// Assemble from flat `[layers][heads][head_dim]` buffers.
    pub fn from_parts(dims: ModelDims, q: Vec<f32>, k: Vec<f32>, v: Vec<f32>) -> Result<Self> {
        let w = dims.token_width();
        if q.len() != w || k.len() != w || v.len() != w {
            return Err(Error::Contract(format!(
                "expected {w} scalars per role, got q={} k={} v={}",
                q.len(),
                k.len(),
                v.len()
            )));
        }
        Ok(Self { dims, q, k, v })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn q(&self, layer: usize, head: usize) -> &[f32] {
        let o = self.dims.offset(layer, head);
        &self.q[o..o + self.dims.head_dim]
    }

    pub fn k(&self, layer: usize, head: usize) -> &[f32] {
        let o = self.dims.offset(layer, head);
        &self.k[o..o + self.dims.head_dim]
    }

    pub fn v(&self, layer: usize, head: usize) -> &[f32] {
        let o = self.dims.offset(layer, head);
        &self.v[o..o + self.dims.head_dim]
    }

    /// Flat query buffer across all layers and heads.
    pub fn q_flat(&self) -> &[f32] {
        &self.q
    }

    pub fn k_flat(&self) -> &[f32] {
        &self.k
    }

    pub fn v_flat(&self) -> &[f32] {
        &self.v
    }

    /// Keys of all heads at one layer, flat `[heads][head_dim]`.
    pub fn layer_keys(&self, layer: usize) -> &[f32] {
        let w = self.dims.layer_width();
        &self.k[layer * w..(layer + 1) * w]
    }

    /// Values of all heads at one layer, flat `[heads][head_dim]`.
    pub fn layer_values(&self, layer: usize) -> &[f32] {
        let w = self.dims.layer_width();
        &self.v[layer * w..(layer + 1) * w]
    }
}

// ── Generator ───────────────────────────────────────────────────────────────

/// Seeded Q/K/V source with precomputed topic centroids.
///
/// One centroid per `(topic, layer, head)` plus a dedicated boundary centroid;
/// when `topic_count + 1 <= head_dim` the centroids of each `(layer, head)`
/// are orthonormalized so cross-topic interference vanishes exactly.
#[derive(Debug, Clone)]
pub struct QkvGenerator {
    vocab: SyntheticVocab,
    dims: ModelDims,
    seed: u64,
    sigma: f32,
    /// `[layer][head][slot][dim]` flattened; slot `topic_count` is the
    /// boundary centroid.
    centroids: Vec<f32>,
}

impl QkvGenerator {
    pub fn new(vocab: &SyntheticVocab, dims: ModelDims, seed: u64, sigma: f32) -> Self {
        let slots = vocab.topic_count() as usize + 1;
        let d = dims.head_dim;
        let mut centroids = vec![0.0f32; dims.layers * dims.heads * slots * d];
        for layer in 0..dims.layers {
            for head in 0..dims.heads {
                let mut basis: Vec<Vec<f64>> = Vec::with_capacity(slots);
                for slot in 0..slots {
                    let s = stream_seed(&[
                        seed,
                        TAG_CENTROID,
                        slot as u64,
                        layer as u64,
                        head as u64,
                    ]);
                    let mut rng = ChaCha8Rng::seed_from_u64(s);
                    let mut v: Vec<f64> =
                        (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                    if slots <= d {
                        // Gram-Schmidt against the accepted slots so far.
                        for b in &basis {
                            let proj: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
                            for (x, c) in v.iter_mut().zip(b) {
                                *x -= proj * c;
                            }
                        }
                    }
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if norm > 1e-9 {
                        for x in &mut v {
                            *x /= norm;
                        }
                    }
                    basis.push(v);
                }
                for (slot, v) in basis.iter().enumerate() {
                    let base = ((layer * dims.heads + head) * slots + slot) * d;
                    for (j, x) in v.iter().enumerate() {
                        centroids[base + j] = *x as f32;
                    }
                }
            }
        }
        Self { vocab: vocab.clone(), dims, seed, sigma, centroids }
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn vocab(&self) -> &SyntheticVocab {
        &self.vocab
    }

    fn centroid(&self, slot: usize, layer: usize, head: usize) -> &[f32] {
        let slots = self.vocab.topic_count() as usize + 1;
        let d = self.dims.head_dim;
        let base = ((layer * self.dims.heads + head) * slots + slot) * d;
        &self.centroids[base..base + d]
    }

    /// Q/K/V for one token at one position.
    pub fn token_qkv(&self, token_id: u32, position: usize) -> Result<TokenQkv> {
        if token_id >= self.vocab.vocab_size() {
            return Err(Error::Input(format!(
                "token id {token_id} out of range for vocab of {}",
                self.vocab.vocab_size()
            )));
        }
        let slot = match self.vocab.topic_of_token(token_id) {
            Some(topic) => topic as usize,
            None => self.vocab.topic_count() as usize, // boundary centroid
        };
        let d = self.dims.head_dim;
        let width = self.dims.token_width();
        let mut q = vec![0.0f32; width];
        let mut k = vec![0.0f32; width];
        let mut v = vec![0.0f32; width];
        let keep = 1.0 - self.sigma;
        for layer in 0..self.dims.layers {
            for head in 0..self.dims.heads {
                let s = stream_seed(&[
                    self.seed,
                    TAG_NOISE,
                    u64::from(token_id),
                    position as u64,
                    layer as u64,
                    head as u64,
                ]);
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let c = self.centroid(slot, layer, head);
                let o = self.dims.offset(layer, head);
                for j in 0..d {
                    let n: f32 = rng.sample(StandardNormal);
                    q[o + j] = keep * c[j] + self.sigma * n;
                }
                for j in 0..d {
                    let n: f32 = rng.sample(StandardNormal);
                    k[o + j] = keep * c[j] + self.sigma * n;
                }
                for j in 0..d {
                    v[o + j] = rng.sample(StandardNormal);
                }
            }
        }
        Ok(TokenQkv { dims: self.dims, q, k, v })
    }

    /// Materialize Q/K/V for a whole token sequence.
    pub fn prompt_qkv(&self, tokens: &[u32]) -> Result<PromptQkv> {
        let per_token = tokens
            .iter()
            .enumerate()
            .map(|(pos, &id)| self.token_qkv(id, pos))
            .collect::<Result<Vec<_>>>()?;
        Ok(PromptQkv { dims: self.dims, tokens: per_token })
    }
}

/// Convenience wrapper building a throwaway generator; prefer
/// [`QkvGenerator`] when generating many tokens.
pub fn token_qkv(
    vocab: &SyntheticVocab,
    dims: ModelDims,
    token_id: u32,
    position: usize,
    seed: u64,
) -> Result<TokenQkv> {
    QkvGenerator::new(vocab, dims, seed, DEFAULT_SIGMA).token_qkv(token_id, position)
}

/// Q/K/V for every token of a prompt.
#[derive(Debug, Clone)]
pub struct PromptQkv {
    dims: ModelDims,
    tokens: Vec<TokenQkv>,
}

impl PromptQkv {
    /// Assemble from per-token Q/K/V (all tokens must share `dims`).
    pub fn from_tokens(dims: ModelDims, tokens: Vec<TokenQkv>) -> Result<Self> {
        if tokens.iter().any(|t| t.dims != dims) {
            return Err(Error::Contract("token dims disagree with prompt dims".into()));
        }
        Ok(Self { dims, tokens })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, index: usize) -> &TokenQkv {
        &self.tokens[index]
    }

    pub fn tokens(&self) -> &[TokenQkv] {
        &self.tokens
    }
}

// ── Corpus ──────────────────────────────────────────────────────────────────

/// Topic-labelled token sequence, optionally with an embedded needle sentence
/// and fresh probe tokens of the needle topic.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub tokens: Vec<u32>,
    /// Parallel to `tokens`; `None` marks boundary tokens.
    pub topic_labels: Vec<Option<u32>>,
    /// Half-open token-index range of the needle sentence body (its
    /// terminating boundary token sits at `end`).
    pub needle_span: Option<(usize, usize)>,
    pub needle_query_tokens: Option<Vec<u32>>,
}

impl SyntheticCorpus {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Line-oriented export: optional `#needle <start> <end>` header, then one
    /// token id per line.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        if let Some((start, end)) = self.needle_span {
            writeln!(w, "#needle {start} {end}")?;
        }
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    /// Inverse of [`write_to`](Self::write_to). Topic labels are rebuilt from
    /// `vocab`; probe tokens are not part of the format and come back empty.
    pub fn read_from<R: BufRead>(r: R, vocab: &SyntheticVocab) -> Result<Self> {
        let mut needle_span = None;
        let mut tokens = Vec::new();
        for line in r.lines() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("#needle") {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                if parts.len() != 2 {
                    return Err(Error::Input(format!("malformed needle header: {line}")));
                }
                let start = parts[0]
                    .parse::<usize>()
                    .map_err(|e| Error::Input(format!("bad needle start: {e}")))?;
                let end = parts[1]
                    .parse::<usize>()
                    .map_err(|e| Error::Input(format!("bad needle end: {e}")))?;
                needle_span = Some((start, end));
                continue;
            }
            let id = line
                .parse::<u32>()
                .map_err(|e| Error::Input(format!("bad token id line {line:?}: {e}")))?;
            if id >= vocab.vocab_size() {
                return Err(Error::Input(format!("token id {id} out of vocab range")));
            }
            tokens.push(id);
        }
        let topic_labels = tokens.iter().map(|&id| vocab.topic_of_token(id)).collect();
        Ok(Self { tokens, topic_labels, needle_span, needle_query_tokens: None })
    }
}

/// Generate a needle-in-a-haystack corpus of exactly `haystack_len` tokens:
/// topic-coherent haystack sentences of 20-40 tokens (boundary-terminated,
/// topics other than `needle_topic`), one needle sentence of `needle_len`
/// needle-topic tokens inserted at the sentence boundary closest to
/// `needle_position_fraction * len`, and fresh needle-topic probe tokens.
pub fn make_niah_corpus(
    vocab: &SyntheticVocab,
    haystack_len: usize,
    needle_topic: u32,
    needle_len: usize,
    needle_position_fraction: f64,
    seed: u64,
) -> Result<SyntheticCorpus> {
    if needle_topic >= vocab.topic_count() {
        return Err(Error::Input(format!(
            "needle topic {needle_topic} out of range for {} topics",
            vocab.topic_count()
        )));
    }
    if vocab.topic_count() < 2 {
        return Err(Error::Input("need at least 2 topics to build a haystack".into()));
    }
    if needle_len == 0 || needle_len >= haystack_len {
        return Err(Error::Input(format!(
            "needle_len must satisfy 0 < needle_len < haystack_len, got {needle_len} vs {haystack_len}"
        )));
    }
    if !(0.0..=1.0).contains(&needle_position_fraction) {
        return Err(Error::Input(format!(
            "needle position fraction must lie in [0, 1], got {needle_position_fraction}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[seed, TAG_CORPUS]));
    let boundary_ids: Vec<u32> = vocab.boundary_token_ids().iter().copied().collect();
    let mut topic_pools: Vec<Vec<u32>> =
        (0..vocab.topic_count()).map(|t| vocab.tokens_of_topic(t)).collect();
    for (t, pool) in topic_pools.iter().enumerate() {
        if pool.is_empty() {
            return Err(Error::Input(format!("topic {t} has no tokens in the vocabulary")));
        }
    }
    let _ = &mut topic_pools;

    let needle_total = needle_len + 1; // body plus terminating boundary
    let budget = haystack_len - needle_total.min(haystack_len);

    // Haystack sentences: (tokens, topic), whole sentences then an exact cut.
    let mut sentences: Vec<Vec<u32>> = Vec::new();
    let mut cum = 0usize;
    while cum < budget {
        let total_len = rng.gen_range(MIN_SENTENCE_LEN..=MAX_SENTENCE_LEN);
        let mut topic = rng.gen_range(0..vocab.topic_count());
        if topic == needle_topic {
            topic = (topic + 1) % vocab.topic_count();
        }
        let pool = &topic_pools[topic as usize];
        let mut sent: Vec<u32> =
            (0..total_len - 1).map(|_| pool[rng.gen_range(0..pool.len())]).collect();
        sent.push(boundary_ids[rng.gen_range(0..boundary_ids.len())]);
        cum += sent.len();
        sentences.push(sent);
    }
    if cum > budget {
        let excess = cum - budget;
        let last = sentences.last_mut().expect("cum > 0 implies a sentence");
        let new_len = last.len() - excess;
        if new_len == 0 {
            sentences.pop();
        } else {
            last.truncate(new_len);
            // Keep the partition clean: a cut sentence still ends at a boundary.
            *last.last_mut().unwrap() = boundary_ids[0];
        }
    }

    // Insertion point: sentence boundary closest to the target offset.
    let target = needle_position_fraction * budget as f64;
    let mut offsets = Vec::with_capacity(sentences.len() + 1);
    let mut acc = 0usize;
    offsets.push(0usize);
    for s in &sentences {
        acc += s.len();
        offsets.push(acc);
    }
    let mut best = 0usize;
    let mut best_dist = f64::INFINITY;
    for (i, &off) in offsets.iter().enumerate() {
        let dist = (off as f64 - target).abs();
        if dist < best_dist {
            best_dist = dist;
            best = i;
        }
    }
    let insert_at = offsets[best];

    let needle_pool = &topic_pools[needle_topic as usize];
    let mut needle: Vec<u32> =
        (0..needle_len).map(|_| needle_pool[rng.gen_range(0..needle_pool.len())]).collect();
    needle.push(boundary_ids[rng.gen_range(0..boundary_ids.len())]);

    let mut tokens = Vec::with_capacity(haystack_len);
    for s in sentences.iter().take(best) {
        tokens.extend_from_slice(s);
    }
    tokens.extend_from_slice(&needle);
    for s in sentences.iter().skip(best) {
        tokens.extend_from_slice(s);
    }
    debug_assert_eq!(tokens.len(), budget + needle_total.min(haystack_len));

    let needle_span = (insert_at, insert_at + needle_len);
    let needle_query_tokens: Vec<u32> = (0..NEEDLE_QUERY_LEN)
        .map(|_| needle_pool[rng.gen_range(0..needle_pool.len())])
        .collect();
    let topic_labels = tokens.iter().map(|&id| vocab.topic_of_token(id)).collect();

    Ok(SyntheticCorpus {
        tokens,
        topic_labels,
        needle_span: Some(needle_span),
        needle_query_tokens: Some(needle_query_tokens),
    })
}

// ── Tests ───────────────────────────────────────────────────────────────────
