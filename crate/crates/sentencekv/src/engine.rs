//! The end-to-end sentence-level caching engine: prefill (segment, score,
//! retain, offload) and the decode loop (query aggregation, similarity
//! ranking, budgeted retrieval, restricted attention, boundary reset).

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attention::{attend, AttentionOutput};
use crate::error::{Error, Result};
use crate::model::{
    readout_seed, ModelDims, QkvGenerator, SyntheticCorpus, SyntheticVocab, TokenQkv,
    DEFAULT_SIGMA,
};
use crate::segment::{segment, SegmentationConfig};
use crate::store::{build_store, SentenceBucket, TieredKvStore, TransferLedger};

/// How the decode-time retrieval query is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryStrategy {
    /// Mean of the query vectors accumulated for the in-progress sentence.
    MeanSentence,
    /// The newest token's query alone (ablation); the sentence cache still
    /// accumulates for reset bookkeeping.
    CurrentToken,
}

/// Reduction of per-head similarity scores into one bucket score per layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimilarityAggregation {
    SumOverHeads,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub token_budget: usize,
    pub keep_factor: f64,
    pub window_len: usize,
    pub query_strategy: QueryStrategy,
    pub similarity: SimilarityAggregation,
    pub segmentation: SegmentationConfig,
    pub dims: ModelDims,
    pub seed: u64,
    pub sigma: f32,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            token_budget: 128,
            keep_factor: 3.0,
            window_len: crate::attention::DEFAULT_OBSERVATION_WINDOW,
            query_strategy: QueryStrategy::MeanSentence,
            similarity: SimilarityAggregation::SumOverHeads,
            segmentation: SegmentationConfig::default(),
            dims: ModelDims::new(2, 4, 16).expect("static dims"),
            seed: 0,
            sigma: DEFAULT_SIGMA,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.token_budget < 1 {
            return Err(Error::Config("token budget must be >= 1".into()));
        }
        if !(self.keep_factor >= 1.0 && self.keep_factor.is_finite()) {
            return Err(Error::Config(format!(
                "keep factor must be a finite value >= 1, got {}",
                self.keep_factor
            )));
        }
        if self.window_len < 1 {
            return Err(Error::Config("observation window must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.sigma) {
            return Err(Error::Config(format!("sigma must lie in [0, 1], got {}", self.sigma)));
        }
        Ok(())
    }
}

/// Where each decode step's input token comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuerySource {
    /// Feed back the previously emitted token (the last prompt token on the
    /// very first step).
    SelfFeed,
    /// Inject a specific token id (probing, teacher forcing).
    Forced(u32),
}

// ── Sentence query cache ────────────────────────────────────────────────────

/// Accumulates the query vectors of the in-progress generated sentence; it is
/// cleared exactly when a boundary token is emitted.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceQueryCache {
    dims: ModelDims,
    queries: Vec<Vec<f32>>,
}

impl SentenceQueryCache {
    pub fn new(dims: ModelDims) -> Self {
        Self { dims, queries: Vec::new() }
    }

    pub fn push(&mut self, query_flat: &[f32]) {
        debug_assert_eq!(query_flat.len(), self.dims.token_width());
        self.queries.push(query_flat.to_vec());
    }

    pub fn reset(&mut self) {
        self.queries.clear();
    }

    pub fn token_count(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn queries(&self) -> &[Vec<f32>] {
        &self.queries
    }
}

/// Arithmetic mean of the cached queries per `(layer, head)`, flat
/// `[layers][heads][head_dim]`.
pub fn mean_query(cache: &SentenceQueryCache) -> Result<Vec<f32>> {
    if cache.is_empty() {
        return Err(Error::Contract("mean query over an empty sentence cache".into()));
    }
    let width = cache.dims.token_width();
    let mut acc = vec![0.0f64; width];
    for q in &cache.queries {
        for (a, x) in acc.iter_mut().zip(q) {
            *a += f64::from(*x);
        }
    }
    let n = cache.queries.len() as f64;
    Ok(acc.iter().map(|a| (*a / n) as f32).collect())
}

// ── Ranking ─────────────────────────────────────────────────────────────────

/// Rank rankable buckets at one layer by descending similarity
/// `sum_h q_bar[h] . mean_key[h]`, ties toward the lower bucket id.
pub fn rank_buckets(
    query_flat: &[f32],
    dims: ModelDims,
    buckets: &[SentenceBucket],
    layer: usize,
) -> Result<Vec<usize>> {
    let d = dims.head_dim;
    let base = layer * dims.layer_width();
    let mut scored: Vec<(usize, f64)> = Vec::new();
    for (id, bucket) in buckets.iter().enumerate() {
        let Some(mean_key) = bucket.mean_keys[layer].as_ref() else {
            continue;
        };
        let mut score = 0.0f64;
        for head in 0..dims.heads {
            let q = &query_flat[base + head * d..base + (head + 1) * d];
            let k = &mean_key[head * d..(head + 1) * d];
            for j in 0..d {
                score += f64::from(q[j]) * f64::from(k[j]);
            }
        }
        scored.push((id, score));
    }
    if scored.is_empty() {
        return Err(Error::NoRankableBucket { layer });
    }
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    Ok(scored.into_iter().map(|(id, _)| id).collect())
}

// ── Trace ───────────────────────────────────────────────────────────────────

/// Which prompt tokens were resident at one layer for one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HotSnapshot {
    /// Every prompt token (full-cache policies).
    AllPrompt,
    Tokens(BTreeSet<usize>),
}

impl HotSnapshot {
    pub fn contains(&self, token: usize, prompt_len: usize) -> bool {
        match self {
            Self::AllPrompt => token < prompt_len,
            Self::Tokens(set) => set.contains(&token),
        }
    }

    pub fn len(&self, prompt_len: usize) -> usize {
        match self {
            Self::AllPrompt => prompt_len,
            Self::Tokens(set) => set.len(),
        }
    }

    pub fn is_empty(&self, prompt_len: usize) -> bool {
        self.len(prompt_len) == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub input_token: u32,
    pub emitted_token: u32,
    /// Per layer: bucket (or page) ranking used this step; empty for policies
    /// without ranking.
    pub rankings: Vec<Vec<usize>>,
    /// Per layer: resident prompt tokens after retrieval.
    pub hot: Vec<HotSnapshot>,
    /// Flat `[layers][heads][head_dim]` attention outputs.
    pub output: Vec<f32>,
    /// Per layer: number of positions each head attended over.
    pub attended: Vec<usize>,
    /// Tokens onloaded this step, summed across layers.
    pub onload_tokens: u64,
    /// Sentence-cache size after the step (0 for cache-less policies).
    pub cache_len: usize,
}

/// Everything observable about one decode session.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeTrace {
    pub policy: String,
    pub dims: ModelDims,
    pub prompt_len: usize,
    pub window_len: usize,
    pub token_budget: usize,
    pub keep_factor: f64,
    pub seed: u64,
    /// Per layer: prompt tokens that survived prefill (every pre-window token
    /// for policies that never discard).
    pub retained_per_layer: Vec<Vec<usize>>,
    /// Per layer: number of rankable retrieval units (buckets or pages).
    pub rankable_units: Vec<usize>,
    pub steps: Vec<TraceStep>,
    pub ledger: TransferLedger,
}

// ── Emission ────────────────────────────────────────────────────────────────

/// Seeded per-token readout vectors of length `heads * head_dim`.
pub(crate) fn make_readout(vocab: &SyntheticVocab, dims: ModelDims, seed: u64) -> Vec<Vec<f32>> {
    let width = dims.layer_width();
    (0..vocab.vocab_size())
        .map(|id| {
            let mut rng = ChaCha8Rng::seed_from_u64(readout_seed(seed, id));
            (0..width).map(|_| StandardNormal.sample(&mut rng)).collect()
        })
        .collect()
}

/// Greedy emission: argmax over token ids of `readout[id] . layer_avg`, ties
/// toward the lower id.
pub(crate) fn emit_token(readout: &[Vec<f32>], layer_avg: &[f32]) -> u32 {
    let mut best = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    for (id, r) in readout.iter().enumerate() {
        let score: f64 =
            r.iter().zip(layer_avg).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum();
        if score > best_score {
            best_score = score;
            best = id;
        }
    }
    best as u32
}

// ── Engine ──────────────────────────────────────────────────────────────────

/// Result of one decode step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub input_token: u32,
    pub emitted_token: u32,
    pub output: AttentionOutput,
}

/// One engine instance is one decode session: mutation is single-threaded,
/// while independent sessions (their state is fully owned) can run on any
/// number of threads.
pub struct SentenceKvEngine {
    config: EngineConfig,
    vocab: SyntheticVocab,
    gen: QkvGenerator,
    buckets: Vec<SentenceBucket>,
    store: TieredKvStore,
    readout: Vec<Vec<f32>>,
    cache: SentenceQueryCache,
    generated: Vec<TokenQkv>,
    prompt_len: usize,
    last_prompt_token: u32,
    last_emitted: Option<u32>,
    steps: Vec<TraceStep>,
    rankable_units: Vec<usize>,
}

impl SentenceKvEngine {
    /// Prefill: segment the corpus, score importance against the observation
    /// window, retain the global top `floor(r * tau)` tokens per layer into
    /// the cold store with per-bucket mean keys, and pin the window hot.
    pub fn prefill(
        vocab: &SyntheticVocab,
        corpus: &SyntheticCorpus,
        config: &EngineConfig,
    ) -> Result<Self> {
        config.validate()?;
        if corpus.len() <= config.window_len {
            return Err(Error::Input(format!(
                "corpus of {} tokens is shorter than window + 1 ({})",
                corpus.len(),
                config.window_len + 1
            )));
        }
        let spans = segment(&corpus.tokens, vocab, &config.segmentation)?;
        let gen = QkvGenerator::new(vocab, config.dims, config.seed, config.sigma);
        let prompt = gen.prompt_qkv(&corpus.tokens)?;
        let importance = crate::attention::score_importance(&prompt, config.window_len)?;
        let (buckets, store) = build_store(
            &spans,
            &prompt,
            &importance,
            config.token_budget,
            config.keep_factor,
            config.window_len,
        )?;
        let readout = make_readout(vocab, config.dims, config.seed);
        let rankable_units = (0..config.dims.layers)
            .map(|l| buckets.iter().filter(|b| b.rankable_at(l)).count())
            .collect();
        let last_prompt_token = *corpus.tokens.last().expect("non-empty corpus");
        Ok(Self {
            config: config.clone(),
            vocab: vocab.clone(),
            gen,
            buckets,
            store,
            readout,
            cache: SentenceQueryCache::new(config.dims),
            generated: Vec::new(),
            prompt_len: corpus.len(),
            last_prompt_token,
            last_emitted: None,
            steps: Vec::new(),
            rankable_units,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn buckets(&self) -> &[SentenceBucket] {
        &self.buckets
    }

    pub fn store(&self) -> &TieredKvStore {
        &self.store
    }

    pub fn query_cache(&self) -> &SentenceQueryCache {
        &self.cache
    }

    pub fn generated_count(&self) -> usize {
        self.generated.len()
    }

    fn resolve_input(&self, source: QuerySource) -> Result<u32> {
        let id = match source {
            QuerySource::Forced(id) => id,
            QuerySource::SelfFeed => self.last_emitted.unwrap_or(self.last_prompt_token),
        };
        if id >= self.vocab.vocab_size() {
            return Err(Error::Input(format!("token id {id} out of vocabulary range")));
        }
        Ok(id)
    }

    /// One decode step: generate the input token's Q/K/V, extend the sentence
    /// cache, rank buckets per layer with the strategy's retrieval query,
    /// retrieve into the hot tier, attend over retrieved + window + generated
    /// tokens, emit greedily, and reset the cache on a boundary emission.
    pub fn decode_step(&mut self, source: QuerySource) -> Result<StepOutcome> {
        let input = self.resolve_input(source)?;
        let dims = self.config.dims;
        let position = self.prompt_len + self.generated.len();
        let qkv = self.gen.token_qkv(input, position)?;
        self.cache.push(qkv.q_flat());

        let retrieval_query: Vec<f32> = match self.config.query_strategy {
            QueryStrategy::MeanSentence => mean_query(&self.cache)?,
            QueryStrategy::CurrentToken => qkv.q_flat().to_vec(),
        };
        let SimilarityAggregation::SumOverHeads = self.config.similarity;
        let rankings: Vec<Vec<usize>> = (0..dims.layers)
            .map(|layer| rank_buckets(&retrieval_query, dims, &self.buckets, layer))
            .collect::<Result<_>>()?;
        self.store.retrieve_step(&self.buckets, &rankings)?;

        let d = dims.head_dim;
        let scale = 1.0 / (d as f32).sqrt();
        let mut out = vec![0.0f32; dims.token_width()];
        let mut attended = Vec::with_capacity(dims.layers);
        for layer in 0..dims.layers {
            let hot = self.store.hot_kv(layer);
            let window = self.store.window_kv(layer);
            attended.push(hot.len() + window.len() + self.generated.len());
            for head in 0..dims.heads {
                let hd = head * d..(head + 1) * d;
                let mut keys: Vec<&[f32]> = Vec::with_capacity(attended[layer]);
                let mut values: Vec<&[f32]> = Vec::with_capacity(attended[layer]);
                for (_, k, v) in &hot {
                    keys.push(&k[hd.clone()]);
                    values.push(&v[hd.clone()]);
                }
                for (_, k, v) in window {
                    keys.push(&k[hd.clone()]);
                    values.push(&v[hd.clone()]);
                }
                for t in &self.generated {
                    keys.push(t.k(layer, head));
                    values.push(t.v(layer, head));
                }
                let (o, _) = attend(qkv.q(layer, head), &keys, &values, scale)?;
                let off = dims.offset(layer, head);
                out[off..off + d].copy_from_slice(&o);
            }
        }
        let output = AttentionOutput::new(dims, out, None);
        let emitted = emit_token(&self.readout, &output.layer_averaged());

        if self.vocab.is_boundary(emitted) {
            self.cache.reset();
        }
        self.generated.push(qkv);
        self.last_emitted = Some(emitted);

        let hot_snapshots: Vec<HotSnapshot> = (0..dims.layers)
            .map(|l| HotSnapshot::Tokens(self.store.hot_set(l).clone()))
            .collect();
        let onload_tokens =
            self.store.ledger().onload_tokens_per_step().last().copied().unwrap_or(0);
        self.steps.push(TraceStep {
            input_token: input,
            emitted_token: emitted,
            rankings,
            hot: hot_snapshots,
            output: output.output_flat().to_vec(),
            attended,
            onload_tokens,
            cache_len: self.cache.token_count(),
        });
        Ok(StepOutcome { input_token: input, emitted_token: emitted, output })
    }

    /// Run `steps` self-fed decode steps and return the trace.
    pub fn run_decode(&mut self, steps: usize) -> Result<DecodeTrace> {
        if steps < 1 {
            return Err(Error::Input("run_decode requires steps >= 1".into()));
        }
        for _ in 0..steps {
            self.decode_step(QuerySource::SelfFeed)?;
        }
        Ok(self.trace_snapshot())
    }

    /// Run one decode step per source and return the trace.
    pub fn run_decode_with(&mut self, sources: &[QuerySource]) -> Result<DecodeTrace> {
        if sources.is_empty() {
            return Err(Error::Input("run_decode requires steps >= 1".into()));
        }
        for &s in sources {
            self.decode_step(s)?;
        }
        Ok(self.trace_snapshot())
    }

    pub fn trace_snapshot(&self) -> DecodeTrace {
        DecodeTrace {
            policy: "sentencekv".into(),
            dims: self.config.dims,
            prompt_len: self.prompt_len,
            window_len: self.config.window_len,
            token_budget: self.config.token_budget,
            keep_factor: self.config.keep_factor,
            seed: self.config.seed,
            retained_per_layer: (0..self.config.dims.layers)
                .map(|l| self.store.cold_indices(l))
                .collect(),
            rankable_units: self.rankable_units.clone(),
            steps: self.steps.clone(),
            ledger: self.store.ledger().clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_niah_corpus, make_vocab};
    use crate::segment::SegmentationMode;

    fn small_world(seed: u64) -> (SyntheticVocab, SyntheticCorpus, EngineConfig) {
        let vocab = make_vocab(64, 4, 0.05, seed).unwrap();
        let corpus = make_niah_corpus(&vocab, 220, 0, 12, 0.5, seed).unwrap();
        let config = EngineConfig {
            token_budget: 24,
            keep_factor: 2.0,
            window_len: 8,
            dims: ModelDims::new(2, 2, 8).unwrap(),
            seed,
            ..Default::default()
        };
        (vocab, corpus, config)
    }

    #[test]
    fn default_config_matches_standard_settings() {
        let c = EngineConfig::default();
        assert_eq!(c.token_budget, 128);
        assert_eq!(c.keep_factor, 3.0);
        assert_eq!(c.window_len, 32);
        assert_eq!(c.query_strategy, QueryStrategy::MeanSentence);
    }

    #[test]
    fn prefill_is_bitwise_deterministic() {
        let (vocab, corpus, config) = small_world(7);
        let a = SentenceKvEngine::prefill(&vocab, &corpus, &config).unwrap();
        let b = SentenceKvEngine::prefill(&vocab, &corpus, &config).unwrap();
        for (x, y) in a.buckets().iter().zip(b.buckets()) {
            assert_eq!(x.mean_keys, y.mean_keys);
            assert_eq!(x.retained, y.retained);
        }
    }

    #[test]
    fn segmentation_mode_does_not_change_retained_sets() {
        let (vocab, corpus, config) = small_world(9);
        let mut chunked = config.clone();
        chunked.segmentation.mode = SegmentationMode::EqualChunks { chunk_size: 7 };
        let a = SentenceKvEngine::prefill(&vocab, &corpus, &config).unwrap();
        let b = SentenceKvEngine::prefill(&vocab, &corpus, &chunked).unwrap();
        for layer in 0..2 {
            assert_eq!(a.store().cold_indices(layer), b.store().cold_indices(layer));
        }
        assert_ne!(a.buckets().len(), b.buckets().len());
    }

    #[test]
    fn saturating_keep_factor_retains_every_candidate() {
        let (vocab, corpus, mut config) = small_world(11);
        config.token_budget = corpus.len();
        config.keep_factor = 1.0;
        let engine = SentenceKvEngine::prefill(&vocab, &corpus, &config).unwrap();
        let expect: Vec<usize> = (0..corpus.len() - config.window_len).collect();
        for layer in 0..2 {
            assert_eq!(engine.store().cold_indices(layer), expect);
        }
    }

    #[test]
    fn prefill_rejects_short_corpus() {
        let (vocab, corpus, mut config) = small_world(13);
        config.window_len = corpus.len();
        assert!(SentenceKvEngine::prefill(&vocab, &corpus, &config).is_err());
    }

    #[test]
    fn mean_query_of_singleton_is_the_query() {
        let dims = ModelDims::new(1, 1, 4).unwrap();
        let mut cache = SentenceQueryCache::new(dims);
        cache.push(&[1.0, -2.0, 3.0, 0.5]);
        assert_eq!(mean_query(&cache).unwrap(), vec![1.0, -2.0, 3.0, 0.5]);
    }

    #[test]
    fn mean_query_of_opposites_is_zero() {
        let dims = ModelDims::new(1, 1, 3).unwrap();
        let mut cache = SentenceQueryCache::new(dims);
        cache.push(&[1.0, -2.0, 0.25]);
        cache.push(&[-1.0, 2.0, -0.25]);
        assert_eq!(mean_query(&cache).unwrap(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn mean_query_matches_scalar_oracle() {
        use rand::{Rng, SeedableRng};
        let dims = ModelDims::new(1, 1, 8).unwrap();
        let mut cache = SentenceQueryCache::new(dims);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let qs: Vec<Vec<f32>> =
            (0..5).map(|_| (0..8).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).collect();
        for q in &qs {
            cache.push(q);
        }
        let got = mean_query(&cache).unwrap();
        for j in 0..8 {
            let expect: f64 = qs.iter().map(|q| f64::from(q[j])).sum::<f64>() / 5.0;
            assert!((f64::from(got[j]) - expect).abs() < 1e-7);
        }
    }

    #[test]
    fn mean_query_rejects_empty_cache() {
        let cache = SentenceQueryCache::new(ModelDims::new(1, 1, 4).unwrap());
        assert!(matches!(mean_query(&cache), Err(Error::Contract(_))));
    }

    fn bucket_with_mean(id: usize, mean: Vec<f32>) -> SentenceBucket {
        SentenceBucket {
            span: crate::segment::SentenceSpan { bucket_id: id, start: id * 4, end: id * 4 + 4 },
            retained: vec![vec![id * 4]],
            mean_keys: vec![Some(mean)],
            retained_alpha: vec![vec![(id * 4, 1.0)]],
        }
    }

    #[test]
    fn aligned_bucket_ranks_first() {
        let dims = ModelDims::new(1, 2, 2).unwrap();
        let buckets = vec![
            bucket_with_mean(0, vec![0.0, 1.0, 0.0, 1.0]),
            bucket_with_mean(1, vec![1.0, 0.0, 1.0, 0.0]),
            bucket_with_mean(2, vec![0.0, -1.0, 0.0, -1.0]),
        ];
        let q = vec![1.0, 0.0, 1.0, 0.0];
        let order = rank_buckets(&q, dims, &buckets, 0).unwrap();
        assert_eq!(order[0], 1);
    }

    #[test]
    fn zero_query_ranks_by_bucket_id() {
        let dims = ModelDims::new(1, 1, 2).unwrap();
        let buckets = vec![
            bucket_with_mean(0, vec![0.3, -0.1]),
            bucket_with_mean(1, vec![-0.4, 0.9]),
            bucket_with_mean(2, vec![0.2, 0.2]),
        ];
        let order = rank_buckets(&[0.0, 0.0], dims, &buckets, 0).unwrap();
        assert_eq!(order, vec![0, 1, 2]);
    }

    #[test]
    fn ranking_matches_brute_force_oracle() {
        use rand::{Rng, SeedableRng};
        let dims = ModelDims::new(1, 2, 8).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let buckets: Vec<SentenceBucket> = (0..10)
            .map(|i| {
                bucket_with_mean(i, (0..16).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            })
            .collect();
        let q: Vec<f32> = (0..16).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let got = rank_buckets(&q, dims, &buckets, 0).unwrap();

        // Independent score-and-sort.
        let mut scored: Vec<(usize, f64)> = buckets
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let mk = b.mean_keys[0].as_ref().unwrap();
                let s: f64 =
                    mk.iter().zip(&q).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum();
                (i, s)
            })
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        let expect: Vec<usize> = scored.into_iter().map(|(i, _)| i).collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn no_rankable_bucket_is_signalled_distinctly() {
        let dims = ModelDims::new(1, 1, 2).unwrap();
        let mut b = bucket_with_mean(0, vec![0.1, 0.2]);
        b.mean_keys[0] = None;
        let err = rank_buckets(&[1.0, 0.0], dims, &[b], 0).unwrap_err();
        assert!(matches!(err, Error::NoRankableBucket { layer: 0 }));
    }

    #[test]
    fn first_step_mean_equals_current_token_strategy() {
        let (vocab, corpus, config) = small_world(15);
        let mut current = config.clone();
        current.query_strategy = QueryStrategy::CurrentToken;
        let mut a = SentenceKvEngine::prefill(&vocab, &corpus, &config).unwrap();
        let mut b = SentenceKvEngine::prefill(&vocab, &corpus, &current).unwrap();
        let oa = a.decode_step(QuerySource::Forced(10)).unwrap();
        let ob = b.decode_step(QuerySource::Forced(10)).unwrap();
        assert_eq!(oa.output.output_flat(), ob.output.output_flat());
        assert_eq!(oa.emitted_token, ob.emitted_token);
    }

    #[test]
    fn boundary_emission_resets_cache() {
        let (vocab, corpus, config) = small_world(17);
        let mut engine = SentenceKvEngine::prefill(&vocab, &corpus, &config).unwrap();
        let mut resets = 0usize;
        let mut boundary_emissions = 0usize;
        let mut prev_was_boundary = false;
        for step in 0..40 {
            let out = engine.decode_step(QuerySource::Forced(step % 60)).unwrap();
            let row = engine.steps.last().unwrap();
            if prev_was_boundary {
                // The step after a reset holds exactly its own query.
                assert!(row.cache_len <= 1);
                if !vocab.is_boundary(out.emitted_token) {
                    assert_eq!(row.cache_len, 1);
                }
            }
            if vocab.is_boundary(out.emitted_token) {
                boundary_emissions += 1;
                assert_eq!(row.cache_len, 0);
                resets += 1;
            } else {
                assert!(row.cache_len > 0);
            }
            prev_was_boundary = vocab.is_boundary(out.emitted_token);
        }
        assert_eq!(resets, boundary_emissions);
    }

    #[test]
    fn run_decode_trace_lengths_match() {
        let (vocab, corpus, config) = small_world(19);
        let mut engine = SentenceKvEngine::prefill(&vocab, &corpus, &config).unwrap();
        let trace = engine.run_decode(1).unwrap();
        assert_eq!(trace.steps.len(), 1);
        assert_eq!(trace.ledger.onload_tokens_per_step().len(), 1);
        assert!(engine.run_decode(0).is_err());
    }

    #[test]
    fn run_decode_is_deterministic() {
        let (vocab, corpus, config) = small_world(23);
        let mut a = SentenceKvEngine::prefill(&vocab, &corpus, &config).unwrap();
        let mut b = SentenceKvEngine::prefill(&vocab, &corpus, &config).unwrap();
        let ta = a.run_decode(12).unwrap();
        let tb = b.run_decode(12).unwrap();
        assert_eq!(ta, tb);
    }

    #[test]
    fn budget_holds_at_every_step() {
        let (vocab, corpus, config) = small_world(29);
        let mut engine = SentenceKvEngine::prefill(&vocab, &corpus, &config).unwrap();
        let trace = engine.run_decode(20).unwrap();
        for step in &trace.steps {
            for hot in &step.hot {
                assert!(hot.len(trace.prompt_len) <= config.token_budget);
            }
        }
    }
}
