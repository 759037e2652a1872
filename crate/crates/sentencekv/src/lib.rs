//! Sentence-level KV-cache management at desk scale.
//!
//! The pipeline: a deterministic synthetic model emits topic-clustered
//! query/key/value vectors; prompts are segmented into sentence buckets;
//! an observation window scores token importance; the globally most
//! important `floor(r * tau)` tokens per layer are retained in a host-analog
//! cold store with per-bucket mean keys; during decode, generated-sentence
//! queries are aggregated, buckets are ranked by dot-product similarity, and
//! tokens are retrieved into a device-analog hot tier bounded by the token
//! budget `tau` before restricted attention runs. Baseline policies (full
//! cache, static eviction, accumulated-attention eviction, fixed-chunk page
//! retrieval) share the same attention core and Q/K/V stream, and a transfer
//! ledger accounts every host/device byte.

pub mod attention;
pub mod baselines;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod model;
pub mod segment;
pub mod store;

pub use attention::{
    attend, full_decode_step, score_importance, AttentionOutput, ImportanceScores,
    DEFAULT_OBSERVATION_WINDOW,
};
pub use baselines::{
    build_pages, h2o_evict_step, quest_rank_pages, static_evict_policy, ChunkPage,
    FullKvSession, H2oSession, PolicyKind, PolicySession, QuestSession, StaticEvictSession,
};
pub use engine::{
    mean_query, rank_buckets, DecodeTrace, EngineConfig, HotSnapshot, QuerySource, QueryStrategy,
    SentenceKvEngine, SentenceQueryCache, SimilarityAggregation, StepOutcome, TraceStep,
};
pub use error::{Error, Result};
pub use metrics::{
    accuracy, memory_projection, memory_projection_csv, run_niah_suite, run_niah_trial,
    score_niah, step_proxy, summarize, summary_csv, trace_csv, LatencyProxy, NiahResult,
    NiahSuiteConfig, SummaryRow, TrialRecord, NIAH_HIT_COVERAGE, SUMMARY_CSV_HEADER,
};
pub use model::{
    make_niah_corpus, make_vocab, token_qkv, ModelDims, PromptQkv, QkvGenerator, SyntheticCorpus,
    SyntheticVocab, TokenQkv, DEFAULT_SIGMA, NEEDLE_QUERY_LEN,
};
pub use segment::{segment, split_outliers, SegmentationConfig, SegmentationMode, SentenceSpan};
pub use store::{
    build_store, memory_cost, memory_cost_raw, LedgerRow, SentenceBucket, TieredKvStore,
    TransferLedger, LEDGER_ELEMENT_BYTES,
};
