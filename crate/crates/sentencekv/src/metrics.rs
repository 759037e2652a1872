//! Scoring and accounting: needle-retrieval accuracy, latency proxies,
//! experiment aggregation, and the fixed-schema CSV reports.

use std::fmt::Write as _;

use crate::baselines::{PolicyKind, PolicySession};
use crate::engine::{DecodeTrace, EngineConfig, QuerySource};
use crate::error::{Error, Result};
use crate::model::{make_niah_corpus, make_vocab, ModelDims, SyntheticCorpus};
use crate::store::memory_cost;

/// Fraction of the needle's retained tokens that must be resident, at every
/// layer, for a queried step to count as a hit.
pub const NIAH_HIT_COVERAGE: f64 = 0.8;

/// Fixed header of the aggregated experiment CSV.
pub const SUMMARY_CSV_HEADER: &str =
    "policy,seed,depth,tau,r,N,accuracy,onload_tokens_mean,dot_products_mean,peak_hot,mem_32k_bytes";

/// Context lengths used for memory-footprint projections.
pub const PROJECTION_LENGTHS: [usize; 5] = [16_384, 32_768, 65_536, 131_072, 262_144];

// ── Needle scoring ──────────────────────────────────────────────────────────

/// Outcome of one needle-retrieval trial.
#[derive(Debug, Clone, PartialEq)]
pub struct NiahResult {
    /// Coverage rule satisfied at the designated query step (the step where
    /// the last probe token was fed).
    pub hit: bool,
    /// 1-based count of probe steps until the rule first held, if ever.
    pub steps_to_hit: Option<usize>,
    pub token_budget: usize,
    pub keep_factor: f64,
    pub window_len: usize,
}

fn coverage_holds(trace: &DecodeTrace, step: usize, span: (usize, usize)) -> bool {
    let row = &trace.steps[step];
    for (layer, retained) in trace.retained_per_layer.iter().enumerate() {
        let needle_retained: Vec<usize> =
            retained.iter().copied().filter(|&t| t >= span.0 && t < span.1).collect();
        if needle_retained.is_empty() {
            return false;
        }
        let resident = needle_retained
            .iter()
            .filter(|&&t| row.hot[layer].contains(t, trace.prompt_len))
            .count();
        if (resident as f64) < NIAH_HIT_COVERAGE * needle_retained.len() as f64 {
            return false;
        }
    }
    true
}

/// Score a decode trace against the corpus needle: locate the probe-token run
/// among the step inputs and apply the coverage rule at each probe step. A
/// trial is a hit when the rule holds at the final probe step.
pub fn score_niah(trace: &DecodeTrace, corpus: &SyntheticCorpus) -> Result<NiahResult> {
    let span = corpus
        .needle_span
        .ok_or_else(|| Error::Input("corpus has no needle to score".into()))?;
    let probes = corpus
        .needle_query_tokens
        .as_ref()
        .ok_or_else(|| Error::Input("corpus has no needle query tokens".into()))?;
    if probes.is_empty() {
        return Err(Error::Input("empty needle query token list".into()));
    }
    let inputs: Vec<u32> = trace.steps.iter().map(|s| s.input_token).collect();
    let start = inputs
        .windows(probes.len())
        .position(|w| w == probes.as_slice())
        .ok_or_else(|| Error::Input("trace does not contain the probe sequence".into()))?;

    let mut steps_to_hit = None;
    for i in 0..probes.len() {
        if coverage_holds(trace, start + i, span) {
            steps_to_hit = Some(i + 1);
            break;
        }
    }
    let hit = coverage_holds(trace, start + probes.len() - 1, span);
    Ok(NiahResult {
        hit,
        steps_to_hit,
        token_budget: trace.token_budget,
        keep_factor: trace.keep_factor,
        window_len: trace.window_len,
    })
}

// ── Latency proxies ─────────────────────────────────────────────────────────

/// Desk-scale latency stand-ins counted per decode step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatencyProxy {
    /// Query-key dot products: per layer, heads x attended positions for the
    /// attention itself plus heads x ranked units for similarity ranking.
    pub dot_products: u64,
    pub onload_tokens: u64,
    /// Retrieval units scored this step, summed over layers.
    pub ranking_comparisons: u64,
}

/// Proxy counts for one step of a trace.
pub fn step_proxy(trace: &DecodeTrace, step: usize) -> LatencyProxy {
    let row = &trace.steps[step];
    let heads = trace.dims.heads as u64;
    let mut dots = 0u64;
    let mut ranked = 0u64;
    for layer in 0..trace.dims.layers {
        dots += heads * row.attended[layer] as u64;
        if let Some(r) = row.rankings.get(layer) {
            dots += heads * r.len() as u64;
            ranked += r.len() as u64;
        }
    }
    LatencyProxy { dot_products: dots, onload_tokens: row.onload_tokens, ranking_comparisons: ranked }
}

// ── Suite running ───────────────────────────────────────────────────────────

/// Parameters of a needle-retrieval experiment suite.
#[derive(Debug, Clone, PartialEq)]
pub struct NiahSuiteConfig {
    pub vocab_size: u32,
    pub topic_count: u32,
    pub boundary_fraction: f64,
    pub haystack_len: usize,
    pub needle_len: usize,
    pub depths: Vec<f64>,
    pub seeds: Vec<u64>,
    pub engine: EngineConfig,
}

impl Default for NiahSuiteConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            topic_count: 15,
            boundary_fraction: 0.02,
            haystack_len: 1536,
            needle_len: 48,
            depths: vec![0.1, 0.35, 0.6, 0.85],
            seeds: (0..10).collect(),
            engine: EngineConfig::default(),
        }
    }
}

/// One executed (policy, seed, depth) cell.
#[derive(Debug, Clone)]
pub struct TrialRecord {
    pub policy: String,
    pub seed: u64,
    pub depth: f64,
    pub trace: DecodeTrace,
    pub niah: NiahResult,
}

/// Run one needle trial: build the seeded world, prefill the chosen policy,
/// feed the probe tokens as forced decode inputs, and score the trace.
pub fn run_niah_trial(
    suite: &NiahSuiteConfig,
    policy: PolicyKind,
    seed: u64,
    depth: f64,
) -> Result<TrialRecord> {
    let vocab = make_vocab(suite.vocab_size, suite.topic_count, suite.boundary_fraction, seed)?;
    let needle_topic = (seed % u64::from(suite.topic_count)) as u32;
    let corpus =
        make_niah_corpus(&vocab, suite.haystack_len, needle_topic, suite.needle_len, depth, seed)?;
    let mut config = suite.engine.clone();
    config.seed = seed;
    let mut session = PolicySession::new(policy, &vocab, &corpus, &config)?;
    for &probe in corpus.needle_query_tokens.as_ref().expect("generated corpus has probes") {
        session.decode_step(QuerySource::Forced(probe))?;
    }
    let trace = session.trace_snapshot();
    let niah = score_niah(&trace, &corpus)?;
    Ok(TrialRecord { policy: policy.name(), seed, depth, trace, niah })
}

/// Run the full (seed x depth) grid for one policy.
pub fn run_niah_suite(suite: &NiahSuiteConfig, policy: PolicyKind) -> Result<Vec<TrialRecord>> {
    let mut out = Vec::with_capacity(suite.seeds.len() * suite.depths.len());
    for &seed in &suite.seeds {
        for &depth in &suite.depths {
            out.push(run_niah_trial(suite, policy, seed, depth)?);
        }
    }
    Ok(out)
}

/// Fraction of hits across records.
pub fn accuracy(records: &[TrialRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().filter(|r| r.niah.hit).count() as f64 / records.len() as f64
}

// ── Aggregation ─────────────────────────────────────────────────────────────

/// One row of the aggregated experiment CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub policy: String,
    pub seed: u64,
    pub depth: f64,
    pub token_budget: usize,
    pub keep_factor: f64,
    pub window_len: usize,
    pub accuracy: f64,
    pub onload_tokens_mean: f64,
    pub dot_products_mean: f64,
    pub peak_hot: usize,
    pub mem_32k_bytes: u128,
}

impl SummaryRow {
    fn csv_line(&self) -> String {
        format!(
            "{},{},{:.2},{},{},{},{:.4},{:.3},{:.3},{},{}",
            self.policy,
            self.seed,
            self.depth,
            self.token_budget,
            self.keep_factor,
            self.window_len,
            self.accuracy,
            self.onload_tokens_mean,
            self.dot_products_mean,
            self.peak_hot,
            self.mem_32k_bytes
        )
    }
}

/// Aggregate executed trials into fixed-schema rows, sorted by
/// (policy, seed, depth). Trials with no decode steps produce zero-filled
/// proxy columns.
pub fn summarize(records: &[TrialRecord]) -> Vec<SummaryRow> {
    let mut rows: Vec<SummaryRow> = records
        .iter()
        .map(|rec| {
            let t = &rec.trace;
            let steps = t.steps.len();
            let (mut onload_sum, mut dots_sum) = (0u64, 0u64);
            let mut peak_hot = 0usize;
            for i in 0..steps {
                let p = step_proxy(t, i);
                onload_sum += p.onload_tokens;
                dots_sum += p.dot_products;
                for layer in 0..t.dims.layers {
                    peak_hot = peak_hot.max(t.steps[i].attended[layer]);
                }
            }
            let denom = steps.max(1) as f64;
            SummaryRow {
                policy: rec.policy.clone(),
                seed: rec.seed,
                depth: rec.depth,
                token_budget: t.token_budget,
                keep_factor: t.keep_factor,
                window_len: t.window_len,
                accuracy: if rec.niah.hit { 1.0 } else { 0.0 },
                onload_tokens_mean: onload_sum as f64 / denom,
                dot_products_mean: dots_sum as f64 / denom,
                peak_hot,
                mem_32k_bytes: memory_cost(t.dims, 32_768, 0, 2),
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        a.policy
            .cmp(&b.policy)
            .then(a.seed.cmp(&b.seed))
            .then(a.depth.partial_cmp(&b.depth).unwrap())
    });
    rows
}

/// Render summary rows as CSV under the fixed header.
pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from(SUMMARY_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

/// KV footprint projections (bytes, half precision) at reference context
/// lengths for the given model geometry.
pub fn memory_projection(dims: ModelDims, element_bytes: u64) -> Vec<(usize, u128)> {
    PROJECTION_LENGTHS.iter().map(|&l| (l, memory_cost(dims, l, 0, element_bytes))).collect()
}

pub fn memory_projection_csv(dims: ModelDims, element_bytes: u64) -> String {
    let mut out = String::from("context_tokens,bytes\n");
    for (l, b) in memory_projection(dims, element_bytes) {
        let _ = writeln!(out, "{l},{b}");
    }
    out
}

// ── Trace export ────────────────────────────────────────────────────────────

/// Per-(step, layer) trace CSV. With `with_policy` a `policy` column is
/// prepended (the baseline-matrix schema); without it the engine schema
/// `step,layer,top1_bucket,hot_count,onload_tokens,needle_hit` is emitted.
pub fn trace_csv(trace: &DecodeTrace, corpus: Option<&SyntheticCorpus>, with_policy: bool) -> String {
    let mut out = String::new();
    if with_policy {
        out.push_str("policy,step,layer,top1_bucket,hot_count,onload_tokens,needle_hit\n");
    } else {
        out.push_str("step,layer,top1_bucket,hot_count,onload_tokens,needle_hit\n");
    }
    let span = corpus.and_then(|c| c.needle_span);
    for (i, row) in trace.steps.iter().enumerate() {
        for layer in 0..trace.dims.layers {
            let top1 = row
                .rankings
                .get(layer)
                .and_then(|r| r.first())
                .map_or(-1i64, |&b| b as i64);
            let onload = trace
                .ledger
                .rows()
                .iter()
                .find(|r| r.step == i && r.layer == layer)
                .map_or(0, |r| r.onload_tokens);
            let needle_hit = span.map_or(0u8, |(s, e)| {
                let retained: Vec<usize> = trace.retained_per_layer[layer]
                    .iter()
                    .copied()
                    .filter(|&t| t >= s && t < e)
                    .collect();
                if retained.is_empty() {
                    return 0;
                }
                let resident =
                    retained.iter().filter(|&&t| row.hot[layer].contains(t, trace.prompt_len)).count();
                u8::from(resident as f64 >= NIAH_HIT_COVERAGE * retained.len() as f64)
            });
            if with_policy {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    trace.policy,
                    i,
                    layer,
                    top1,
                    row.hot[layer].len(trace.prompt_len),
                    onload,
                    needle_hit
                );
            } else {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    i,
                    layer,
                    top1,
                    row.hot[layer].len(trace.prompt_len),
                    onload,
                    needle_hit
                );
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{HotSnapshot, TraceStep};
    use crate::store::TransferLedger;

    fn tiny_suite() -> NiahSuiteConfig {
        NiahSuiteConfig {
            vocab_size: 96,
            topic_count: 8,
            boundary_fraction: 0.03,
            haystack_len: 320,
            needle_len: 16,
            depths: vec![0.5],
            seeds: vec![0, 1],
            engine: EngineConfig {
                token_budget: 48,
                keep_factor: 2.0,
                window_len: 16,
                dims: ModelDims::new(2, 2, 16).unwrap(),
                ..Default::default()
            },
        }
    }

    #[test]
    fn sentencekv_trial_produces_scoreable_trace() {
        let suite = tiny_suite();
        let rec = run_niah_trial(&suite, PolicyKind::SentenceKv, 0, 0.5).unwrap();
        assert_eq!(rec.trace.steps.len(), crate::model::NEEDLE_QUERY_LEN);
        assert_eq!(rec.policy, "sentencekv");
    }

    #[test]
    fn full_policy_always_hits() {
        let suite = tiny_suite();
        let recs = run_niah_suite(&suite, PolicyKind::Full).unwrap();
        assert_eq!(recs.len(), 2);
        assert!((accuracy(&recs) - 1.0).abs() < 1e-12);
    }

    /// With no needle token surviving prefill at some layer, the trial is a
    /// miss no matter what is resident.
    #[test]
    fn zero_retained_needle_tokens_is_a_miss() {
        let suite = tiny_suite();
        let rec = run_niah_trial(&suite, PolicyKind::SentenceKv, 0, 0.5).unwrap();
        let vocab = make_vocab(96, 8, 0.03, 0).unwrap();
        let corpus = make_niah_corpus(&vocab, 320, 0, 16, 0.5, 0).unwrap();
        let (ns, ne) = corpus.needle_span.unwrap();
        let mut trace = rec.trace.clone();
        for retained in &mut trace.retained_per_layer {
            retained.retain(|&t| t < ns || t >= ne);
        }
        let scored = score_niah(&trace, &corpus).unwrap();
        assert!(!scored.hit);
        assert_eq!(scored.steps_to_hit, None);
    }

    #[test]
    fn score_niah_requires_a_needle() {
        let suite = tiny_suite();
        let rec = run_niah_trial(&suite, PolicyKind::Full, 0, 0.5).unwrap();
        let vocab = make_vocab(96, 8, 0.03, 0).unwrap();
        let mut corpus = make_niah_corpus(&vocab, 320, 0, 16, 0.5, 0).unwrap();
        corpus.needle_span = None;
        assert!(score_niah(&rec.trace, &corpus).is_err());
    }

    fn synthetic_record(dims: ModelDims, steps: usize, attended: usize) -> TrialRecord {
        let step = TraceStep {
            input_token: 0,
            emitted_token: 0,
            rankings: Vec::new(),
            hot: (0..dims.layers).map(|_| HotSnapshot::AllPrompt).collect(),
            output: Vec::new(),
            attended: vec![attended; dims.layers],
            onload_tokens: 0,
            cache_len: 0,
        };
        let trace = DecodeTrace {
            policy: "full".into(),
            dims,
            prompt_len: attended,
            window_len: 32,
            token_budget: 1024,
            keep_factor: 2.0,
            seed: 0,
            retained_per_layer: (0..dims.layers).map(|_| Vec::new()).collect(),
            rankable_units: vec![0; dims.layers],
            steps: vec![step; steps],
            ledger: TransferLedger::new(dims, 2),
        };
        TrialRecord {
            policy: "full".into(),
            seed: 0,
            depth: 0.5,
            trace,
            niah: NiahResult {
                hit: true,
                steps_to_hit: Some(1),
                token_budget: 1024,
                keep_factor: 2.0,
                window_len: 32,
            },
        }
    }

    /// The reference-geometry projection lands on the well-known 16 GiB.
    #[test]
    fn summary_mem_column_matches_reference_geometry() {
        let rec = synthetic_record(ModelDims::new(32, 32, 128).unwrap(), 1, 100);
        let rows = summarize(std::slice::from_ref(&rec));
        assert_eq!(rows[0].mem_32k_bytes, 17_179_869_184);
        let csv = summary_csv(&rows);
        assert!(csv.starts_with(SUMMARY_CSV_HEADER));
        assert!(csv.contains("17179869184"));
    }

    #[test]
    fn summary_zero_steps_zero_filled() {
        let rec = synthetic_record(ModelDims::new(2, 2, 8).unwrap(), 0, 64);
        let rows = summarize(std::slice::from_ref(&rec));
        assert_eq!(rows[0].onload_tokens_mean, 0.0);
        assert_eq!(rows[0].dot_products_mean, 0.0);
        assert_eq!(rows[0].peak_hot, 0);
    }

    /// Full-cache dot products grow with the step index; the budgeted engine
    /// stays bounded by budget + window + generated.
    #[test]
    fn proxies_separate_full_from_budgeted() {
        let suite = tiny_suite();
        let vocab = make_vocab(96, 8, 0.03, 3).unwrap();
        let corpus = make_niah_corpus(&vocab, 320, 1, 16, 0.5, 3).unwrap();
        let mut config = suite.engine.clone();
        config.seed = 3;

        let mut full = PolicySession::new(PolicyKind::Full, &vocab, &corpus, &config).unwrap();
        let mut skv =
            PolicySession::new(PolicyKind::SentenceKv, &vocab, &corpus, &config).unwrap();
        for i in 0..32u32 {
            full.decode_step(QuerySource::Forced(i % 90)).unwrap();
            skv.decode_step(QuerySource::Forced(i % 90)).unwrap();
        }
        let tf = full.trace_snapshot();
        let ts = skv.trace_snapshot();
        let dims = config.dims;
        for i in 1..32 {
            let pf = step_proxy(&tf, i);
            let prev = step_proxy(&tf, i - 1);
            assert!(pf.dot_products > prev.dot_products, "full proxy must grow");
            let ps = step_proxy(&ts, i);
            let bound = (dims.layers * dims.heads * (config.token_budget + config.window_len + i)
                + dims.heads * (ts.rankable_units.iter().sum::<usize>()))
                as u64;
            assert!(ps.dot_products <= bound, "engine proxy {} above bound {}", ps.dot_products, bound);
        }
    }

    #[test]
    fn trace_csv_schemas() {
        let suite = tiny_suite();
        let rec = run_niah_trial(&suite, PolicyKind::SentenceKv, 1, 0.5).unwrap();
        let plain = trace_csv(&rec.trace, None, false);
        assert!(plain.starts_with("step,layer,top1_bucket,hot_count,onload_tokens,needle_hit\n"));
        let with_policy = trace_csv(&rec.trace, None, true);
        assert!(with_policy
            .starts_with("policy,step,layer,top1_bucket,hot_count,onload_tokens,needle_hit\n"));
        assert!(with_policy.lines().nth(1).unwrap().starts_with("sentencekv,"));
    }

    #[test]
    fn projection_csv_lists_reference_lengths() {
        let csv = memory_projection_csv(ModelDims::new(32, 32, 128).unwrap(), 2);
        assert!(csv.contains("32768,17179869184"));
        assert_eq!(csv.lines().count(), 1 + PROJECTION_LENGTHS.len());
    }
}
