//! Tiered KV store: a host-analog cold store holding the `floor(r * tau)`
//! retained prompt tokens per layer, a device-analog hot set bounded by the
//! token budget, per-bucket mean key vectors, and a byte-exact transfer
//! ledger.
//!
//! Selection is global: the top `floor(r * tau)` tokens by importance are
//! taken across the whole document per layer (ties broken toward the lower
//! index) and attributed back to their containing sentence buckets. The
//! observation-window tokens stay hot permanently and are not charged against
//! the budget. Retrieval consumes ranked buckets whole while they fit; the
//! first bucket that does not fit contributes its highest-importance tokens
//! to exactly fill the budget.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{ModelDims, PromptQkv};
use crate::attention::ImportanceScores;
use crate::segment::SentenceSpan;

/// Ledger element size in bytes (half-precision analog), independent of the
/// in-memory representation.
pub const LEDGER_ELEMENT_BYTES: u64 = 2;

/// Per-layer window entries: `(token index, keys, values)`, flat
/// `[heads][head_dim]` per role.
pub type WindowKv = Vec<(usize, Vec<f32>, Vec<f32>)>;

// ── Buckets ─────────────────────────────────────────────────────────────────

/// A sentence span together with its per-layer retained tokens, importance
/// scores, and per-head mean key vectors.
#[derive(Debug, Clone)]
pub struct SentenceBucket {
    pub span: SentenceSpan,
    /// Per layer: sorted token indices retained inside this span.
    pub retained: Vec<Vec<usize>>,
    /// Per layer: mean key over the retained tokens, flat `[heads][head_dim]`;
    /// `None` when no token of this span survived at that layer (the bucket is
    /// then unrankable at that layer).
    pub mean_keys: Vec<Option<Vec<f32>>>,
    /// Per layer: `(token index, alpha)` for each retained token, index-sorted.
    pub retained_alpha: Vec<Vec<(usize, f64)>>,
}

impl SentenceBucket {
    pub fn rankable_at(&self, layer: usize) -> bool {
        self.mean_keys[layer].is_some()
    }

    pub fn retained_count(&self, layer: usize) -> usize {
        self.retained[layer].len()
    }
}

// ── Transfer ledger ─────────────────────────────────────────────────────────

/// One decode step's transfer activity at one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LedgerRow {
    pub step: usize,
    pub layer: usize,
    pub onload_tokens: u64,
    pub onload_bytes: u64,
    pub offload_bytes: u64,
}

/// Byte-exact accounting of host/device transfers. A token costs
/// `2 * heads * head_dim * element_size` bytes (keys plus values). The
/// prefill offload of the retained tokens charges the cumulative counters
/// only; per-step rows cover decode-time retrieval diffs.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferLedger {
    bytes_per_token: u64,
    offload_bytes: u64,
    onload_bytes: u64,
    onload_tokens_per_step: Vec<u64>,
    rows: Vec<LedgerRow>,
}

impl TransferLedger {
    pub fn new(dims: ModelDims, element_bytes: u64) -> Self {
        Self {
            bytes_per_token: 2 * dims.heads as u64 * dims.head_dim as u64 * element_bytes,
            offload_bytes: 0,
            onload_bytes: 0,
            onload_tokens_per_step: Vec::new(),
            rows: Vec::new(),
        }
    }

    pub fn bytes_per_token(&self) -> u64 {
        self.bytes_per_token
    }

    pub fn offload_bytes(&self) -> u64 {
        self.offload_bytes
    }

    pub fn onload_bytes(&self) -> u64 {
        self.onload_bytes
    }

    pub fn onload_tokens_per_step(&self) -> &[u64] {
        &self.onload_tokens_per_step
    }

    pub fn rows(&self) -> &[LedgerRow] {
        &self.rows
    }

    pub fn steps_recorded(&self) -> usize {
        self.onload_tokens_per_step.len()
    }

    pub(crate) fn charge_prefill_offload(&mut self, tokens: u64) {
        self.offload_bytes += tokens * self.bytes_per_token;
    }

    /// Record one decode step given per-layer (entering, leaving) token counts.
    pub(crate) fn record_step(&mut self, per_layer: &[(u64, u64)]) {
        let step = self.onload_tokens_per_step.len();
        let mut step_tokens = 0u64;
        for (layer, &(entering, leaving)) in per_layer.iter().enumerate() {
            let onload_bytes = entering * self.bytes_per_token;
            let offload_bytes = leaving * self.bytes_per_token;
            self.onload_bytes += onload_bytes;
            self.offload_bytes += offload_bytes;
            step_tokens += entering;
            self.rows.push(LedgerRow {
                step,
                layer,
                onload_tokens: entering,
                onload_bytes,
                offload_bytes,
            });
        }
        self.onload_tokens_per_step.push(step_tokens);
    }

    /// CSV export: `step,layer,onload_tokens,onload_bytes,offload_bytes`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,layer,onload_tokens,onload_bytes,offload_bytes\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.step, r.layer, r.onload_tokens, r.onload_bytes, r.offload_bytes
            );
        }
        out
    }
}

// ── Store ───────────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub(crate) struct ColdEntry {
    /// Flat `[heads][head_dim]` keys at this layer.
    pub key: Vec<f32>,
    /// Flat `[heads][head_dim]` values at this layer.
    pub value: Vec<f32>,
    pub alpha: f64,
}

/// Hot/cold tiered store for one decode session: single writer, concurrent
/// readers between mutations.
#[derive(Debug, Clone)]
pub struct TieredKvStore {
    dims: ModelDims,
    token_budget: usize,
    keep_factor: f64,
    window_len: usize,
    prompt_len: usize,
    /// Per layer: retained token index -> KV.
    cold: Vec<BTreeMap<usize, ColdEntry>>,
    /// Per layer: retrieved tokens currently resident.
    hot: Vec<BTreeSet<usize>>,
    /// Per layer: the window tokens' KV, always resident, index-sorted.
    window: Vec<WindowKv>,
    ledger: TransferLedger,
}

impl TieredKvStore {
    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn token_budget(&self) -> usize {
        self.token_budget
    }

    pub fn keep_factor(&self) -> f64 {
        self.keep_factor
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn ledger(&self) -> &TransferLedger {
        &self.ledger
    }

    /// Retained token indices at a layer, ascending.
    pub fn cold_indices(&self, layer: usize) -> Vec<usize> {
        self.cold[layer].keys().copied().collect()
    }

    pub fn cold_len(&self, layer: usize) -> usize {
        self.cold[layer].len()
    }

    pub fn hot_set(&self, layer: usize) -> &BTreeSet<usize> {
        &self.hot[layer]
    }

    /// Cold-store key vector (flat `[heads][head_dim]`) of a retained token.
    pub fn cold_key(&self, layer: usize, token: usize) -> Option<&[f32]> {
        self.cold[layer].get(&token).map(|e| e.key.as_slice())
    }

    pub fn cold_value(&self, layer: usize, token: usize) -> Option<&[f32]> {
        self.cold[layer].get(&token).map(|e| e.value.as_slice())
    }

    pub fn cold_alpha(&self, layer: usize, token: usize) -> Option<f64> {
        self.cold[layer].get(&token).map(|e| e.alpha)
    }

    /// Window tokens' `(index, key, value)` at a layer, index-sorted.
    pub fn window_kv(&self, layer: usize) -> &[(usize, Vec<f32>, Vec<f32>)] {
        &self.window[layer]
    }

    /// `(token, key, value)` of every currently-hot retrieved token at a
    /// layer, ascending by token index. Key/value are flat `[heads][head_dim]`.
    pub fn hot_kv(&self, layer: usize) -> Vec<(usize, &[f32], &[f32])> {
        self.hot[layer]
            .iter()
            .map(|tok| {
                let e = &self.cold[layer][tok];
                (*tok, e.key.as_slice(), e.value.as_slice())
            })
            .collect()
    }

    /// Retrieve into the hot tier for one decode step. `rankings[layer]` is
    /// the bucket-id ranking to consume; the ledger is charged with the
    /// hot-set diff against the previous step.
    pub fn retrieve_step(
        &mut self,
        buckets: &[SentenceBucket],
        rankings: &[Vec<usize>],
    ) -> Result<()> {
        if self.token_budget < 1 {
            return Err(Error::Config("token budget must be >= 1".into()));
        }
        if rankings.len() != self.dims.layers {
            return Err(Error::Contract(format!(
                "expected one ranking per layer ({}), got {}",
                self.dims.layers,
                rankings.len()
            )));
        }
        let mut diffs = Vec::with_capacity(self.dims.layers);
        for layer in 0..self.dims.layers {
            let mut next: BTreeSet<usize> = BTreeSet::new();
            let mut left = self.token_budget;
            for &bucket_id in &rankings[layer] {
                if left == 0 {
                    break;
                }
                let bucket = &buckets[bucket_id];
                let size = bucket.retained_count(layer);
                if size == 0 {
                    continue;
                }
                if size <= left {
                    next.extend(bucket.retained[layer].iter().copied());
                    left -= size;
                } else {
                    // Partial fill: highest-alpha retained tokens, ties toward
                    // the lower index.
                    let mut by_alpha: Vec<(usize, f64)> = bucket.retained_alpha[layer].clone();
                    by_alpha.sort_by(|a, b| {
                        b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0))
                    });
                    next.extend(by_alpha.iter().take(left).map(|(i, _)| *i));
                    left = 0;
                }
            }
            let entering = next.difference(&self.hot[layer]).count() as u64;
            let leaving = self.hot[layer].difference(&next).count() as u64;
            diffs.push((entering, leaving));
            self.hot[layer] = next;
        }
        self.ledger.record_step(&diffs);
        Ok(())
    }

    /// Textual snapshot: one `token layer alpha resident` line per cold entry,
    /// then the always-resident window tokens, plus line items for what sits
    /// outside the budget accounting (window KV and sentence vectors).
    pub fn dump_text(&self, buckets: &[SentenceBucket]) -> String {
        let mut out = String::new();
        let sentence_vectors: usize =
            buckets.iter().map(|b| b.mean_keys.iter().flatten().count()).sum();
        let _ = writeln!(out, "# tiered kv store snapshot");
        let _ = writeln!(
            out,
            "# prompt_len={} window_len={} token_budget={} keep_factor={}",
            self.prompt_len, self.window_len, self.token_budget, self.keep_factor
        );
        let _ = writeln!(
            out,
            "# cold_tokens_per_layer={} window_tokens={} sentence_vectors={}",
            self.cold_len(0),
            self.window_len,
            sentence_vectors
        );
        let _ = writeln!(out, "# columns: token layer alpha resident");
        for layer in 0..self.dims.layers {
            for (token, entry) in &self.cold[layer] {
                let resident = u8::from(self.hot[layer].contains(token));
                let _ = writeln!(out, "{token} {layer} {} {resident}", entry.alpha);
            }
            for (token, _, _) in &self.window[layer] {
                let _ = writeln!(out, "{token} {layer} - 1");
            }
        }
        out
    }
}

/// Build buckets and the tiered store from a prefill pass: per layer, the
/// globally top-`floor(r * tau)` pre-window tokens by importance go cold,
/// attributed to their spans; window tokens go (and stay) hot; everything
/// else is discarded.
pub fn build_store(
    spans: &[SentenceSpan],
    prompt: &PromptQkv,
    importance: &ImportanceScores,
    token_budget: usize,
    keep_factor: f64,
    window_len: usize,
) -> Result<(Vec<SentenceBucket>, TieredKvStore)> {
    if token_budget < 1 {
        return Err(Error::Config("token budget must be >= 1".into()));
    }
    if keep_factor < 1.0 {
        return Err(Error::Config(format!("keep factor must be >= 1, got {keep_factor}")));
    }
    let retain_target = (keep_factor * token_budget as f64).floor() as usize;
    if retain_target < 1 {
        return Err(Error::Config("floor(r * tau) must be >= 1".into()));
    }
    let len = prompt.len();
    if len <= window_len {
        return Err(Error::Input(format!(
            "prompt length {len} must exceed window length {window_len}"
        )));
    }
    let candidates = len - window_len;
    if spans.is_empty() || spans[0].start != 0 || spans.last().unwrap().end != len {
        return Err(Error::Contract("spans must partition the prompt".into()));
    }
    let dims = prompt.dims();
    let lw = dims.layer_width();
    let retain = retain_target.min(candidates);

    // Global per-layer selection: alpha descending, index ascending on ties.
    let mut retained_per_layer: Vec<Vec<usize>> = Vec::with_capacity(dims.layers);
    for layer in 0..dims.layers {
        let alpha = importance.alpha(layer);
        debug_assert_eq!(alpha.len(), candidates);
        let mut order: Vec<usize> = (0..candidates).collect();
        order.sort_by(|&a, &b| {
            alpha[b].partial_cmp(&alpha[a]).unwrap().then_with(|| a.cmp(&b))
        });
        let mut chosen: Vec<usize> = order.into_iter().take(retain).collect();
        chosen.sort_unstable();
        retained_per_layer.push(chosen);
    }

    // Attribute retained tokens to their containing spans.
    let mut buckets: Vec<SentenceBucket> = spans
        .iter()
        .map(|span| SentenceBucket {
            span: *span,
            retained: vec![Vec::new(); dims.layers],
            mean_keys: vec![None; dims.layers],
            retained_alpha: vec![Vec::new(); dims.layers],
        })
        .collect();
    for layer in 0..dims.layers {
        let alpha = importance.alpha(layer);
        let mut span_idx = 0usize;
        for &tok in &retained_per_layer[layer] {
            while !spans[span_idx].contains(tok) {
                span_idx += 1;
            }
            let b = &mut buckets[span_idx];
            b.retained[layer].push(tok);
            b.retained_alpha[layer].push((tok, alpha[tok]));
        }
    }
    for bucket in &mut buckets {
        for layer in 0..dims.layers {
            if bucket.retained[layer].is_empty() {
                continue;
            }
            let mut acc = vec![0.0f64; lw];
            for &tok in &bucket.retained[layer] {
                for (a, k) in acc.iter_mut().zip(prompt.token(tok).layer_keys(layer)) {
                    *a += f64::from(*k);
                }
            }
            let n = bucket.retained[layer].len() as f64;
            bucket.mean_keys[layer] = Some(acc.iter().map(|a| (*a / n) as f32).collect());
        }
    }

    // Cold store plus permanently-hot window KV.
    let mut cold: Vec<BTreeMap<usize, ColdEntry>> = vec![BTreeMap::new(); dims.layers];
    for layer in 0..dims.layers {
        let alpha = importance.alpha(layer);
        for &tok in &retained_per_layer[layer] {
            cold[layer].insert(
                tok,
                ColdEntry {
                    key: prompt.token(tok).layer_keys(layer).to_vec(),
                    value: prompt.token(tok).layer_values(layer).to_vec(),
                    alpha: alpha[tok],
                },
            );
        }
    }
    let mut window: Vec<WindowKv> = vec![Vec::new(); dims.layers];
    for layer in 0..dims.layers {
        for tok in candidates..len {
            window[layer].push((
                tok,
                prompt.token(tok).layer_keys(layer).to_vec(),
                prompt.token(tok).layer_values(layer).to_vec(),
            ));
        }
    }

    let mut ledger = TransferLedger::new(dims, LEDGER_ELEMENT_BYTES);
    ledger.charge_prefill_offload((retain * dims.layers) as u64);

    let store = TieredKvStore {
        dims,
        token_budget,
        keep_factor,
        window_len,
        prompt_len: len,
        cold,
        hot: vec![BTreeSet::new(); dims.layers],
        window,
        ledger,
    };
    Ok((buckets, store))
}

/// KV-cache footprint in bytes for a model of `dims` holding `prompt_len`
/// prompt tokens plus `generated` decode tokens: keys and values for every
/// token at every layer and head.
pub fn memory_cost(
    dims: ModelDims,
    prompt_len: usize,
    generated: usize,
    element_bytes: u64,
) -> u128 {
    memory_cost_raw(
        dims.layers as u64,
        dims.heads as u64,
        dims.head_dim as u64,
        prompt_len as u64,
        generated as u64,
        element_bytes,
    )
}

/// [`memory_cost`] over raw counts, zeros allowed.
pub fn memory_cost_raw(
    layers: u64,
    heads: u64,
    head_dim: u64,
    prompt_len: u64,
    generated: u64,
    element_bytes: u64,
) -> u128 {
    layers as u128
        * heads as u128
        * (prompt_len as u128 + generated as u128)
        * head_dim as u128
        * 2
        * element_bytes as u128
}
