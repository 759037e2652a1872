//! Numeric attention kernels: scaled dot-product attention, the full-cache
//! reference decode step, and observation-window importance scoring.
//!
//! All softmax and weighted-sum accumulation runs in double precision;
//! stored vectors stay single precision.

use crate::error::{Error, Result};
use crate::model::{ModelDims, PromptQkv, TokenQkv};

/// Default observation-window length for importance scoring.
pub const DEFAULT_OBSERVATION_WINDOW: usize = 32;

/// Attention result for one decode step: per `(layer, head)` output vectors,
/// optionally with the attention-weight row over the attended positions.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    dims: ModelDims,
    /// Flat `[layers][heads][head_dim]`.
    out: Vec<f32>,
    /// One row per `(layer, head)` in `layer * heads + head` order.
    weights: Option<Vec<Vec<f32>>>,
}

impl AttentionOutput {
    pub fn new(dims: ModelDims, out: Vec<f32>, weights: Option<Vec<Vec<f32>>>) -> Self {
        debug_assert_eq!(out.len(), dims.token_width());
        Self { dims, out, weights }
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn output(&self, layer: usize, head: usize) -> &[f32] {
        let o = self.dims.offset(layer, head);
        &self.out[o..o + self.dims.head_dim]
    }

    pub fn output_flat(&self) -> &[f32] {
        &self.out
    }

    pub fn weights(&self, layer: usize, head: usize) -> Option<&[f32]> {
        self.weights.as_ref().map(|w| w[layer * self.dims.heads + head].as_slice())
    }

    /// Drop the weight rows (they dominate memory on long attended sets).
    pub fn without_weights(mut self) -> Self {
        self.weights = None;
        self
    }

    /// Head-concatenated output averaged across layers, length `heads * head_dim`.
    pub fn layer_averaged(&self) -> Vec<f32> {
        let w = self.dims.layer_width();
        let mut acc = vec![0.0f64; w];
        for layer in 0..self.dims.layers {
            for (j, a) in acc.iter_mut().enumerate() {
                *a += f64::from(self.out[layer * w + j]);
            }
        }
        acc.iter().map(|a| (*a / self.dims.layers as f64) as f32).collect()
    }
}

/// Softmax-weighted value mixture for a single query over `keys`/`values`.
/// Scores are `scale * (q . k)` with max-subtraction for stability.
pub fn attend(
    query: &[f32],
    keys: &[&[f32]],
    values: &[&[f32]],
    scale: f32,
) -> Result<(Vec<f32>, Vec<f32>)> {
    if keys.is_empty() {
        return Err(Error::Contract("attend requires at least one key".into()));
    }
    if keys.len() != values.len() {
        return Err(Error::Contract(format!(
            "attend requires |keys| == |values|, got {} vs {}",
            keys.len(),
            values.len()
        )));
    }
    let d = query.len();
    let scale = f64::from(scale);
    let mut scores = Vec::with_capacity(keys.len());
    let mut max = f64::NEG_INFINITY;
    for k in keys {
        debug_assert_eq!(k.len(), d);
        let mut dot = 0.0f64;
        for j in 0..d {
            dot += f64::from(query[j]) * f64::from(k[j]);
        }
        let s = dot * scale;
        if s > max {
            max = s;
        }
        scores.push(s);
    }
    let mut denom = 0.0f64;
    for s in &mut scores {
        *s = (*s - max).exp();
        denom += *s;
    }
    let vd = values[0].len();
    let mut out = vec![0.0f64; vd];
    let mut weights = Vec::with_capacity(scores.len());
    for (s, v) in scores.iter().zip(values) {
        let w = s / denom;
        weights.push(w as f32);
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += w * f64::from(*x);
        }
    }
    Ok((out.iter().map(|x| *x as f32).collect(), weights))
}

/// Reference full-cache decode step: the query attends over every prompt
/// token plus every previously generated token, per layer and head.
pub fn full_decode_step(
    prompt: &PromptQkv,
    generated: &[TokenQkv],
    query: &TokenQkv,
) -> Result<AttentionOutput> {
    if prompt.is_empty() {
        return Err(Error::Contract("full decode requires a non-empty prompt cache".into()));
    }
    let dims = prompt.dims();
    let d = dims.head_dim;
    let scale = 1.0 / (d as f32).sqrt();
    let mut out = vec![0.0f32; dims.token_width()];
    let mut rows = Vec::with_capacity(dims.layers * dims.heads);
    for layer in 0..dims.layers {
        for head in 0..dims.heads {
            let mut keys: Vec<&[f32]> = Vec::with_capacity(prompt.len() + generated.len());
            let mut values: Vec<&[f32]> = Vec::with_capacity(prompt.len() + generated.len());
            for t in prompt.tokens() {
                keys.push(t.k(layer, head));
                values.push(t.v(layer, head));
            }
            for t in generated {
                keys.push(t.k(layer, head));
                values.push(t.v(layer, head));
            }
            let (o, w) = attend(query.q(layer, head), &keys, &values, scale)?;
            let off = dims.offset(layer, head);
            out[off..off + d].copy_from_slice(&o);
            rows.push(w);
        }
    }
    Ok(AttentionOutput::new(dims, out, Some(rows)))
}

/// Per-layer importance scores over pre-window prompt positions.
#[derive(Debug, Clone)]
pub struct ImportanceScores {
    window_len: usize,
    /// `[layer][position]`, position in `[0, L - window_len)`.
    per_layer: Vec<Vec<f64>>,
}

impl ImportanceScores {
    /// Assemble scores directly; used by tests and scripted scenarios.
    pub fn from_parts(window_len: usize, per_layer: Vec<Vec<f64>>) -> Self {
        Self { window_len, per_layer }
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn layers(&self) -> usize {
        self.per_layer.len()
    }

    pub fn alpha(&self, layer: usize) -> &[f64] {
        &self.per_layer[layer]
    }
}

/// Observation-window importance: each of the last `window_len` tokens
/// computes a softmax attention row over its full causal prefix (positions
/// before it, self excluded); only the mass landing on pre-window positions
/// accumulates into alpha, summed across window tokens and heads, per layer.
pub fn score_importance(prompt: &PromptQkv, window_len: usize) -> Result<ImportanceScores> {
    let len = prompt.len();
    if window_len < 1 {
        return Err(Error::Input("observation window must be >= 1".into()));
    }
    if len <= window_len {
        return Err(Error::Input(format!(
            "prompt length {len} must exceed observation window {window_len}"
        )));
    }
    let dims = prompt.dims();
    let d = dims.head_dim;
    let scale = 1.0 / (d as f64).sqrt();
    let candidates = len - window_len;
    let mut per_layer = vec![vec![0.0f64; candidates]; dims.layers];

    let mut scores = vec![0.0f64; len];
    for layer in 0..dims.layers {
        for head in 0..dims.heads {
            for w in candidates..len {
                let q = prompt.token(w).q(layer, head);
                let mut max = f64::NEG_INFINITY;
                for (i, s) in scores.iter_mut().take(w).enumerate() {
                    let k = prompt.token(i).k(layer, head);
                    let mut dot = 0.0f64;
                    for j in 0..d {
                        dot += f64::from(q[j]) * f64::from(k[j]);
                    }
                    *s = dot * scale;
                    if *s > max {
                        max = *s;
                    }
                }
                let mut denom = 0.0f64;
                for s in scores.iter_mut().take(w) {
                    *s = (*s - max).exp();
                    denom += *s;
                }
                let alpha = &mut per_layer[layer];
                for i in 0..candidates.min(w) {
                    alpha[i] += scores[i] / denom;
                }
            }
        }
    }
    Ok(ImportanceScores { window_len, per_layer })
}
