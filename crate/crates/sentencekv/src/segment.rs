//! Sentence segmentation: boundary-token splitting, the equal-size-chunk
//! ablation mode, and outlier splitting for abnormally long sentences.

use crate::error::{Error, Result};
use crate::model::SyntheticVocab;

/// A contiguous sentence span. Spans partition `[0, L)`; in punctuation mode
/// the terminating boundary token belongs to the span it ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SentenceSpan {
    pub bucket_id: usize,
    pub start: usize,
    pub end: usize,
}

impl SentenceSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn contains(&self, index: usize) -> bool {
        index >= self.start && index < self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentationMode {
    /// Split after each boundary token; a trailing span without a boundary is
    /// allowed.
    Punctuation,
    /// Uniform chunks ignoring boundary tokens entirely (ablation).
    EqualChunks { chunk_size: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentationConfig {
    pub mode: SegmentationMode,
    pub outlier_split_enabled: bool,
    pub outlier_n_std: f64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            mode: SegmentationMode::Punctuation,
            outlier_split_enabled: false,
            outlier_n_std: 3.0,
        }
    }
}

/// Partition `tokens` into sentence spans.
pub fn segment(
    tokens: &[u32],
    vocab: &SyntheticVocab,
    config: &SegmentationConfig,
) -> Result<Vec<SentenceSpan>> {
    if tokens.is_empty() {
        return Err(Error::Input("cannot segment an empty token sequence".into()));
    }
    let mut spans = Vec::new();
    match config.mode {
        SegmentationMode::Punctuation => {
            let mut start = 0usize;
            for (i, &t) in tokens.iter().enumerate() {
                if vocab.is_boundary(t) {
                    spans.push(SentenceSpan { bucket_id: spans.len(), start, end: i + 1 });
                    start = i + 1;
                }
            }
            if start < tokens.len() {
                spans.push(SentenceSpan { bucket_id: spans.len(), start, end: tokens.len() });
            }
        }
        SegmentationMode::EqualChunks { chunk_size } => {
            if chunk_size < 1 {
                return Err(Error::Config("chunk_size must be >= 1".into()));
            }
            let mut start = 0usize;
            while start < tokens.len() {
                let end = (start + chunk_size).min(tokens.len());
                spans.push(SentenceSpan { bucket_id: spans.len(), start, end });
                start = end;
            }
        }
    }
    let spans = if config.outlier_split_enabled {
        split_outliers(&spans, config.outlier_n_std)
    } else {
        spans
    };
    Ok(spans)
}

/// Split every span longer than `mean + n_std * std` (population std over the
/// input span lengths) into sub-spans of at most `ceil(mean)` tokens. Bucket
/// ids are renumbered in order; the partition is preserved.
pub fn split_outliers(spans: &[SentenceSpan], n_std: f64) -> Vec<SentenceSpan> {
    if spans.len() < 2 {
        // std is 0, so the threshold equals the single span's own length.
        return spans.to_vec();
    }
    let lengths: Vec<f64> = spans.iter().map(|s| s.len() as f64).collect();
    let mean = lengths.iter().sum::<f64>() / lengths.len() as f64;
    let var = lengths.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / lengths.len() as f64;
    let threshold = mean + n_std * var.sqrt();
    let cap = (mean.ceil() as usize).max(1);

    let mut out = Vec::with_capacity(spans.len());
    for span in spans {
        if (span.len() as f64) > threshold {
            let mut start = span.start;
            while start < span.end {
                let end = (start + cap).min(span.end);
                out.push(SentenceSpan { bucket_id: out.len(), start, end });
                start = end;
            }
        } else {
            out.push(SentenceSpan { bucket_id: out.len(), ..*span });
        }
    }
    out
}
