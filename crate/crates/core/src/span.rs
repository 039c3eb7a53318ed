//! Span and adjacency detection from attention features.

use std::cmp::Ordering;

use ndarray::ArrayView3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A scored mention candidate covering `start..=end`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanScore {
    pub start: usize,
    pub end: usize,
    pub score: f32,
}

impl SpanScore {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn overlaps(&self, other: &SpanScore) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

/// Probability that `left` and `left + 1` belong to the same mention.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdjacencyScore {
    pub left: usize,
    pub right: usize,
    pub score: f32,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanVariant {
    Adjacency,
    /// Feature row is the span's own last token.
    SpanLast,
    /// Feature row is the token after the span.
    #[default]
    SpanNext,
}

impl SpanVariant {
    /// Query row used to score a span ending at `end`.
    pub fn feature_row(self, end: usize) -> usize {
        match self {
            SpanVariant::SpanNext => end + 1,
            _ => end,
        }
    }

    /// End position whose candidates become scorable once row `k` exists.
    pub fn end_for_row(self, k: usize) -> Option<usize> {
        match self {
            SpanVariant::SpanNext => k.checked_sub(1),
            _ => Some(k),
        }
    }
}

/// Candidate starts for a span ending at `end`: every `i` with
/// `end - i <= window`, plus position 0. Ascending.
pub fn candidate_starts(end: usize, window: usize) -> Vec<usize> {
    let lo = end.saturating_sub(window);
    let mut v = Vec::with_capacity(end - lo + 2);
    if lo > 0 {
        v.push(0);
    }
    v.extend(lo..=end);
    v
}

pub fn in_window(start: usize, end: usize, window: usize) -> bool {
    start == 0 || end - start <= window
}

/// Attention weights from the query whose rows are given (`[L][H][k + 1]`)
/// to key `i`, layers outer, heads inner.
pub fn attn_column(rows: ArrayView3<'_, f32>, i: usize) -> Vec<f32> {
    let (l, h, _) = rows.dim();
    let mut v = Vec::with_capacity(l * h);
    for li in 0..l {
        for hi in 0..h {
            v.push(rows[[li, hi, i]]);
        }
    }
    v
}

/// Scores every windowed candidate whose feature row is `k` and keeps those
/// strictly above `threshold`, best first.
pub fn spans_from_rows<F>(
    rows: ArrayView3<'_, f32>,
    k: usize,
    variant: SpanVariant,
    threshold: f32,
    window: usize,
    mut score: F,
) -> Result<Vec<SpanScore>>
where
    F: FnMut(&[f32]) -> f32,
{
    if variant == SpanVariant::Adjacency {
        return Err(Error::InvalidPipeline("adjacency is not a span variant".into()));
    }
    if rows.dim().2 != k + 1 {
        return Err(Error::OutOfRange(format!("attention rows do not belong to position {k}")));
    }
    let Some(end) = variant.end_for_row(k) else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    for start in candidate_starts(end, window) {
        let s = score(&attn_column(rows, start));
        if s > threshold {
            out.push(SpanScore { start, end, score: s });
        }
    }
    out.sort_by(priority);
    Ok(out)
}

/// Adjacency probability between `j - 1` and `j` from the rows of query `j`.
pub fn adjacency_from_rows<F>(rows: ArrayView3<'_, f32>, j: usize, mut score: F) -> Result<AdjacencyScore>
where
    F: FnMut(&[f32]) -> f32,
{
    if j == 0 {
        return Err(Error::OutOfRange("adjacency needs a left neighbour".into()));
    }
    if rows.dim().2 != j + 1 {
        return Err(Error::OutOfRange(format!("attention rows do not belong to position {j}")));
    }
    Ok(AdjacencyScore { left: j - 1, right: j, score: score(&attn_column(rows, j - 1)) })
}

pub fn detect_adjacent<F>(bundle: &crate::model::RepBundle, j: usize, score: F) -> Result<AdjacencyScore>
where
    F: FnMut(&[f32]) -> f32,
{
    if j >= bundle.seq_len() {
        return Err(Error::OutOfRange(format!("position {j} of {}", bundle.seq_len())));
    }
    adjacency_from_rows(bundle.attn_rows(j), j, score)
}

pub fn detect_spans_at<F>(
    bundle: &crate::model::RepBundle,
    k: usize,
    variant: SpanVariant,
    threshold: f32,
    window: usize,
    score: F,
) -> Result<Vec<SpanScore>>
where
    F: FnMut(&[f32]) -> f32,
{
    if k >= bundle.seq_len() {
        return Err(Error::OutOfRange(format!("position {k} of {}", bundle.seq_len())));
    }
    spans_from_rows(bundle.attn_rows(k), k, variant, threshold, window, score)
}

/// Selection order: higher score, then longer, then earlier start.
pub fn priority(a: &SpanScore, b: &SpanScore) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(b.len().cmp(&a.len()))
        .then(a.start.cmp(&b.start))
}

/// Greedy disjoint selection in priority order; result sorted by start.
pub fn resolve_overlaps(candidates: &[SpanScore]) -> Vec<SpanScore> {
    let mut order = candidates.to_vec();
    order.sort_by(priority);
    let mut kept: Vec<SpanScore> = Vec::new();
    for c in order {
        if kept.iter().all(|k| !k.overlaps(&c)) {
            kept.push(c);
        }
    }
    kept.sort_by_key(|s| s.start);
    kept
}
