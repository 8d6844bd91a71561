//! Importance signals driving eviction and budgeting.
//!
//! All scores are derived from the attention a head pays from mask-token
//! queries: per-token importance (column sums of mask-query attention over
//! prompt keys), per-layer importance (how much the attention sub-layer
//! transforms its input), and per-head prompt preference (the share of
//! mask-query mass that lands on prompt keys).

use crate::error::{Error, Result};
use crate::math::{cosine, dot, softmax};

/// Which contiguous block of mask rows casts votes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskSegment {
    /// Every mask row votes.
    #[default]
    All,
    /// First third of the mask rows.
    Front,
    /// Middle third.
    Middle,
    /// Last third.
    Back,
}

impl MaskSegment {
    /// Half-open row range `[start, end)` into `n_m` mask rows.
    pub fn row_range(self, n_m: usize) -> (usize, usize) {
        match self {
            MaskSegment::All => (0, n_m),
            MaskSegment::Front => (0, n_m / 3),
            MaskSegment::Middle => (n_m / 3, 2 * n_m / 3),
            MaskSegment::Back => (2 * n_m / 3, n_m),
        }
    }
}

impl std::str::FromStr for MaskSegment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(MaskSegment::All),
            "front" => Ok(MaskSegment::Front),
            "middle" => Ok(MaskSegment::Middle),
            "back" => Ok(MaskSegment::Back),
            other => Err(Error::config(format!("unknown mask segment {other:?}"))),
        }
    }
}

/// Row-stochastic attention from mask queries to the full key set.
///
/// Columns are ordered prompt keys first (`0..n_p`), then mask keys
/// (`n_p..n_p+n_m`). Decoded-response keys, when present at re-scoring time,
/// sit past `n_p + n_m` and are excluded from both prompt and mask sums.
#[derive(Debug, Clone)]
pub struct MaskAttention {
    /// `n_m` rows over `n` columns, each row summing to 1.
    pub rows: Vec<Vec<f64>>,
    /// Number of prompt keys (leading columns).
    pub n_p: usize,
    /// Number of mask keys.
    pub n_m: usize,
}

impl MaskAttention {
    /// Total number of key columns.
    pub fn n_cols(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }
}

/// Per-prompt-token importance scores from one head.
#[derive(Debug, Clone)]
pub struct ImportanceVector {
    /// One nonnegative score per prompt token; bounded by the number of
    /// voting mask rows.
    pub scores: Vec<f64>,
    /// Number of mask rows in the source attention (for consumers that want
    /// to normalize; raw sums are kept as-is).
    pub n_m: usize,
    /// Which mask rows voted.
    pub segment: MaskSegment,
}

/// One-minus-mean-cosine between the attention sub-layer input and output.
#[derive(Debug, Clone, Copy)]
pub struct LayerImportance {
    /// Value in `[0, 2]`.
    pub value: f64,
    /// Number of token positions averaged.
    pub sample_count: usize,
}

/// How strongly a head's mask queries favor prompt keys over mask keys.
#[derive(Debug, Clone, Copy)]
pub struct HeadPreference {
    /// `s_mask_to_prompt / (s_mask_to_prompt + s_mask_to_mask)`, in `[0, 1]`.
    pub value: f64,
    /// Total mask-query attention mass on prompt keys.
    pub s_mask_to_prompt: f64,
    /// Total mask-query attention mass on mask keys.
    pub s_mask_to_mask: f64,
}

/// Scaled-dot-product attention from mask queries to all keys.
///
/// `q_mask` holds one query per mask row, `k_full` one key per column; both
/// use the same `d_k`. Rows are softmax-normalized.
pub fn mask_attention(q_mask: &[Vec<f64>], k_full: &[Vec<f64>], d_k: usize) -> Result<MaskAttention> {
    if q_mask.is_empty() || k_full.is_empty() {
        return Err(Error::config("mask_attention requires at least one query and one key"));
    }
    let finite = |m: &[Vec<f64>]| m.iter().all(|row| row.iter().all(|x| x.is_finite()));
    if !finite(q_mask) || !finite(k_full) {
        return Err(Error::Numeric("non-finite value in attention inputs".into()));
    }
    let scale = 1.0 / (d_k as f64).sqrt();
    let rows = q_mask
        .iter()
        .map(|q| {
            let scores: Vec<f64> = k_full.iter().map(|k| dot(q, k) * scale).collect();
            softmax(&scores)
        })
        .collect();
    Ok(MaskAttention { rows, n_p: k_full.len(), n_m: q_mask.len() })
}

/// Sum attention mass per prompt column over the voting mask rows.
pub fn mask_voting(attention: &MaskAttention, segment: MaskSegment) -> ImportanceVector {
    let (start, end) = segment.row_range(attention.n_m);
    let mut scores = vec![0.0; attention.n_p];
    for row in &attention.rows[start..end] {
        for (j, score) in scores.iter_mut().enumerate() {
            *score += row[j];
        }
    }
    ImportanceVector { scores, n_m: end - start, segment }
}

/// Measure how much the attention sub-layer moved each token's hidden state.
///
/// A zero-norm row counts as unchanged (cosine 1) and is logged.
pub fn layer_importance(h_in: &[Vec<f64>], h_out: &[Vec<f64>]) -> Result<LayerImportance> {
    if h_in.is_empty() || h_in.len() != h_out.len() {
        return Err(Error::config("layer_importance requires matching nonempty inputs"));
    }
    let mut total = 0.0;
    for (a, b) in h_in.iter().zip(h_out) {
        let zero = a.iter().all(|x| *x == 0.0) || b.iter().all(|x| *x == 0.0);
        if zero {
            log::debug!("layer_importance: zero-norm row, cosine treated as 1");
        }
        total += cosine(a, b);
    }
    let n = h_in.len();
    Ok(LayerImportance { value: 1.0 - total / n as f64, sample_count: n })
}

/// Share of mask-query attention directed at prompt keys.
///
/// `prompt_cols` and `mask_cols` must be disjoint column sets; columns in
/// neither set (decoded-response keys) contribute to neither sum. A zero
/// denominator yields 0 and is logged.
pub fn prompt_preference(
    attention: &MaskAttention,
    prompt_cols: &[usize],
    mask_cols: &[usize],
) -> Result<HeadPreference> {
    let n = attention.n_cols();
    if prompt_cols.iter().chain(mask_cols).any(|&c| c >= n) {
        return Err(Error::config("prompt_preference: column index out of range"));
    }
    let mut s_mp = 0.0;
    let mut s_mm = 0.0;
    for row in &attention.rows {
        for &c in prompt_cols {
            s_mp += row[c];
        }
        for &c in mask_cols {
            s_mm += row[c];
        }
    }
    let denom = s_mp + s_mm;
    let value = if denom > 0.0 {
        s_mp / denom
    } else {
        log::debug!("prompt_preference: zero denominator, preference set to 0");
        0.0
    };
    Ok(HeadPreference { value, s_mask_to_prompt: s_mp, s_mask_to_mask: s_mm })
}
