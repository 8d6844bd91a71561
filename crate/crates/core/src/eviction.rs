//! Top-k keep-set selection and cache compaction.

use crate::budget::BudgetPlan;
use crate::cache::FeatureCache;
use crate::error::{Error, Result};
use crate::scoring::{mask_voting, MaskAttention, MaskSegment};

/// How prompt-token importance is measured before eviction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionPolicy {
    /// Column sums of mask-query attention (optionally a mask-row segment).
    MaskVoting(MaskSegment),
    /// Column sums of the last `window` prompt-query rows.
    SnapWindow { window: usize },
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        SelectionPolicy::MaskVoting(MaskSegment::All)
    }
}

/// Per (layer, head) importance over prompt positions.
#[derive(Debug, Clone)]
pub struct ImportanceGrid {
    /// `[layer][head][prompt_position]`.
    pub scores: Vec<Vec<Vec<f64>>>,
}

impl ImportanceGrid {
    pub fn num_layers(&self) -> usize {
        self.scores.len()
    }

    pub fn num_heads(&self) -> usize {
        self.scores.first().map_or(0, Vec::len)
    }
}

/// Indices of the `k` highest-importance prompt positions, sorted ascending.
/// Ties break toward the lower position; `k >= n_p` keeps everything.
pub fn select_keep_set(importance: &[f64], k: usize) -> Vec<usize> {
    let n = importance.len();
    if k >= n {
        return (0..n).collect();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        importance[b]
            .partial_cmp(&importance[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut keep: Vec<usize> = order.into_iter().take(k).collect();
    keep.sort_unstable();
    keep
}

/// Snap-style importance: column sums of attention from the last
/// `window_size` prompt-query rows, restricted to prompt columns.
///
/// `prompt_rows` holds one attention row per prompt query, each spanning at
/// least `n_p` columns.
pub fn snap_importance(prompt_rows: &[Vec<f64>], window_size: usize, n_p: usize) -> Vec<f64> {
    let window = window_size.min(prompt_rows.len());
    let start = prompt_rows.len() - window;
    let mut scores = vec![0.0; n_p];
    for row in &prompt_rows[start..] {
        for (j, score) in scores.iter_mut().enumerate() {
            *score += row[j];
        }
    }
    scores
}

/// Snap-style selection: observation-window importance followed by top-k.
pub fn snap_select(prompt_rows: &[Vec<f64>], k: usize, window_size: usize, n_p: usize) -> Vec<usize> {
    select_keep_set(&snap_importance(prompt_rows, window_size, n_p), k)
}

/// Importance for one head under the given selection policy.
///
/// `mask_rows` are the attention rows of mask queries, `prompt_rows` those of
/// prompt queries; both span the full column set with prompt columns first.
pub fn head_importance(
    policy: SelectionPolicy,
    mask_rows: &[Vec<f64>],
    prompt_rows: &[Vec<f64>],
    n_p: usize,
) -> Vec<f64> {
    match policy {
        SelectionPolicy::MaskVoting(segment) => {
            let attention = MaskAttention {
                rows: mask_rows.to_vec(),
                n_p,
                n_m: mask_rows.len(),
            };
            mask_voting(&attention, segment).scores
        }
        SelectionPolicy::SnapWindow { window } => snap_importance(prompt_rows, window, n_p),
    }
}

/// Outcome of one eviction pass.
#[derive(Debug, Clone)]
pub struct EvictionReport {
    /// Retained prompt KV entries per (layer, head).
    pub retained: Vec<Vec<usize>>,
    /// Retained share of each head's total importance mass; 1.0 when the
    /// head carries no mass at all.
    pub retained_mass: Vec<Vec<f64>>,
    /// Modeled KV bytes before eviction (full prompt retained).
    pub kv_bytes_before: u64,
    /// Modeled KV bytes after eviction.
    pub kv_bytes_after: u64,
}

impl EvictionReport {
    /// Mean retained mass across all (layer, head) pairs.
    pub fn mean_retained_mass(&self) -> f64 {
        let total: f64 = self.retained_mass.iter().flatten().sum();
        let count = self.retained_mass.iter().map(Vec::len).sum::<usize>();
        if count == 0 {
            1.0
        } else {
            total / count as f64
        }
    }
}

/// Build the report for an already-compacted cache.
pub fn eviction_report(
    cache: &FeatureCache,
    importance: &ImportanceGrid,
    kv_bytes_before: u64,
    elem_bytes: u64,
) -> Result<EvictionReport> {
    let keep_sets = cache
        .keep_sets()
        .ok_or_else(|| Error::Protocol("eviction_report: cache has no keep sets".into()))?;
    let mut retained_mass = Vec::with_capacity(keep_sets.len());
    for (layer, heads) in keep_sets.iter().enumerate() {
        let mut per_head = Vec::with_capacity(heads.len());
        for (head, keep) in heads.iter().enumerate() {
            let scores = &importance.scores[layer][head];
            let total: f64 = scores.iter().sum();
            let kept: f64 = keep.iter().map(|&p| scores[p]).sum();
            per_head.push(if total > 0.0 { kept / total } else { 1.0 });
        }
        retained_mass.push(per_head);
    }
    Ok(EvictionReport {
        retained: cache.retained_prompt_counts(),
        retained_mass,
        kv_bytes_before,
        kv_bytes_after: cache.modeled_kv_bytes(elem_bytes),
    })
}

/// Compact the cache under the plan and report what survived.
pub fn evict(
    cache: &mut FeatureCache,
    plan: &BudgetPlan,
    importance: &ImportanceGrid,
    elem_bytes: u64,
) -> Result<EvictionReport> {
    let before = cache.modeled_kv_bytes(elem_bytes);
    cache.compact(plan, importance)?;
    eviction_report(cache, importance, before, elem_bytes)
}
