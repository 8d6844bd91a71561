//! The feature cache: per-layer, per-position bundles of keys, values,
//! attention outputs, and FFN outputs, with periodic/shift refresh rules and
//! post-eviction compaction.
//!
//! KV entries are held per (layer, head, position) because eviction operates
//! at head granularity; attention/FFN outputs are per (layer, position).
//! Iteration is always in ascending position order so that reuse reproduces
//! the exact arithmetic of a full recompute.

use crate::budget::BudgetPlan;
use crate::error::{Error, Result};
use crate::eviction::{select_keep_set, ImportanceGrid};
use crate::math::cosine;

/// Modeled element size: accounting assumes bf16 storage in a deployment,
/// independent of the f64 math used here.
pub const MODELED_ELEM_BYTES: u64 = 2;

/// Refresh scheduling parameters.
#[derive(Debug, Clone)]
pub struct CacheConfig {
    /// Prompt positions refresh every `prompt_refresh_interval` steps (T_p).
    pub prompt_refresh_interval: usize,
    /// Response positions refresh every `response_refresh_interval` steps (T_r).
    pub response_refresh_interval: usize,
    /// Cosine threshold for the value-shift refresh test, in [-1, 1];
    /// -1 disables shift refreshes.
    pub shift_threshold: f64,
    /// Layer whose value vectors feed the shift test.
    pub probe_layer: usize,
    /// Cache only K/V for prompt positions, not attention/FFN outputs.
    pub prompt_state_exclusion: bool,
    /// Materialize vocabulary logits only at masked positions.
    pub mask_only_projection: bool,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig {
            prompt_refresh_interval: 50,
            response_refresh_interval: 5,
            shift_threshold: 0.5,
            probe_layer: 0,
            prompt_state_exclusion: false,
            mask_only_projection: false,
        }
    }
}

impl CacheConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prompt_refresh_interval == 0 || self.response_refresh_interval == 0 {
            return Err(Error::config("refresh intervals must be >= 1"));
        }
        if !(-1.0..=1.0).contains(&self.shift_threshold) {
            return Err(Error::config(format!(
                "shift threshold {} outside [-1, 1]",
                self.shift_threshold
            )));
        }
        Ok(())
    }
}

/// Everything cacheable for one position at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    /// Per-head key vectors (position-mixed, as used in attention).
    pub keys: Vec<Vec<f64>>,
    /// Per-head value vectors.
    pub values: Vec<Vec<f64>>,
    /// Attention sub-layer output for this position.
    pub attn_out: Option<Vec<f64>>,
    /// FFN sub-layer output for this position.
    pub ffn_out: Option<Vec<f64>>,
}

/// One cached key/value pair for a single head.
#[derive(Debug, Clone, PartialEq)]
pub struct KvPair {
    pub key: Vec<f64>,
    pub value: Vec<f64>,
}

/// Prompt positions to refresh at countdown step `t`: all of them on
/// multiples of T_p, none otherwise.
pub fn prompt_refresh_set(t: usize, config: &CacheConfig, prompt_positions: &[usize]) -> Vec<usize> {
    if t % config.prompt_refresh_interval == 0 {
        prompt_positions.to_vec()
    } else {
        Vec::new()
    }
}

/// Response positions to refresh at countdown step `t`: the periodic set on
/// multiples of T_r, plus positions whose probe-layer value vector drifted
/// below the cosine threshold since the previous step.
pub fn response_refresh_set(
    t: usize,
    config: &CacheConfig,
    v_now: &[Vec<f64>],
    v_prev: &[Vec<f64>],
    response_positions: &[usize],
) -> Result<Vec<usize>> {
    if v_now.len() != response_positions.len() || v_prev.len() != response_positions.len() {
        return Err(Error::config("response_refresh_set: value vectors must cover all positions"));
    }
    let periodic = t % config.response_refresh_interval == 0;
    let mut out = Vec::new();
    for (idx, &pos) in response_positions.iter().enumerate() {
        if periodic {
            out.push(pos);
            continue;
        }
        let now = &v_now[idx];
        let prev = &v_prev[idx];
        let zero = now.iter().all(|x| *x == 0.0) || prev.iter().all(|x| *x == 0.0);
        if zero {
            log::debug!("response_refresh_set: zero-norm value vector at {pos}, cosine treated as 1");
            continue;
        }
        if cosine(now, prev) < config.shift_threshold {
            out.push(pos);
        }
    }
    Ok(out)
}

/// Per-layer cache contents for one decode run.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    num_layers: usize,
    num_heads: usize,
    head_dim: usize,
    prompt_len: usize,
    seq_len: usize,
    /// `[layer][head][position]` key/value entries.
    kv: Vec<Vec<Vec<Option<KvPair>>>>,
    /// `[layer][position]` attention sub-layer outputs.
    attn_out: Vec<Vec<Option<Vec<f64>>>>,
    /// `[layer][position]` FFN sub-layer outputs.
    ffn_out: Vec<Vec<Option<Vec<f64>>>>,
    /// Up-counting step ordinal of the last refresh per position.
    last_refresh: Vec<Option<u64>>,
    /// Per (layer, head) retained prompt positions once eviction ran.
    keep_sets: Option<Vec<Vec<Vec<usize>>>>,
    prompt_state_exclusion: bool,
}

impl FeatureCache {
    pub fn new(
        num_layers: usize,
        num_heads: usize,
        head_dim: usize,
        prompt_len: usize,
        seq_len: usize,
        prompt_state_exclusion: bool,
    ) -> Self {
        FeatureCache {
            num_layers,
            num_heads,
            head_dim,
            prompt_len,
            seq_len,
            kv: vec![vec![vec![None; seq_len]; num_heads]; num_layers],
            attn_out: vec![vec![None; seq_len]; num_layers],
            ffn_out: vec![vec![None; seq_len]; num_layers],
            last_refresh: vec![None; seq_len],
            keep_sets: None,
            prompt_state_exclusion,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn prompt_state_exclusion(&self) -> bool {
        self.prompt_state_exclusion
    }

    pub fn kv_pair(&self, layer: usize, head: usize, pos: usize) -> Option<&KvPair> {
        self.kv[layer][head][pos].as_ref()
    }

    pub fn attn_out(&self, layer: usize, pos: usize) -> Option<&Vec<f64>> {
        self.attn_out[layer][pos].as_ref()
    }

    pub fn ffn_out(&self, layer: usize, pos: usize) -> Option<&Vec<f64>> {
        self.ffn_out[layer][pos].as_ref()
    }

    pub fn last_refresh(&self, pos: usize) -> Option<u64> {
        self.last_refresh.get(pos).copied().flatten()
    }

    pub fn keep_sets(&self) -> Option<&Vec<Vec<Vec<usize>>>> {
        self.keep_sets.as_ref()
    }

    /// Whether the prompt KV at (layer, head, pos) survives eviction. Before
    /// eviction everything is retained.
    pub fn is_retained(&self, layer: usize, head: usize, pos: usize) -> bool {
        if pos >= self.prompt_len {
            return true;
        }
        match &self.keep_sets {
            None => true,
            Some(sets) => sets[layer][head].binary_search(&pos).is_ok(),
        }
    }

    /// Whether any (layer, head) still retains this position.
    pub fn retained_anywhere(&self, pos: usize) -> bool {
        if pos >= self.prompt_len {
            return true;
        }
        match &self.keep_sets {
            None => true,
            Some(sets) => sets
                .iter()
                .any(|heads| heads.iter().any(|keep| keep.binary_search(&pos).is_ok())),
        }
    }

    /// Write fresh bundles for the refresh set; everything else is untouched.
    ///
    /// Prompt KV entries outside an installed keep set are skipped, as are
    /// prompt attention/FFN outputs under prompt-state exclusion.
    pub fn apply_refresh(
        &mut self,
        features: &[std::collections::BTreeMap<usize, FeatureBundle>],
        refresh_set: &[usize],
        step_ordinal: u64,
    ) -> Result<()> {
        if features.len() != self.num_layers {
            return Err(Error::Cache(format!(
                "apply_refresh: expected {} layers of features, got {}",
                self.num_layers,
                features.len()
            )));
        }
        for &pos in refresh_set {
            if pos >= self.seq_len {
                return Err(Error::Protocol(format!(
                    "refresh position {pos} outside sequence of length {}",
                    self.seq_len
                )));
            }
        }
        for (layer, layer_features) in features.iter().enumerate() {
            for &pos in refresh_set {
                let bundle = layer_features.get(&pos).ok_or_else(|| {
                    Error::Cache(format!("apply_refresh: no fresh bundle for position {pos}"))
                })?;
                if bundle.keys.len() != self.num_heads
                    || bundle.keys.iter().any(|k| k.len() != self.head_dim)
                {
                    return Err(Error::Cache("apply_refresh: bundle shape mismatch".into()));
                }
                for head in 0..self.num_heads {
                    if !self.is_retained(layer, head, pos) {
                        continue;
                    }
                    self.kv[layer][head][pos] = Some(KvPair {
                        key: bundle.keys[head].clone(),
                        value: bundle.values[head].clone(),
                    });
                }
                let exclude = self.prompt_state_exclusion && pos < self.prompt_len;
                if !exclude {
                    self.attn_out[layer][pos] = bundle.attn_out.clone();
                    self.ffn_out[layer][pos] = bundle.ffn_out.clone();
                }
            }
        }
        for &pos in refresh_set {
            self.last_refresh[pos] = Some(step_ordinal);
        }
        Ok(())
    }

    /// Select per-head keep sets from the plan and importance scores, then
    /// drop every prompt KV entry outside them. Response entries and
    /// attention/FFN outputs are untouched. Idempotent on an empty cache,
    /// which is how the offline path avoids ever materializing evicted
    /// entries.
    pub fn compact(&mut self, plan: &BudgetPlan, importance: &ImportanceGrid) -> Result<()> {
        if plan.head_budgets.len() != self.num_layers
            || plan.head_budgets.iter().any(|row| row.len() != self.num_heads)
        {
            return Err(Error::config("compact: plan dimensions do not match the cache"));
        }
        if importance.scores.len() != self.num_layers
            || importance.scores.iter().any(|layer| {
                layer.len() != self.num_heads || layer.iter().any(|i| i.len() != self.prompt_len)
            })
        {
            return Err(Error::config("compact: importance dimensions do not match the cache"));
        }
        let mut keep_sets = Vec::with_capacity(self.num_layers);
        for layer in 0..self.num_layers {
            let mut per_head = Vec::with_capacity(self.num_heads);
            for head in 0..self.num_heads {
                let mut k = plan.head_budgets[layer][head];
                if k > self.prompt_len {
                    log::warn!(
                        "compact: budget {k} at layer {layer} head {head} exceeds prompt length {}, clamping",
                        self.prompt_len
                    );
                    k = self.prompt_len;
                }
                let keep = select_keep_set(&importance.scores[layer][head], k);
                for pos in 0..self.prompt_len {
                    if keep.binary_search(&pos).is_err() {
                        self.kv[layer][head][pos] = None;
                    }
                }
                per_head.push(keep);
            }
            keep_sets.push(per_head);
        }
        self.keep_sets = Some(keep_sets);
        Ok(())
    }

    /// Retained prompt KV entries per (layer, head).
    pub fn retained_prompt_counts(&self) -> Vec<Vec<usize>> {
        (0..self.num_layers)
            .map(|l| {
                (0..self.num_heads)
                    .map(|h| {
                        (0..self.prompt_len).filter(|&p| self.kv[l][h][p].is_some()).count()
                    })
                    .collect()
            })
            .collect()
    }

    /// Modeled bytes of all cached KV entries (2 tensors per entry).
    pub fn modeled_kv_bytes(&self, elem_bytes: u64) -> u64 {
        let mut entries = 0u64;
        for layer in &self.kv {
            for head in layer {
                entries += head.iter().filter(|e| e.is_some()).count() as u64;
            }
        }
        entries * 2 * self.head_dim as u64 * elem_bytes
    }

    /// Modeled bytes including attention/FFN outputs.
    pub fn modeled_bytes(&self, elem_bytes: u64) -> u64 {
        let model_dim = (self.num_heads * self.head_dim) as u64;
        let mut extra = 0u64;
        for layer in 0..self.num_layers {
            let stored = self.attn_out[layer].iter().filter(|e| e.is_some()).count()
                + self.ffn_out[layer].iter().filter(|e| e.is_some()).count();
            extra += stored as u64 * model_dim * elem_bytes;
        }
        self.modeled_kv_bytes(elem_bytes) + extra
    }

    /// Modeled KV bytes if every position were cached at every (layer, head).
    pub fn unpruned_kv_bytes(&self, elem_bytes: u64) -> u64 {
        2 * self.seq_len as u64
            * self.num_heads as u64
            * self.head_dim as u64
            * elem_bytes
            * self.num_layers as u64
    }
}
