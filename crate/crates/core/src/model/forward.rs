//! One denoising forward pass with optional feature-cache reuse.
//!
//! There is a single computation path: positions in the refresh set flow
//! through the full per-layer math, everything else substitutes its cached
//! sub-layer outputs into the residual stream and its cached K/V into the
//! attention columns. Running with every position refreshed is therefore
//! bit-identical to a cache-free pass.

use std::collections::BTreeMap;

use super::params::{ffn_dim, ModelParams};
use super::state::DenoisingState;
use crate::budget::SampleScores;
use crate::cache::{FeatureBundle, FeatureCache};
use crate::error::{Error, Result};
use crate::math::{dot, matvec, softmax};
use crate::scoring::{layer_importance, prompt_preference, MaskAttention};

/// Cache interaction of one forward call.
pub enum CacheMode<'a> {
    /// Recompute every position; no cache reads.
    Off,
    /// Read-only reuse of `cache` outside the `refresh` set.
    Cached { cache: &'a FeatureCache, refresh: &'a [usize] },
}

/// Row-stochastic attention rows for the refreshed query positions of one
/// (layer, head). Rows span all sequence columns; columns without a cached
/// or fresh key hold zero.
#[derive(Debug, Clone)]
pub struct AttentionMap {
    pub n_cols: usize,
    pub rows: BTreeMap<usize, Vec<f64>>,
}

/// Everything one forward step produces.
#[derive(Debug, Clone)]
pub struct StepOutput {
    /// Token embeddings, the layer-0 residual stream input.
    pub embeddings: Vec<Vec<f64>>,
    /// Per layer: attention sub-layer outputs (input plus attention update).
    pub attn_sublayer_out: Vec<Vec<Vec<f64>>>,
    /// Per layer: full layer outputs.
    pub layer_outputs: Vec<Vec<Vec<f64>>>,
    /// Per layer, per position: the residual update this layer contributed.
    pub deltas: Vec<Vec<Vec<f64>>>,
    /// Per layer, per head: attention rows of refreshed positions.
    pub attention: Vec<Vec<AttentionMap>>,
    /// Per layer: fresh feature bundles for refreshed positions.
    pub features: Vec<BTreeMap<usize, FeatureBundle>>,
    /// Vocabulary logits per projected position.
    pub logits: BTreeMap<usize, Vec<f64>>,
    /// The refresh set the step ran with, ascending.
    pub refreshed: Vec<usize>,
}

impl StepOutput {
    /// Input hidden states of layer `layer`'s attention sub-layer.
    pub fn attn_input(&self, layer: usize) -> &Vec<Vec<f64>> {
        if layer == 0 {
            &self.embeddings
        } else {
            &self.layer_outputs[layer - 1]
        }
    }

    /// Final-layer hidden states.
    pub fn final_hidden(&self) -> &Vec<Vec<f64>> {
        self.layer_outputs.last().unwrap_or(&self.embeddings)
    }

    /// Mask-query attention of one head, rows ordered by ascending masked
    /// position. Fails if a masked row was not computed this step.
    pub fn mask_attention_for(
        &self,
        layer: usize,
        head: usize,
        masked: &[usize],
        prompt_len: usize,
    ) -> Result<MaskAttention> {
        let map = &self.attention[layer][head];
        let mut rows = Vec::with_capacity(masked.len());
        for &pos in masked {
            let row = map.rows.get(&pos).ok_or_else(|| {
                Error::Protocol(format!("no attention row for masked position {pos}"))
            })?;
            rows.push(row.clone());
        }
        Ok(MaskAttention { rows, n_p: prompt_len, n_m: masked.len() })
    }

    /// Prompt-query attention rows of one head, ascending position order.
    pub fn prompt_rows_for(&self, layer: usize, head: usize, prompt_len: usize) -> Result<Vec<Vec<f64>>> {
        let map = &self.attention[layer][head];
        let mut rows = Vec::with_capacity(prompt_len);
        for pos in 0..prompt_len {
            let row = map.rows.get(&pos).ok_or_else(|| {
                Error::Protocol(format!("no attention row for prompt position {pos}"))
            })?;
            rows.push(row.clone());
        }
        Ok(rows)
    }
}

pub(crate) fn apply_rotary(v: &mut [f64], pos: usize) {
    let d = v.len();
    for i in 0..d / 2 {
        let theta = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
        let (sin, cos) = theta.sin_cos();
        let a = v[2 * i];
        let b = v[2 * i + 1];
        v[2 * i] = a * cos - b * sin;
        v[2 * i + 1] = a * sin + b * cos;
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Run one forward step. Logits are materialized at masked positions only
/// when `mask_only_projection` is set, at every position otherwise.
pub fn forward_step(
    params: &ModelParams,
    state: &DenoisingState,
    mode: CacheMode<'_>,
    mask_only_projection: bool,
) -> Result<StepOutput> {
    let config = &params.config;
    let n = state.seq_len();
    let d = config.model_dim;
    let d_k = config.head_dim();
    let heads = config.num_heads;
    let layers = config.num_layers;
    let d_ff = ffn_dim(d);

    if state.step() == 0 {
        return Err(Error::Protocol("forward_step called at step 0".into()));
    }
    if state.masked_count() == 0 {
        return Err(Error::Protocol("forward_step with empty mask set at step > 0".into()));
    }

    let (cache, refresh_flags): (Option<&FeatureCache>, Vec<bool>) = match mode {
        CacheMode::Off => (None, vec![true; n]),
        CacheMode::Cached { cache, refresh } => {
            if cache.num_layers() != layers
                || cache.num_heads() != heads
                || cache.head_dim() != d_k
                || cache.seq_len() != n
            {
                return Err(Error::Cache("cache shape does not match model and state".into()));
            }
            let mut flags = vec![false; n];
            for &pos in refresh {
                if pos >= n {
                    return Err(Error::Protocol(format!(
                        "refresh position {pos} outside sequence"
                    )));
                }
                flags[pos] = true;
            }
            (Some(cache), flags)
        }
    };
    let refreshed: Vec<usize> = (0..n).filter(|&p| refresh_flags[p]).collect();

    let embeddings: Vec<Vec<f64>> =
        state.tokens().iter().map(|&t| params.embed(t).to_vec()).collect();

    let mut attn_sublayer_out = Vec::with_capacity(layers);
    let mut layer_outputs = Vec::with_capacity(layers);
    let mut deltas = Vec::with_capacity(layers);
    let mut attention = Vec::with_capacity(layers);
    let mut features = Vec::with_capacity(layers);

    let mut hidden = embeddings.clone();
    for (layer_idx, layer) in params.layers.iter().enumerate() {
        // Fresh projections for refreshed positions. Keys carry the rotary
        // position mix, so cached keys reproduce attention exactly.
        let mut fresh_q: Vec<Vec<Option<Vec<f64>>>> = vec![vec![None; n]; heads];
        let mut fresh_k: Vec<Vec<Option<Vec<f64>>>> = vec![vec![None; n]; heads];
        let mut fresh_v: Vec<Vec<Option<Vec<f64>>>> = vec![vec![None; n]; heads];
        for head in 0..heads {
            for &pos in &refreshed {
                let mut q = matvec(&layer.w_q[head], d_k, d, &hidden[pos]);
                let mut k = matvec(&layer.w_k[head], d_k, d, &hidden[pos]);
                let v = matvec(&layer.w_v[head], d_k, d, &hidden[pos]);
                if config.use_rotary {
                    apply_rotary(&mut q, pos);
                    apply_rotary(&mut k, pos);
                }
                fresh_q[head][pos] = Some(q);
                fresh_k[head][pos] = Some(k);
                fresh_v[head][pos] = Some(v);
            }
        }

        // Attention columns per head: fresh positions plus cached entries.
        // Refreshed prompt positions evicted from this head stay invisible
        // to it; their fresh K/V is transient workspace, never a column.
        let mut columns: Vec<Vec<usize>> = Vec::with_capacity(heads);
        for head in 0..heads {
            let mut cols = Vec::with_capacity(n);
            for pos in 0..n {
                if refresh_flags[pos] {
                    if cache.map_or(true, |c| c.is_retained(layer_idx, head, pos)) {
                        cols.push(pos);
                    }
                    continue;
                }
                match cache.and_then(|c| c.kv_pair(layer_idx, head, pos)) {
                    Some(_) => cols.push(pos),
                    None => {
                        if pos >= state.prompt_len() {
                            return Err(Error::Cache(format!(
                                "missing cached KV for stale response position {pos}"
                            )));
                        }
                        // Evicted prompt entry: column simply absent.
                    }
                }
            }
            columns.push(cols);
        }

        let scale = 1.0 / (d_k as f64).sqrt();
        let mut maps: Vec<AttentionMap> =
            (0..heads).map(|_| AttentionMap { n_cols: n, rows: BTreeMap::new() }).collect();
        let mut attn_update: Vec<Option<Vec<f64>>> = vec![None; n];
        for &pos in &refreshed {
            let mut concat = Vec::with_capacity(d);
            for head in 0..heads {
                let q = fresh_q[head][pos].as_ref().unwrap();
                let cols = &columns[head];
                let scores: Vec<f64> = cols
                    .iter()
                    .map(|&c| {
                        let key: &[f64] = match &fresh_k[head][c] {
                            Some(k) => k,
                            None => &cache.unwrap().kv_pair(layer_idx, head, c).unwrap().key,
                        };
                        dot(q, key) * scale
                    })
                    .collect();
                let probs = softmax(&scores);

                let mut head_out = vec![0.0; d_k];
                let mut row = vec![0.0; n];
                for (idx, &c) in cols.iter().enumerate() {
                    let p = probs[idx];
                    row[c] = p;
                    let value: &[f64] = match &fresh_v[head][c] {
                        Some(v) => v,
                        None => &cache.unwrap().kv_pair(layer_idx, head, c).unwrap().value,
                    };
                    for (acc, x) in head_out.iter_mut().zip(value) {
                        *acc += p * x;
                    }
                }
                maps[head].rows.insert(pos, row);
                concat.extend(head_out);
            }
            attn_update[pos] = Some(matvec(&layer.w_o, d, d, &concat));
        }

        // Residual stream: fresh updates where computed, cached sub-layer
        // outputs elsewhere, identity carry for excluded prompt positions.
        let mut a_states = Vec::with_capacity(n);
        let mut h_states = Vec::with_capacity(n);
        let mut layer_deltas = Vec::with_capacity(n);
        let mut layer_features: BTreeMap<usize, FeatureBundle> = BTreeMap::new();
        for pos in 0..n {
            if let Some(attn_vec) = attn_update[pos].take() {
                let a: Vec<f64> =
                    hidden[pos].iter().zip(&attn_vec).map(|(x, u)| x + u).collect();
                let inner = matvec(&layer.ffn_w1, d_ff, d, &a);
                let activated: Vec<f64> = inner.iter().map(|&x| silu(x)).collect();
                let ffn_vec = matvec(&layer.ffn_w2, d, d_ff, &activated);
                let h: Vec<f64> = a.iter().zip(&ffn_vec).map(|(x, u)| x + u).collect();
                layer_deltas.push(attn_vec.iter().zip(&ffn_vec).map(|(x, y)| x + y).collect());
                layer_features.insert(
                    pos,
                    FeatureBundle {
                        keys: (0..heads).map(|h| fresh_k[h][pos].clone().unwrap()).collect(),
                        values: (0..heads).map(|h| fresh_v[h][pos].clone().unwrap()).collect(),
                        attn_out: Some(attn_vec),
                        ffn_out: Some(ffn_vec),
                    },
                );
                a_states.push(a);
                h_states.push(h);
            } else {
                let c = cache.unwrap();
                match (c.attn_out(layer_idx, pos), c.ffn_out(layer_idx, pos)) {
                    (Some(attn_c), Some(ffn_c)) => {
                        let a: Vec<f64> =
                            hidden[pos].iter().zip(attn_c).map(|(x, u)| x + u).collect();
                        let h: Vec<f64> = a.iter().zip(ffn_c).map(|(x, u)| x + u).collect();
                        layer_deltas
                            .push(attn_c.iter().zip(ffn_c).map(|(x, y)| x + y).collect());
                        a_states.push(a);
                        h_states.push(h);
                    }
                    (None, None) if pos < state.prompt_len() => {
                        // Prompt-state exclusion: nothing cached beyond K/V.
                        // The carried hidden state is never consumed.
                        layer_deltas.push(vec![0.0; d]);
                        a_states.push(hidden[pos].clone());
                        h_states.push(hidden[pos].clone());
                    }
                    _ => {
                        return Err(Error::Cache(format!(
                            "missing cached sub-layer outputs for stale position {pos}"
                        )));
                    }
                }
            }
        }

        attention.push(maps);
        features.push(layer_features);
        attn_sublayer_out.push(a_states);
        deltas.push(layer_deltas);
        hidden = h_states.clone();
        layer_outputs.push(h_states);
    }

    let mut logits = BTreeMap::new();
    let targets: Vec<usize> =
        if mask_only_projection { state.masked_positions() } else { (0..n).collect() };
    for pos in targets {
        logits.insert(pos, params.project_vocab(&hidden[pos]));
    }

    Ok(StepOutput {
        embeddings,
        attn_sublayer_out,
        layer_outputs,
        deltas,
        attention,
        features,
        logits,
        refreshed,
    })
}

/// Probe-layer value vectors (all heads concatenated) for the given
/// positions, used by the response-shift refresh test.
///
/// Probe layer 0 projects the current token embeddings; deeper probes use
/// the hidden states of the previous step, which lag one step behind fresh
/// token commits.
pub fn probe_values(
    params: &ModelParams,
    state: &DenoisingState,
    probe_layer: usize,
    prev_step: Option<&StepOutput>,
    positions: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let config = &params.config;
    if probe_layer >= config.num_layers {
        return Err(Error::config(format!(
            "probe layer {probe_layer} outside 0..{}",
            config.num_layers
        )));
    }
    let d = config.model_dim;
    let d_k = config.head_dim();
    let layer = &params.layers[probe_layer];
    let mut out = Vec::with_capacity(positions.len());
    for &pos in positions {
        let input: Vec<f64> = if probe_layer == 0 {
            params.embed(state.tokens()[pos]).to_vec()
        } else {
            match prev_step {
                Some(step) => step.layer_outputs[probe_layer - 1][pos].clone(),
                None => params.embed(state.tokens()[pos]).to_vec(),
            }
        };
        let mut concat = Vec::with_capacity(d);
        for head in 0..config.num_heads {
            concat.extend(matvec(&layer.w_v[head], d_k, d, &input));
        }
        out.push(concat);
    }
    Ok(out)
}

/// Layer importance and head prompt preference measured from one step.
pub fn sample_scores_from_step(
    out: &StepOutput,
    masked: &[usize],
    prompt_len: usize,
) -> Result<SampleScores> {
    let num_layers = out.layer_outputs.len();
    let num_heads = out.attention.first().map_or(0, Vec::len);
    let mut layer_scores = Vec::with_capacity(num_layers);
    let mut head_preferences = Vec::with_capacity(num_layers);
    let prompt_cols: Vec<usize> = (0..prompt_len).collect();
    for layer in 0..num_layers {
        let li = layer_importance(out.attn_input(layer), &out.attn_sublayer_out[layer])?;
        // Cosine keeps values in [-1, 1], but guard against rounding pushing
        // the mean a hair outside the profile bounds.
        layer_scores.push(li.value.clamp(0.0, 2.0));
        let mut prefs = Vec::with_capacity(num_heads);
        for head in 0..num_heads {
            let a = out.mask_attention_for(layer, head, masked, prompt_len)?;
            let p = prompt_preference(&a, &prompt_cols, masked)?;
            prefs.push(p.value.clamp(0.0, 1.0));
        }
        head_preferences.push(prefs);
    }
    Ok(SampleScores { layer_importance: layer_scores, head_preference: head_preferences })
}
