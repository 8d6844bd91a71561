//! Binary attention traces: a carrier for mask-query attention inputs and
//! sub-layer hidden states, dumpable from the toy model or any external
//! stack.
//!
//! Layout (little-endian): 8-byte magic `MKVTRC01`; five u32 dims
//! (layers, heads, n_p, n_m, d_k); f32 arrays row-major in declared order
//! (all Q_mask per layer per head, all K_full, all h_in, all h_out);
//! a u32 length-prefixed UTF-8 manifest.

use std::collections::BTreeMap;
use std::path::Path;

use crate::budget::SampleScores;
use crate::error::{Error, Result};
use crate::eviction::ImportanceGrid;
use crate::model::StepOutput;
use crate::scoring::{layer_importance, mask_attention, mask_voting, prompt_preference, MaskSegment};

const MAGIC: &[u8; 8] = b"MKVTRC01";

/// Tensor dimensions carried by a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceDims {
    pub num_layers: u32,
    pub num_heads: u32,
    /// Prompt key count.
    pub n_p: u32,
    /// Mask query/key count.
    pub n_m: u32,
    pub head_dim: u32,
}

impl TraceDims {
    /// Full key count `n_p + n_m`.
    pub fn n(&self) -> u32 {
        self.n_p + self.n_m
    }

    /// Model width `num_heads * head_dim`.
    pub fn model_dim(&self) -> u32 {
        self.num_heads * self.head_dim
    }

    fn element_count(&self) -> u128 {
        let (d, h) = (self.num_layers as u128, self.num_heads as u128);
        let (n_p, n_m, d_k) = (self.n_p as u128, self.n_m as u128, self.head_dim as u128);
        let n = n_p + n_m;
        let dim = h * d_k;
        d * h * n_m * d_k + d * h * n * d_k + 2 * d * n * dim
    }
}

/// Free-form provenance carried inside the trace.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TraceManifest {
    pub source: String,
    pub created: String,
}

impl TraceManifest {
    fn encode(&self) -> Vec<u8> {
        format!("source={}\ncreated={}\n", self.source, self.created).into_bytes()
    }

    fn decode(bytes: &[u8], offset: u64) -> Result<Self> {
        let text = std::str::from_utf8(bytes)
            .map_err(|_| Error::parse_at_offset(offset, "manifest is not valid UTF-8"))?;
        let mut source = String::new();
        let mut created = String::new();
        for line in text.lines() {
            if let Some(v) = line.strip_prefix("source=") {
                source = v.to_string();
            } else if let Some(v) = line.strip_prefix("created=") {
                created = v.to_string();
            }
        }
        Ok(TraceManifest { source, created })
    }
}

/// Captured attention inputs for scoring, plus the hidden-state pairs that
/// feed layer importance.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub dims: TraceDims,
    /// Per (layer, head): `n_m x d_k` row-major mask queries.
    pub q_mask: Vec<Vec<Vec<f32>>>,
    /// Per (layer, head): `n x d_k` row-major keys (prompt keys first).
    pub k_full: Vec<Vec<Vec<f32>>>,
    /// Per layer: `n x d` attention sub-layer inputs.
    pub h_in: Vec<Vec<f32>>,
    /// Per layer: `n x d` attention sub-layer outputs.
    pub h_out: Vec<Vec<f32>>,
    pub manifest: TraceManifest,
}

fn rows_f64(flat: &[f32], cols: usize) -> Vec<Vec<f64>> {
    flat.chunks(cols).map(|row| row.iter().map(|&x| x as f64).collect()).collect()
}

impl AttentionTrace {
    fn validate(&self) -> Result<()> {
        let d = self.dims.num_layers as usize;
        let h = self.dims.num_heads as usize;
        let n = self.dims.n() as usize;
        let d_k = self.dims.head_dim as usize;
        let dim = self.dims.model_dim() as usize;
        if self.dims.num_layers == 0
            || self.dims.num_heads == 0
            || self.dims.n_p == 0
            || self.dims.n_m == 0
            || self.dims.head_dim == 0
        {
            return Err(Error::config("trace dims must all be nonzero"));
        }
        let shape_ok = self.q_mask.len() == d
            && self.k_full.len() == d
            && self.h_in.len() == d
            && self.h_out.len() == d
            && self.q_mask.iter().all(|l| {
                l.len() == h && l.iter().all(|m| m.len() == self.dims.n_m as usize * d_k)
            })
            && self.k_full.iter().all(|l| l.len() == h && l.iter().all(|m| m.len() == n * d_k))
            && self.h_in.iter().all(|m| m.len() == n * dim)
            && self.h_out.iter().all(|m| m.len() == n * dim);
        if !shape_ok {
            return Err(Error::config("trace arrays do not match the declared dims"));
        }
        Ok(())
    }

    /// Mask-query rows of one head as f64.
    pub fn q_mask_rows(&self, layer: usize, head: usize) -> Vec<Vec<f64>> {
        rows_f64(&self.q_mask[layer][head], self.dims.head_dim as usize)
    }

    /// Key rows of one head as f64.
    pub fn k_full_rows(&self, layer: usize, head: usize) -> Vec<Vec<f64>> {
        rows_f64(&self.k_full[layer][head], self.dims.head_dim as usize)
    }

    /// Recompute calibration scores from the trace.
    pub fn sample_scores(&self) -> Result<SampleScores> {
        let d = self.dims.num_layers as usize;
        let h = self.dims.num_heads as usize;
        let dim = self.dims.model_dim() as usize;
        let n_p = self.dims.n_p as usize;
        let n = self.dims.n() as usize;
        let prompt_cols: Vec<usize> = (0..n_p).collect();
        let mask_cols: Vec<usize> = (n_p..n).collect();
        let mut layers = Vec::with_capacity(d);
        let mut heads = Vec::with_capacity(d);
        for layer in 0..d {
            let h_in = rows_f64(&self.h_in[layer], dim);
            let h_out = rows_f64(&self.h_out[layer], dim);
            layers.push(layer_importance(&h_in, &h_out)?.value.clamp(0.0, 2.0));
            let mut prefs = Vec::with_capacity(h);
            for head in 0..h {
                let a = mask_attention(
                    &self.q_mask_rows(layer, head),
                    &self.k_full_rows(layer, head),
                    self.dims.head_dim as usize,
                )?;
                prefs.push(prompt_preference(&a, &prompt_cols, &mask_cols)?.value.clamp(0.0, 1.0));
            }
            heads.push(prefs);
        }
        Ok(SampleScores { layer_importance: layers, head_preference: heads })
    }

    /// Mask-voting importance per (layer, head) recomputed from the trace.
    pub fn importance_grid(&self, segment: MaskSegment) -> Result<ImportanceGrid> {
        let d = self.dims.num_layers as usize;
        let h = self.dims.num_heads as usize;
        let mut scores = Vec::with_capacity(d);
        for layer in 0..d {
            let mut per_head = Vec::with_capacity(h);
            for head in 0..h {
                let mut a = mask_attention(
                    &self.q_mask_rows(layer, head),
                    &self.k_full_rows(layer, head),
                    self.dims.head_dim as usize,
                )?;
                a.n_p = self.dims.n_p as usize;
                per_head.push(mask_voting(&a, segment).scores);
            }
            scores.push(per_head);
        }
        Ok(ImportanceGrid { scores })
    }
}

/// Quantize one step of the toy model into a trace. Queries and keys are the
/// position-mixed vectors attention actually used, so trace-driven scoring
/// reproduces model-driven scoring up to f32 rounding.
pub fn trace_from_step(
    out: &StepOutput,
    params: &crate::model::ModelParams,
    masked: &[usize],
    prompt_len: usize,
    manifest: TraceManifest,
) -> Result<AttentionTrace> {
    let config = &params.config;
    let d_k = config.head_dim();
    let d = config.model_dim;
    let n = out.embeddings.len();
    if masked.is_empty() || prompt_len == 0 || prompt_len + masked.len() != n {
        return Err(Error::config(
            "trace_from_step expects a first-step layout: prompt then masks",
        ));
    }
    // Recompute the projections the step used; cheaper than carrying Q
    // through StepOutput and exact because the weights are deterministic.
    let state_tokens_hidden = |layer: usize| -> &Vec<Vec<f64>> { out.attn_input(layer) };

    let mut q_mask = Vec::with_capacity(config.num_layers);
    let mut k_full = Vec::with_capacity(config.num_layers);
    let mut h_in_out = Vec::with_capacity(config.num_layers);
    let mut h_out_out = Vec::with_capacity(config.num_layers);
    for (layer_idx, layer) in params.layers.iter().enumerate() {
        let hidden = state_tokens_hidden(layer_idx);
        let mut q_heads = Vec::with_capacity(config.num_heads);
        let mut k_heads = Vec::with_capacity(config.num_heads);
        for head in 0..config.num_heads {
            let mut q_flat = Vec::with_capacity(masked.len() * d_k);
            for &pos in masked {
                let mut q = crate::math::matvec(&layer.w_q[head], d_k, d, &hidden[pos]);
                if config.use_rotary {
                    crate::model::forward_rotary(&mut q, pos);
                }
                q_flat.extend(q.iter().map(|&x| x as f32));
            }
            let mut k_flat = Vec::with_capacity(n * d_k);
            for (pos, h_vec) in hidden.iter().enumerate() {
                let mut k = crate::math::matvec(&layer.w_k[head], d_k, d, h_vec);
                if config.use_rotary {
                    crate::model::forward_rotary(&mut k, pos);
                }
                k_flat.extend(k.iter().map(|&x| x as f32));
            }
            q_heads.push(q_flat);
            k_heads.push(k_flat);
        }
        q_mask.push(q_heads);
        k_full.push(k_heads);
        h_in_out.push(hidden.iter().flatten().map(|&x| x as f32).collect());
        h_out_out
            .push(out.attn_sublayer_out[layer_idx].iter().flatten().map(|&x| x as f32).collect());
    }

    let trace = AttentionTrace {
        dims: TraceDims {
            num_layers: config.num_layers as u32,
            num_heads: config.num_heads as u32,
            n_p: prompt_len as u32,
            n_m: masked.len() as u32,
            head_dim: d_k as u32,
        },
        q_mask,
        k_full,
        h_in: h_in_out,
        h_out: h_out_out,
        manifest,
    };
    trace.validate()?;
    Ok(trace)
}

/// Serialize a trace to bytes.
pub fn encode_trace(trace: &AttentionTrace) -> Result<Vec<u8>> {
    trace.validate()?;
    let manifest = trace.manifest.encode();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    for dim in [
        trace.dims.num_layers,
        trace.dims.num_heads,
        trace.dims.n_p,
        trace.dims.n_m,
        trace.dims.head_dim,
    ] {
        out.extend_from_slice(&dim.to_le_bytes());
    }
    let mut push_array = |flat: &[f32]| {
        for x in flat {
            out.extend_from_slice(&x.to_le_bytes());
        }
    };
    for layer in &trace.q_mask {
        for head in layer {
            push_array(head);
        }
    }
    for layer in &trace.k_full {
        for head in layer {
            push_array(head);
        }
    }
    for layer in &trace.h_in {
        push_array(layer);
    }
    for layer in &trace.h_out {
        push_array(layer);
    }
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest);
    Ok(out)
}

/// Save a trace to a file.
pub fn save_trace(trace: &AttentionTrace, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_trace(trace)?)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + len > self.bytes.len() {
            return Err(Error::parse_at_offset(
                self.offset as u64,
                format!(
                    "truncated {what}: expected {len} bytes, found {}",
                    self.bytes.len() - self.offset
                ),
            ));
        }
        let slice = &self.bytes[self.offset..self.offset + len];
        self.offset += len;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let slice = self.take(4, what)?;
        Ok(u32::from_le_bytes(slice.try_into().unwrap()))
    }

    fn f32_array(&mut self, count: usize, what: &str) -> Result<Vec<f32>> {
        let start = self.offset;
        let slice = self.take(count * 4, what)?;
        let mut out = Vec::with_capacity(count);
        for (i, chunk) in slice.chunks_exact(4).enumerate() {
            let x = f32::from_le_bytes(chunk.try_into().unwrap());
            if !x.is_finite() {
                return Err(Error::parse_at_offset(
                    (start + i * 4) as u64,
                    format!("non-finite value in {what}"),
                ));
            }
            out.push(x);
        }
        Ok(out)
    }
}

/// Parse a trace from bytes, reporting byte-offset-located errors.
pub fn decode_trace(bytes: &[u8]) -> Result<AttentionTrace> {
    let mut r = Reader { bytes, offset: 0 };
    let magic = r.take(8, "magic")?;
    if magic != MAGIC {
        return Err(Error::parse_at_offset(0, format!("bad magic {magic:?}")));
    }
    let dims_offset = r.offset as u64;
    let dims = TraceDims {
        num_layers: r.u32("dims")?,
        num_heads: r.u32("dims")?,
        n_p: r.u32("dims")?,
        n_m: r.u32("dims")?,
        head_dim: r.u32("dims")?,
    };
    if dims.num_layers == 0
        || dims.num_heads == 0
        || dims.n_p == 0
        || dims.n_m == 0
        || dims.head_dim == 0
    {
        return Err(Error::parse_at_offset(dims_offset, "zero trace dimension"));
    }
    let expected = dims
        .element_count()
        .checked_mul(4)
        .filter(|&b| b <= u128::from(u64::MAX))
        .ok_or_else(|| Error::parse_at_offset(dims_offset, "dims overflow"))?;
    let remaining = (bytes.len() - r.offset) as u128;
    if remaining < expected {
        return Err(Error::parse_at_offset(
            r.offset as u64,
            format!("truncated payload: expected {expected} tensor bytes, found {remaining}"),
        ));
    }

    let d = dims.num_layers as usize;
    let h = dims.num_heads as usize;
    let n = dims.n() as usize;
    let d_k = dims.head_dim as usize;
    let dim = dims.model_dim() as usize;
    let n_m = dims.n_m as usize;

    let mut q_mask = Vec::with_capacity(d);
    for _ in 0..d {
        let mut heads = Vec::with_capacity(h);
        for _ in 0..h {
            heads.push(r.f32_array(n_m * d_k, "q_mask")?);
        }
        q_mask.push(heads);
    }
    let mut k_full = Vec::with_capacity(d);
    for _ in 0..d {
        let mut heads = Vec::with_capacity(h);
        for _ in 0..h {
            heads.push(r.f32_array(n * d_k, "k_full")?);
        }
        k_full.push(heads);
    }
    let mut h_in = Vec::with_capacity(d);
    for _ in 0..d {
        h_in.push(r.f32_array(n * dim, "h_in")?);
    }
    let mut h_out = Vec::with_capacity(d);
    for _ in 0..d {
        h_out.push(r.f32_array(n * dim, "h_out")?);
    }

    let manifest_len = r.u32("manifest length")? as usize;
    let manifest_offset = r.offset as u64;
    let manifest_bytes = r.take(manifest_len, "manifest")?;
    let manifest = TraceManifest::decode(manifest_bytes, manifest_offset)?;
    if r.offset != bytes.len() {
        return Err(Error::parse_at_offset(
            r.offset as u64,
            format!("unexpected trailing bytes: {}", bytes.len() - r.offset),
        ));
    }

    let trace = AttentionTrace { dims, q_mask, k_full, h_in, h_out, manifest };
    trace.validate().map_err(|e| Error::parse_at_offset(dims_offset, e.to_string()))?;
    Ok(trace)
}

/// Load a trace from a file.
pub fn load_trace(path: impl AsRef<Path>) -> Result<AttentionTrace> {
    decode_trace(&std::fs::read(path)?)
}

/// Per-head mask attention rows straight from a step output, keyed by
/// (layer, head); convenience for tests comparing trace- and model-driven
/// scoring.
pub fn model_mask_rows(
    out: &StepOutput,
    masked: &[usize],
    prompt_len: usize,
) -> Result<BTreeMap<(usize, usize), Vec<Vec<f64>>>> {
    let mut map = BTreeMap::new();
    for (layer, heads) in out.attention.iter().enumerate() {
        for head in 0..heads.len() {
            let a = out.mask_attention_for(layer, head, masked, prompt_len)?;
            map.insert((layer, head), a.rows);
        }
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_step, init_model, CacheMode, DenoisingState, ModelConfig};

    fn sample_trace() -> AttentionTrace {
        let config = ModelConfig::new(2, 2, 8, 16, 11);
        let params = init_model(&config).unwrap();
        let state = DenoisingState::initial(&config, &[1, 2, 3, 4, 5], 3, 3).unwrap();
        let out = forward_step(&params, &state, CacheMode::Off, false).unwrap();
        trace_from_step(
            &out,
            &params,
            &state.masked_positions(),
            state.prompt_len(),
            TraceManifest { source: "unit".into(), created: "2024-01-01".into() },
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let trace = sample_trace();
        let bytes = encode_trace(&trace).unwrap();
        let loaded = decode_trace(&bytes).unwrap();
        assert_eq!(trace, loaded);
    }

    #[test]
    fn corrupted_magic_fails_at_offset_zero() {
        let trace = sample_trace();
        let mut bytes = encode_trace(&trace).unwrap();
        bytes[0] ^= 0xff;
        match decode_trace(&bytes).unwrap_err() {
            Error::Parse { location, .. } => assert_eq!(location, "offset 0"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_reports_expected_vs_actual() {
        let trace = sample_trace();
        let mut bytes = encode_trace(&trace).unwrap();
        bytes.pop();
        let err = decode_trace(&bytes).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected") && msg.contains("found"), "got {msg}");
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let trace = sample_trace();
        let mut bytes = encode_trace(&trace).unwrap();
        bytes.push(0);
        let msg = decode_trace(&bytes).unwrap_err().to_string();
        assert!(msg.contains("trailing"), "got {msg}");
    }

    #[test]
    fn non_finite_payload_is_located() {
        let trace = sample_trace();
        let mut bytes = encode_trace(&trace).unwrap();
        // First tensor element sits right after magic + dims.
        let offset = 8 + 20;
        bytes[offset..offset + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        match decode_trace(&bytes).unwrap_err() {
            Error::Parse { location, .. } => assert_eq!(location, format!("offset {offset}")),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn trace_scores_match_model_scores_closely() {
        let config = ModelConfig::new(2, 2, 8, 16, 5);
        let params = init_model(&config).unwrap();
        let state = DenoisingState::initial(&config, &[3, 1, 4, 1, 5], 4, 4).unwrap();
        let out = forward_step(&params, &state, CacheMode::Off, false).unwrap();
        let masked = state.masked_positions();
        let trace = trace_from_step(&out, &params, &masked, 5, TraceManifest::default()).unwrap();

        let model_scores =
            crate::model::sample_scores_from_step(&out, &masked, 5).unwrap();
        let trace_scores = trace.sample_scores().unwrap();
        for (a, b) in model_scores.layer_importance.iter().zip(&trace_scores.layer_importance) {
            assert!((a - b).abs() < 1e-5, "layer importance drifted: {a} vs {b}");
        }
        for (ra, rb) in model_scores.head_preference.iter().zip(&trace_scores.head_preference) {
            for (a, b) in ra.iter().zip(rb) {
                assert!((a - b).abs() < 1e-5, "preference drifted: {a} vs {b}");
            }
        }
    }
}
