//! Seeded weight initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::ModelConfig;
use crate::error::Result;

/// Share of each value/output projection that passes the input through
/// unchanged. The blend keeps a readable copy path from attended tokens into
/// the logits (the output head is tied to the embedding table) while the
/// random component still differentiates heads.
const PASSTHROUGH_MIX: f64 = 0.7;

/// Scale of the mask token's embedding. The placeholder must not inject a
/// large fixed prior into masked-position logits; retrieval has to come from
/// attention over the context instead.
const MASK_EMBED_SCALE: f64 = 0.1;

/// Token id 1 is the designated content-bearing token of the toy
/// vocabulary: its embedding is amplified so attention can tell it apart
/// from filler. Benchmark tasks plant it as the needle.
pub const CONTENT_TOKEN: u32 = 1;
const CONTENT_EMBED_SCALE: f64 = 2.0;

/// Extra damping on query projections. Keeps attention soft enough that a
/// head's output is a genuine mixture rather than a single dominant key.
const QUERY_SCALE: f64 = 0.6;

/// Per-layer projection matrices, all row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// Per head: `d_k x d` query projection.
    pub w_q: Vec<Vec<f64>>,
    /// Per head: `d_k x d` key projection.
    pub w_k: Vec<Vec<f64>>,
    /// Per head: `d_k x d` value projection.
    pub w_v: Vec<Vec<f64>>,
    /// `d x d` output projection over concatenated heads.
    pub w_o: Vec<f64>,
    /// `d_ff x d` first FFN projection.
    pub ffn_w1: Vec<f64>,
    /// `d x d_ff` second FFN projection.
    pub ffn_w2: Vec<f64>,
}

/// Complete weights for one model. The output head is tied to the embedding
/// table: logits are dot products of hidden states with token embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// `|V| x d` token embedding table, row-major.
    pub embedding: Vec<f64>,
    pub layers: Vec<LayerParams>,
}

/// FFN hidden width.
pub(crate) fn ffn_dim(model_dim: usize) -> usize {
    2 * model_dim
}

impl ModelParams {
    /// Embedding row of one token.
    pub fn embed(&self, token: u32) -> &[f64] {
        let d = self.config.model_dim;
        let start = token as usize * d;
        &self.embedding[start..start + d]
    }

    /// Logits of a hidden state against every token embedding.
    pub fn project_vocab(&self, hidden: &[f64]) -> Vec<f64> {
        let d = self.config.model_dim;
        (0..self.config.vocab_size as usize)
            .map(|v| crate::math::dot(&self.embedding[v * d..(v + 1) * d], hidden))
            .collect()
    }
}

fn draw(rng: &mut ChaCha8Rng, count: usize, scale: f64) -> Vec<f64> {
    (0..count)
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng) * scale)
        .collect()
}

/// Mix a block-slice identity into a per-head `d_k x d` projection: head `h`
/// passes through coordinates `[h*d_k, (h+1)*d_k)` of its input.
fn mix_head_passthrough(matrix: &mut [f64], head: usize, d_k: usize, d: usize) {
    for r in 0..d_k {
        for c in 0..d {
            let idx = r * d + c;
            matrix[idx] *= 1.0 - PASSTHROUGH_MIX;
            if c == head * d_k + r {
                matrix[idx] += PASSTHROUGH_MIX;
            }
        }
    }
}

/// Mix the identity into a square `d x d` projection.
fn mix_square_passthrough(matrix: &mut [f64], d: usize) {
    for r in 0..d {
        for c in 0..d {
            let idx = r * d + c;
            matrix[idx] *= 1.0 - PASSTHROUGH_MIX;
            if r == c {
                matrix[idx] += PASSTHROUGH_MIX;
            }
        }
    }
}

/// Populate all weights from one ChaCha stream in a fixed draw order:
/// embedding first, then per layer Q, K, V (head by head), output, FFN.
pub fn init_model(config: &ModelConfig) -> Result<ModelParams> {
    config.validate()?;
    let d = config.model_dim;
    let d_k = config.head_dim();
    let d_ff = ffn_dim(d);
    let proj_scale = 1.0 / (d as f64).sqrt();
    let ffn_scale = 1.0 / (d_ff as f64).sqrt();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut embedding = draw(&mut rng, config.vocab_size as usize * d, 1.0);
    let mask_row = config.mask_token() as usize * d;
    for x in &mut embedding[mask_row..mask_row + d] {
        *x *= MASK_EMBED_SCALE;
    }
    if CONTENT_TOKEN != config.mask_token() {
        let content_row = CONTENT_TOKEN as usize * d;
        for x in &mut embedding[content_row..content_row + d] {
            *x *= CONTENT_EMBED_SCALE;
        }
    }

    let mut layers = Vec::with_capacity(config.num_layers);
    for _ in 0..config.num_layers {
        let per_head = |scale: f64, mix: bool, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..config.num_heads)
                .map(|h| {
                    let mut m = draw(rng, d_k * d, scale);
                    if mix {
                        mix_head_passthrough(&mut m, h, d_k, d);
                    }
                    m
                })
                .collect()
        };
        let w_q = per_head(proj_scale * QUERY_SCALE, false, &mut rng);
        let w_k = per_head(proj_scale, false, &mut rng);
        let w_v = per_head(proj_scale, true, &mut rng);
        let mut w_o = draw(&mut rng, d * d, proj_scale);
        mix_square_passthrough(&mut w_o, d);
        let ffn_w1 = draw(&mut rng, d_ff * d, proj_scale);
        let ffn_w2 = draw(&mut rng, d * d_ff, ffn_scale);
        layers.push(LayerParams { w_q, w_k, w_v, w_o, ffn_w1, ffn_w2 });
    }

    Ok(ModelParams { config: config.clone(), embedding, layers })
}
