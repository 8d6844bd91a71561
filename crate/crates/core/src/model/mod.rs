//! A deterministic bidirectional-attention transformer with iterative
//! denoising decoding.
//!
//! The model exists to exercise cache and eviction machinery, so it exposes
//! every internal tensor: per-head attention maps, per-sub-layer hidden
//! states, fresh feature bundles, and per-position logits. All math is f64
//! and all weights come from a seeded ChaCha stream, so identical configs
//! give bit-identical results everywhere.

mod decode;
mod forward;
mod params;
mod state;

pub use decode::{
    decode, stage1_importance, CacheRunStats, DecodeOptions, DecodeResult, EvictionConfig,
    StepSummary,
};
pub use forward::{
    forward_step, probe_values, sample_scores_from_step, AttentionMap, CacheMode, StepOutput,
};
pub(crate) use forward::apply_rotary as forward_rotary;
pub use params::{init_model, LayerParams, ModelParams};
pub use state::{remask, required_steps, DenoisingState, RemaskPolicy};

use crate::error::{Error, Result};

/// Static shape and seeding of the toy model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    /// Number of transformer layers (D).
    pub num_layers: usize,
    /// Number of attention heads per layer.
    pub num_heads: usize,
    /// Model width; must be divisible by `num_heads`.
    pub model_dim: usize,
    /// Vocabulary size including the reserved mask token.
    pub vocab_size: u32,
    /// Seed for the deterministic weight stream.
    pub seed: u64,
    /// Rotary position mixing on queries and keys. Disable to make attention
    /// a pure function of token identity (used by permutation tests).
    pub use_rotary: bool,
}

impl ModelConfig {
    pub fn new(num_layers: usize, num_heads: usize, model_dim: usize, vocab_size: u32, seed: u64) -> Self {
        ModelConfig { num_layers, num_heads, model_dim, vocab_size, seed, use_rotary: true }
    }

    /// Per-head dimension `d / N_h`.
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    /// The reserved mask token: the last vocabulary id.
    pub fn mask_token(&self) -> u32 {
        self.vocab_size - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::config("num_layers must be >= 1"));
        }
        if self.num_heads == 0 {
            return Err(Error::config("num_heads must be >= 1"));
        }
        if self.model_dim == 0 {
            return Err(Error::config("model_dim must be >= 1"));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::config(format!(
                "d not divisible by N_h ({} % {} != 0)",
                self.model_dim, self.num_heads
            )));
        }
        if self.vocab_size < 2 {
            return Err(Error::config("vocab_size must be >= 2 (one real token plus mask)"));
        }
        Ok(())
    }
}
