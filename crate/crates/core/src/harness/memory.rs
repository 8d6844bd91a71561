//! Modeled KV-cache memory accounting.
//!
//! Storage is modeled for a bf16 deployment (2 bytes per element) even
//! though the engine computes in f64.

/// Modeled element size used throughout reports.
pub use crate::cache::MODELED_ELEM_BYTES;

/// Bytes to hold key and value states for `seq_len` positions across
/// `num_heads` heads of `head_dim`, times `num_layers`. The factor 2 covers
/// the key and value tensors.
pub fn kv_memory_bytes(
    seq_len: u64,
    num_heads: u64,
    head_dim: u64,
    elem_bytes: u64,
    num_layers: u64,
) -> u64 {
    2 * seq_len * num_heads * head_dim * elem_bytes * num_layers
}

/// Per-layer variant of [`kv_memory_bytes`].
pub fn kv_memory_bytes_per_layer(seq_len: u64, num_heads: u64, head_dim: u64, elem_bytes: u64) -> u64 {
    kv_memory_bytes(seq_len, num_heads, head_dim, elem_bytes, 1)
}
