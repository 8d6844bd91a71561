//! KV-cache eviction for diffusion language models, desk scale.
//!
//! The crate bundles a deterministic toy diffusion LM with bidirectional
//! attention, a per-layer feature cache with periodic/shift refresh rules,
//! mask-query importance scoring, hierarchical (layer then head) budget
//! allocation, top-k eviction, and a benchmark harness with trace and report
//! formats.
//!
//! Entry points: [`model::decode`] runs a full denoising loop,
//! [`harness::run_compare`] sweeps eviction policies against a full-cache
//! reference, and [`budget::plan_budget`] turns a calibration profile into
//! exact per-head budgets.

pub mod budget;
pub mod cache;
pub mod error;
pub mod eviction;
pub mod harness;
pub mod math;
pub mod model;
pub mod scoring;

pub use budget::{BudgetConfig, BudgetPlan, CalibrationProfile};
pub use cache::{CacheConfig, FeatureBundle, FeatureCache};
pub use error::{Error, Result};
pub use eviction::{EvictionReport, ImportanceGrid, SelectionPolicy};
pub use model::{
    decode, DecodeOptions, DecodeResult, DenoisingState, EvictionConfig, ModelConfig, ModelParams,
    RemaskPolicy, StepOutput,
};
pub use scoring::{HeadPreference, ImportanceVector, LayerImportance, MaskAttention, MaskSegment};
