//! Desk-scale study of KV-cache policies for a frozen toy transformer:
//! train per-head retrieval/streaming gates by distillation, convert them
//! into a layer-exclusive assignment by an exact subset optimization, and
//! decode under full / head-partitioned / layer-exclusive cache policies
//! with exact memory and kernel-invocation accounting.

pub mod alpha;
pub mod attn;
pub mod cache;
pub mod data;
pub mod error;
pub mod model;
pub mod runtime;
pub mod train;
pub mod transport;

pub use alpha::{classify_heads, AlphaMatrix, Granularity, HeadKind};
pub use attn::{
    attention_probs, full_attention, mixed_attention, streaming_attention, AttnInput, AttnMask,
    StreamingConfig,
};
pub use cache::{analytic_streaming_positions, HeadStore, RingRows, RowBlock, RowSegment};
pub use data::{make_dataset, make_dataset_with_depths, make_sample, PasskeySpec};
pub use error::{Error, Result};
pub use model::{forward_full, forward_mixed, logits, HiddenStates, Model, ModelConfig};
pub use runtime::{
    decode_step, greedy_pick, prefill, run_generation, AlphaOverride, CachePolicy, Generation,
    KvCacheState, LayerPolicy, MemoryReport, StepMetrics,
};
pub use train::{
    alpha_gradient, distill_loss, reg_loss, train_alphas, train_alphas_from, LossBreakdown,
    TrainReport, TrainSample,
};
pub use transport::{
    assignment_cost, collapsed_groups, default_omega_grid, grid_search_omega, layer_budget,
    solve_enumerative, solve_greedy, OpLabel, SolutionFile, TransportSolution,
};
