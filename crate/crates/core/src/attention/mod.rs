//! Causal attention: monolithic reference, online-softmax recurrence, and
//! the chunked forward/backward that fetches KV chunks from the offload
//! store one at a time.

pub mod chunked;
pub mod online;
pub mod reference;

pub use chunked::{
    backward_chunked, backward_chunked_with_hook, forward_chunked, AttentionGrads, BackwardAudit,
    BlockKind, CausalChunkMask, ChunkedAttentionBwd, ChunkedAttentionFwd, EpochGrads,
    ForwardOutput, SavedForward, SparsityPlan,
};
pub use online::OnlineState;
pub use reference::{attention_reference, attention_reference_backward, attention_reference_planned};

/// Logit scale applied to every `q·kᵀ` product.
pub fn logit_scale(head_dim: usize) -> f64 {
    1.0 / (head_dim as f64).sqrt()
}
