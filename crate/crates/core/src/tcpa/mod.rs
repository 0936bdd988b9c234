//! Token-coordinated prompt attention: per-layer prompt pools, token-to-key
//! matching, the role mask, and the single masked attention pass.

mod block;
mod config;
mod mask;
mod matching;
mod pool;

pub use block::{
    reference_two_pass, tcpa_block_attention, DensePromptHook, LayerRecord, PoolVars,
    TcpaAttention, TcpaHook,
};
pub use config::{MatchDirection, TcpaConfig};
pub use mask::{assemble_mask, verify_mask, MaskMatrix, SlotLayout};
pub use matching::{binarize_topk, build_affinity, MatchResult};
pub use pool::{PoolRole, PromptPool};

#[cfg(test)]
mod tests;
