//! The frozen transformer: patch embedding, pre-norm blocks with a pluggable
//! attention sub-layer, and the classifier read-out.

mod config;
mod forward;
mod params;

pub use config::ModelConfig;
pub(crate) use forward::layer_norm;
pub use forward::{
    block_forward, block_forward_rows, classify, extract_patches, patch_embed, AttentionHook,
    DenseAttention, IdentityAttention, TokenState,
};
pub use params::{
    AttentionParams, BackboneParams, BlockParams, FfnParams, LayerNormParams, INIT_STD,
};
