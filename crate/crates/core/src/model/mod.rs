//! The toy dual-head transformer.

mod backbone;
mod config;
mod featurizer;
mod lora;
mod mask;
mod params;

pub use backbone::{count_trainable_params, Backbone, FaultInjection, ModelInput, RESIDUAL_GAIN};
pub use config::{LayerKind, ModelConfig};
pub use featurizer::{Featurizer, Patch, PATCH_DIM, PATCH_SIDE};
pub use lora::{lora_linear_forward, AdapterView, Dropout, LoraAdapter, LoraLinear};
pub use mask::{
    build_bidirectional_mask, build_causal_mask, build_sliding_causal_mask, AttentionMask, MaskKind,
};
pub use params::{digest_bytes, tensor_digest, Digest, ParamEntry, ParamId, ParamRole, ParamStore};
