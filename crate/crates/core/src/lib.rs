//! A toy transformer whose single backbone serves two heads: multi-vector
//! late-interaction retrieval (low-rank adapters on, bidirectional attention)
//! and autoregressive generation (adapters off, causal attention, KV cache).

pub mod error;
pub mod generation;
pub mod harness;
pub mod model;
pub mod modeswitch;
pub mod retrieval;
pub mod tensorcore;
pub mod tokens;
pub mod training;

pub use error::{Error, Result};
pub use generation::{generate, generate_nocache, DecodeParams, KvCache, Strategy};
pub use model::{Backbone, LayerKind, ModelConfig, ModelInput, Patch};
pub use modeswitch::{set_mode, Mode};
pub use retrieval::{embed, maxsim, ndcg_at_k, Index, MultiVecEmbedding, RetrievalResult};
pub use tensorcore::Tensor;
