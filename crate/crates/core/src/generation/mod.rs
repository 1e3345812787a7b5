//! Autoregressive decoding with a call-scoped KV cache.

mod anls;
mod cache;
mod decode;

pub use anls::{anls, normalized_similarity};
pub use cache::KvCache;
pub use decode::{
    decode_current_state, decode_current_state_nocache, generate, generate_nocache, sample_top_p, DecodeParams,
    Strategy,
};
