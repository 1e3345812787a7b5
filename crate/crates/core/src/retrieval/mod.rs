//! Multi-vector embedding, late-interaction scoring and the in-memory index.

mod embed;
mod index;
mod metrics;

pub use embed::{embed, embed_current_state, embed_graph, retrieval_input, MultiVecEmbedding};
pub use index::{maxsim, Hit, Index, RetrievalResult};
pub use metrics::ndcg_at_k;
