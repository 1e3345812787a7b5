//! Contrastive adapter training, the joint-training ablation, and the
//! freeze checks around both.

mod corpus;
mod loss;
mod optim;
mod schedule;
mod train;

pub use corpus::{
    Corpus, EvalSet, Pair, World, DEFAULT_PAIRS, DOC_CONCEPTS, NUM_CONCEPTS, QUERY_CONCEPTS, QUERY_LEN,
};
pub use loss::{colbert_loss, colbert_loss_graph};
pub use optim::AdamW;
pub use schedule::{lr_at, warmup_steps};
pub use train::{
    bf16_round, gradient_audit, is_generation_step, joint_total_steps, retrieval_batch_loss, train, train_joint, BatchKind,
    StepRecord, TrainConfig, TrainMode, TrainReport,
};
