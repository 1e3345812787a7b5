//! Checkpoints, configuration files, experiment protocols and statistics.

mod checkpoint;
mod config;
mod experiments;
mod report;
mod stats;

pub use checkpoint::{
    load_checkpoint, read_manifest, save_checkpoint, BundleDigests, CheckpointBundle, TensorRecord, ADAPTER_FILE,
    BASE_FILE, FORMAT_VERSION, LM_HEAD_FILE, MANIFEST_FILE,
};
pub use config::{DataConfig, RunConfig};
pub use experiments::{
    ablate, attention_restore_regression, contamination, efficiency_suite, equivalence_suite, eval_retrieval,
    probe_pairs, random_prompts, retrieval_scores, ANLS_THRESHOLD, DEFAULT_CONTAMINATION_INPUTS, SAMPLE_TEMPERATURE,
    SAMPLE_TOP_P, TOST_ALPHA, TOST_EPSILON,
};
pub use report::{Check, Environment, ExperimentReport};
pub use stats::{
    average_ranks, paired_bootstrap_ci, tost_equivalence, wilcoxon_signed_rank, BootstrapResult, TostResult,
    WILCOXON_EXACT_MAX,
};
