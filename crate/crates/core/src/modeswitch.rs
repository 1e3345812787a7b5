//! Switching one backbone between retrieval and generation.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generation::{generate, DecodeParams};
use crate::model::{
    build_bidirectional_mask, build_causal_mask, AttentionMask, Backbone, Digest, ModelInput, ParamRole,
};
use crate::retrieval::embed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Adapters on, full-attention layers bidirectional.
    Retrieval,
    /// Adapters off, full-attention layers causal.
    Generation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionPath {
    Causal,
    Bidirectional,
}

type MaskBuilder = fn(&[bool]) -> AttentionMask;

fn bidirectional_path(validity: &[bool]) -> AttentionMask {
    build_bidirectional_mask(&build_causal_mask(validity)).expect("input mask is causal")
}

/// Both mask paths of a full-attention layer, kept side by side, plus the
/// selector saying which one the next forward uses.
#[derive(Debug, Clone)]
pub struct LayerModeState {
    causal: MaskBuilder,
    bidirectional: MaskBuilder,
    active: AttentionPath,
}

impl Default for LayerModeState {
    fn default() -> Self {
        Self::new()
    }
}

impl LayerModeState {
    pub fn new() -> Self {
        Self {
            causal: build_causal_mask,
            bidirectional: bidirectional_path,
            active: AttentionPath::Causal,
        }
    }

    pub fn active(&self) -> AttentionPath {
        self.active
    }

    pub fn select(&mut self, path: AttentionPath) {
        self.active = path;
    }

    pub fn build(&self, validity: &[bool]) -> AttentionMask {
        match self.active {
            AttentionPath::Causal => (self.causal)(validity),
            AttentionPath::Bidirectional => (self.bidirectional)(validity),
        }
    }
}

/// Puts every adapter flag and full-attention selector into the state `mode`
/// requires. Idempotent; sliding-window layers and weights are not touched.
pub fn set_mode(model: &mut Backbone, mode: Mode) {
    match mode {
        Mode::Retrieval => {
            model.set_adapters_enabled(true);
            model.select_full_attention(AttentionPath::Bidirectional);
        }
        Mode::Generation => {
            model.set_adapters_enabled(false);
            if !model.faults.skip_attention_restore {
                model.select_full_attention(AttentionPath::Causal);
            }
        }
    }
}

/// The mode the model's flags currently satisfy, or `None` for a mixed state
/// (for example LoRA-on causal during joint training).
pub fn current_mode(model: &Backbone) -> Option<Mode> {
    let paths = model.full_attention_paths();
    let flags = model.adapters_enabled();
    if paths.iter().all(|p| *p == AttentionPath::Causal) && flags.iter().all(|e| !e) {
        Some(Mode::Generation)
    } else if paths.iter().all(|p| *p == AttentionPath::Bidirectional) && flags.iter().all(|e| *e) {
        Some(Mode::Retrieval)
    } else {
        None
    }
}

pub fn lm_head_digest(model: &Backbone) -> Digest {
    crate::model::tensor_digest(model.lm_head())
}

/// Digest over every non-adapter tensor, the LM head included.
pub fn base_checksum(model: &Backbone) -> Digest {
    model.params().digest_where(|role| role != ParamRole::Adapter)
}

pub fn adapter_checksum(model: &Backbone) -> Digest {
    model.params().digest_where(|role| role == ParamRole::Adapter)
}

/// Whether the LM head still hashes to the digest recorded at checkpoint time.
pub fn verify_lm_head(model: &Backbone, reference: Option<&Digest>) -> Result<bool> {
    let reference =
        reference.ok_or_else(|| Error::Integrity("no reference lm_head digest recorded".into()))?;
    Ok(lm_head_digest(model) == *reference)
}

/// Mean and per-iteration latency of Retrieval→Generation→Retrieval cycles.
pub fn time_round_trips(model: &mut Backbone, iterations: usize) -> Vec<Duration> {
    (0..iterations)
        .map(|_| {
            let start = Instant::now();
            set_mode(model, Mode::Retrieval);
            set_mode(model, Mode::Generation);
            set_mode(model, Mode::Retrieval);
            start.elapsed()
        })
        .collect()
}

/// One probe for the alternating embed/generate protocol.
#[derive(Debug, Clone)]
pub struct RoundTripInput {
    pub document: ModelInput,
    pub prompt: ModelInput,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundTripRecord {
    pub embedding_max_diff: f32,
    pub generation_identical: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundTripReport {
    pub records: Vec<RoundTripRecord>,
    pub max_embedding_diff: f32,
    pub identical_generation_fraction: f64,
}

impl RoundTripReport {
    pub fn clean(&self) -> bool {
        self.max_embedding_diff == 0.0 && self.identical_generation_fraction == 1.0
    }
}

/// Runs embed → generate → embed → generate on every input and compares the
/// two embeddings and the two generations.
pub fn mode_roundtrip_check(
    model: &mut Backbone,
    inputs: &[RoundTripInput],
    params: &DecodeParams,
) -> Result<RoundTripReport> {
    if inputs.is_empty() {
        return Err(Error::Empty("round-trip check needs at least one input"));
    }
    let mut records = Vec::with_capacity(inputs.len());
    for input in inputs {
        let e1 = embed(model, &input.document, false)?;
        let g1 = generate(model, &input.prompt, params)?;
        let e2 = embed(model, &input.document, false)?;
        let g2 = generate(model, &input.prompt, params)?;
        let embedding_max_diff = if e1.vectors.shape() == e2.vectors.shape() {
            e1.vectors.max_abs_diff(&e2.vectors)
        } else {
            f32::INFINITY
        };
        records.push(RoundTripRecord {
            embedding_max_diff,
            generation_identical: g1 == g2,
        });
    }
    let max_embedding_diff = records.iter().map(|r| r.embedding_max_diff).fold(0.0, f32::max);
    let identical = records.iter().filter(|r| r.generation_identical).count();
    Ok(RoundTripReport {
        identical_generation_fraction: identical as f64 / records.len() as f64,
        records,
        max_embedding_diff,
    })
}
