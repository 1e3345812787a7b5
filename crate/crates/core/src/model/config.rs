use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Attention pattern of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LayerKind {
    /// Global attention; causal in generation, bidirectional in retrieval.
    Full,
    /// Local causal attention over the last `window` positions, in every mode.
    Sliding(usize),
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerKind::Full => write!(f, "full"),
            LayerKind::Sliding(w) => write!(f, "sliding:{w}"),
        }
    }
}

impl FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "full" => Ok(LayerKind::Full),
            other => other
                .strip_prefix("sliding:")
                .and_then(|w| w.parse::<usize>().ok())
                .filter(|w| *w >= 1)
                .map(LayerKind::Sliding)
                .ok_or_else(|| Error::Config(format!("unknown layer kind {other:?}"))),
        }
    }
}

impl TryFrom<String> for LayerKind {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<LayerKind> for String {
    fn from(k: LayerKind) -> String {
        k.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub layer_schedule: Vec<LayerKind>,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub proj_dim: usize,
    pub lora_rank: usize,
    pub lora_alpha: usize,
    pub lora_dropout: f32,
    pub tie_lm_head_to_embedding: bool,
    pub max_seq_len: usize,
    pub rope_theta: f32,
    pub norm_eps: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            hidden_dim: 64,
            num_layers: 4,
            layer_schedule: vec![
                LayerKind::Full,
                LayerKind::Sliding(8),
                LayerKind::Full,
                LayerKind::Sliding(8),
            ],
            num_heads: 4,
            ffn_dim: 128,
            proj_dim: 32,
            lora_rank: 16,
            lora_alpha: 64,
            lora_dropout: 0.197,
            tie_lm_head_to_embedding: false,
            max_seq_len: 256,
            rope_theta: 10_000.0,
            norm_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.hidden_dim == 0 || self.num_heads == 0 || !self.hidden_dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "hidden_dim {} must be a positive multiple of num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if !(self.hidden_dim / self.num_heads).is_multiple_of(2) {
            return fail("head dimension must be even for rotary encoding".into());
        }
        if self.lora_rank < 1 {
            return fail("lora_rank must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.lora_dropout) {
            return fail(format!("lora_dropout {} outside [0, 1)", self.lora_dropout));
        }
        if self.layer_schedule.len() != self.num_layers {
            return fail(format!(
                "layer_schedule has {} entries for {} layers",
                self.layer_schedule.len(),
                self.num_layers
            ));
        }
        if !self.layer_schedule.contains(&LayerKind::Full) {
            return fail("layer_schedule needs at least one full-attention layer".into());
        }
        if self.vocab_size <= crate::tokens::FIRST_FREE as usize {
            return fail(format!("vocab_size must exceed {}", crate::tokens::FIRST_FREE));
        }
        if self.ffn_dim == 0 || self.proj_dim == 0 || self.max_seq_len == 0 {
            return fail("ffn_dim, proj_dim and max_seq_len must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// `alpha / rank`.
    pub fn lora_scale(&self) -> f32 {
        self.lora_alpha as f32 / self.lora_rank as f32
    }
}
