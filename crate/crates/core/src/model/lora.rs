use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamId;
use crate::error::Result;
use crate::tensorcore::{Graph, Tensor};

/// Low-rank branch `scale · B·(A·x)` attached beside a frozen projection.
///
/// The branch is never merged into the base weight: disabling it skips the
/// computation entirely, so the disabled output is the base output bit for bit.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    /// `[rank × in_dim]`
    pub a: ParamId,
    /// `[out_dim × rank]`
    pub b: ParamId,
    pub rank: usize,
    pub scale: f32,
    pub enabled: bool,
    pub dropout_p: f32,
}

/// A projection target: frozen `[out × in]` weight plus an optional adapter.
#[derive(Debug, Clone)]
pub struct LoraLinear {
    pub name: String,
    pub weight: ParamId,
    pub adapter: Option<LoraAdapter>,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// Dropout source for the adapter branch during training.
pub struct Dropout {
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self { rng }
    }

    pub fn keep_mask(&mut self, n: usize, p: f32) -> Vec<f32> {
        let keep = 1.0 / (1.0 - p);
        (0..n)
            .map(|_| if self.rng.random::<f32>() < p { 0.0 } else { keep })
            .collect()
    }
}

/// Borrowed adapter tensors for the standalone value-level forward.
#[derive(Debug, Clone, Copy)]
pub struct AdapterView<'a> {
    pub a: &'a Tensor,
    pub b: &'a Tensor,
    pub scale: f32,
    pub enabled: bool,
}

/// `x·Wᵀ + (enabled ? scale·(x·Aᵀ)·Bᵀ : 0)` for row-vector inputs `x[seq × in]`.
pub fn lora_linear_forward(x: &Tensor, base_weight: &Tensor, adapter: AdapterView<'_>) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let w = g.param(0, base_weight);
    let base = g.matmul_bt(xv, w)?;
    let out = if adapter.enabled {
        let a = g.param(1, adapter.a);
        let b = g.param(2, adapter.b);
        let xa = g.matmul_bt(xv, a)?;
        let xab = g.matmul_bt(xa, b)?;
        let scaled = g.scale(xab, adapter.scale)?;
        g.add(base, scaled)?
    } else {
        base
    };
    Ok(g.value(out).clone())
}
