use std::sync::atomic::{AtomicUsize, Ordering};

use super::params::{ParamId, ParamStore};
use crate::error::Result;
use crate::tensorcore::{kernels, Tensor};

/// Side length of a square image patch.
pub const PATCH_SIDE: usize = 4;
/// Values per flattened patch.
pub const PATCH_DIM: usize = PATCH_SIDE * PATCH_SIDE;

pub type Patch = [f32; PATCH_DIM];

/// Frozen stand-in for a vision encoder: a fixed seeded linear map from
/// flattened 4×4 patches to hidden vectors. It carries no adapter and no
/// gradient, so both modes see identical visual features.
#[derive(Debug)]
pub struct Featurizer {
    pub(crate) weight: ParamId,
    encoded: AtomicUsize,
}

impl Clone for Featurizer {
    fn clone(&self) -> Self {
        Self {
            weight: self.weight,
            encoded: AtomicUsize::new(self.encoded()),
        }
    }
}

impl Featurizer {
    pub(crate) fn new(weight: ParamId) -> Self {
        Self {
            weight,
            encoded: AtomicUsize::new(0),
        }
    }

    /// `[patches × hidden]` features.
    pub fn encode(&self, params: &ParamStore, patches: &[Patch]) -> Result<Tensor> {
        let w = params.get(self.weight);
        let hidden = w.rows();
        let flat: Vec<f32> = patches.iter().flatten().copied().collect();
        let out = kernels::matmul_bt(&flat, w.data(), patches.len(), PATCH_DIM, hidden);
        self.encoded.fetch_add(patches.len(), Ordering::Relaxed);
        Tensor::matrix(patches.len(), hidden, out)
    }

    /// Total number of patches encoded since construction.
    pub fn encoded(&self) -> usize {
        self.encoded.load(Ordering::Relaxed)
    }
}
