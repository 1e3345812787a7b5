//! Additive attention masks (`0` = attend, `-inf` = blocked).

use crate::tensorcore::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Causal,
    Bidirectional,
    SlidingCausal(usize),
}

/// `[1, 1, seq, seq]` additive mask plus the per-position validity it encodes.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    values: Tensor,
    validity: Vec<bool>,
    kind: MaskKind,
}

impl AttentionMask {
    fn from_rule(validity: &[bool], kind: MaskKind, allowed: impl Fn(usize, usize) -> bool) -> Self {
        assert!(!validity.is_empty(), "mask over an empty sequence");
        let n = validity.len();
        let mut data = vec![f32::NEG_INFINITY; n * n];
        for i in 0..n {
            for j in 0..n {
                if validity[i] && validity[j] && allowed(i, j) {
                    data[i * n + j] = 0.0;
                }
            }
        }
        Self {
            values: Tensor::new(vec![1, 1, n, n], data).expect("square mask"),
            validity: validity.to_vec(),
            kind,
        }
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn validity(&self) -> &[bool] {
        &self.validity
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn seq_len(&self) -> usize {
        self.validity.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.values.data()[i * self.seq_len() + j]
    }

    /// Rows `start..end` (queries) over all key columns, flattened.
    pub fn query_rows(&self, start: usize, end: usize) -> Vec<f32> {
        let n = self.seq_len();
        self.values.data()[start * n..end * n].to_vec()
    }

    pub fn is_symmetric(&self) -> bool {
        let n = self.seq_len();
        (0..n).all(|i| (0..n).all(|j| self.get(i, j).to_bits() == self.get(j, i).to_bits()))
    }
}

/// Lower-triangular over valid positions.
pub fn build_causal_mask(validity: &[bool]) -> AttentionMask {
    AttentionMask::from_rule(validity, MaskKind::Causal, |i, j| j <= i)
}

/// Causal restricted to the last `window` positions (`i - j < window`).
pub fn build_sliding_causal_mask(validity: &[bool], window: usize) -> AttentionMask {
    AttentionMask::from_rule(validity, MaskKind::SlidingCausal(window), |i, j| {
        j <= i && i - j < window
    })
}

/// Symmetric mask in which every valid position sees every other valid
/// position. Validity is read back from the causal mask's diagonal, which is
/// zero exactly at non-padding positions.
pub fn build_bidirectional_mask(causal: &AttentionMask) -> Result<AttentionMask> {
    if causal.kind != MaskKind::Causal {
        return Err(Error::Config(format!(
            "bidirectional mask must be derived from a causal mask, got {:?}",
            causal.kind
        )));
    }
    let n = causal.seq_len();
    let validity: Vec<bool> = (0..n).map(|i| causal.get(i, i) == 0.0).collect();
    Ok(AttentionMask::from_rule(&validity, MaskKind::Bidirectional, |_, _| true))
}
