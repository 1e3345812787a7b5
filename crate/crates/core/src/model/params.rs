use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::tensorcore::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Embedding,
    LmHead,
    Base,
    Featurizer,
    Adapter,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub role: ParamRole,
    pub tensor: Tensor,
}

/// Owns every weight of a backbone. Tied tensors are a single entry referenced
/// by two [`ParamId`] holders.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

/// 256-bit SHA-256 digest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s).ok()?;
        Some(Self(bytes.try_into().ok()?))
    }
}

impl std::fmt::Display for Digest {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.to_hex())
    }
}

pub fn digest_bytes(bytes: &[u8]) -> Digest {
    Digest(Sha256::digest(bytes).into())
}

impl ParamStore {
    pub fn push(&mut self, name: impl Into<String>, role: ParamRole, tensor: Tensor) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            role,
            tensor,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.entries()
            .filter(|(_, e)| e.tensor.requires_grad)
            .map(|(id, _)| id)
            .collect()
    }

    /// Number of scalars in tensors with `requires_grad` set.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.tensor.requires_grad)
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn clear_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.grad = None;
        }
    }

    /// Digest over names and raw bytes of every entry whose role passes `keep`.
    pub fn digest_where(&self, keep: impl Fn(ParamRole) -> bool) -> Digest {
        let mut h = Sha256::new();
        for e in self.entries.iter().filter(|e| keep(e.role)) {
            h.update(e.name.as_bytes());
            h.update((e.tensor.numel() as u64).to_le_bytes());
            for v in e.tensor.data() {
                h.update(v.to_le_bytes());
            }
        }
        Digest(h.finalize().into())
    }
}

pub fn tensor_digest(t: &Tensor) -> Digest {
    digest_bytes(&t.to_le_bytes())
}
