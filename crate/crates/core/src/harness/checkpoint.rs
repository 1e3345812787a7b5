//! Checkpoint bundle: a JSON manifest plus separate little-endian `f32` blobs
//! for base weights, adapter weights and the LM head.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{tensor_digest, Backbone, Digest, ModelConfig, ParamRole, ParamStore};
use crate::modeswitch::{adapter_checksum, base_checksum, lm_head_digest};
use crate::tensorcore::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BASE_FILE: &str = "base.bin";
pub const ADAPTER_FILE: &str = "adapter.bin";
pub const LM_HEAD_FILE: &str = "lm_head.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub role: ParamRole,
    pub shape: Vec<usize>,
    pub file: String,
    pub offset: u64,
    pub byte_len: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleDigests {
    pub lm_head: String,
    /// Every non-adapter tensor, LM head included.
    pub base: String,
    pub adapters: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointBundle {
    pub format_version: u32,
    pub config: ModelConfig,
    pub has_adapters: bool,
    pub tensors: Vec<TensorRecord>,
    pub digests: BundleDigests,
}

impl CheckpointBundle {
    pub fn lm_head_digest(&self) -> Result<Digest> {
        Digest::from_hex(&self.digests.lm_head)
            .ok_or_else(|| Error::Format("lm_head digest is not 64 hex characters".into()))
    }
}

fn file_for(role: ParamRole) -> &'static str {
    match role {
        ParamRole::Adapter => ADAPTER_FILE,
        ParamRole::LmHead => LM_HEAD_FILE,
        ParamRole::Embedding | ParamRole::Base | ParamRole::Featurizer => BASE_FILE,
    }
}

/// Writes `model` into `dir` (created if missing) and returns the manifest.
pub fn save_checkpoint(model: &Backbone, dir: &Path) -> Result<CheckpointBundle> {
    fs::create_dir_all(dir)?;
    let mut blobs: Vec<(&str, Vec<u8>)> = [BASE_FILE, ADAPTER_FILE, LM_HEAD_FILE]
        .into_iter()
        .map(|f| (f, Vec::new()))
        .collect();
    let mut tensors = Vec::new();
    for (_, e) in model.params().entries() {
        let file = file_for(e.role);
        let blob = &mut blobs.iter_mut().find(|(f, _)| *f == file).expect("known file").1;
        let bytes = e.tensor.to_le_bytes();
        tensors.push(TensorRecord {
            name: e.name.clone(),
            role: e.role,
            shape: e.tensor.shape().to_vec(),
            file: file.to_string(),
            offset: blob.len() as u64,
            byte_len: bytes.len() as u64,
            sha256: tensor_digest(&e.tensor).to_hex(),
        });
        blob.extend_from_slice(&bytes);
    }
    for (file, bytes) in &blobs {
        let mut f = fs::File::create(dir.join(file))?;
        f.write_all(bytes)?;
    }
    let bundle = CheckpointBundle {
        format_version: FORMAT_VERSION,
        config: model.config().clone(),
        has_adapters: model.has_adapters(),
        tensors,
        digests: BundleDigests {
            lm_head: lm_head_digest(model).to_hex(),
            base: base_checksum(model).to_hex(),
            adapters: model.has_adapters().then(|| adapter_checksum(model).to_hex()),
        },
    };
    let manifest = serde_json::to_string_pretty(&bundle).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(bundle)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointBundle> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let bundle: CheckpointBundle = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
    if bundle.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            bundle.format_version
        )));
    }
    Ok(bundle)
}

/// Loads a bundle, verifying every tensor digest and the set digests.
pub fn load_checkpoint(dir: &Path) -> Result<(Backbone, CheckpointBundle)> {
    let bundle = read_manifest(dir)?;
    let mut blobs: Vec<(String, Vec<u8>)> = Vec::new();
    let mut store = ParamStore::default();
    for rec in &bundle.tensors {
        if rec.file != file_for(rec.role) {
            return Err(Error::Format(format!("{} stored in {}, expected {}", rec.name, rec.file, file_for(rec.role))));
        }
        if !blobs.iter().any(|(f, _)| *f == rec.file) {
            blobs.push((rec.file.clone(), fs::read(dir.join(&rec.file))?));
        }
        let blob = &blobs.iter().find(|(f, _)| *f == rec.file).expect("just read").1;
        let start = rec.offset as usize;
        let end = start + rec.byte_len as usize;
        let bytes = blob
            .get(start..end)
            .ok_or_else(|| Error::Format(format!("{} lies outside {}", rec.name, rec.file)))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut tensor = Tensor::new(rec.shape.clone(), data)?;
        if tensor_digest(&tensor).to_hex() != rec.sha256 {
            return Err(Error::Integrity(format!("tensor {} does not match its digest", rec.name)));
        }
        tensor.requires_grad = rec.role == ParamRole::Adapter;
        store.push(rec.name.clone(), rec.role, tensor);
    }
    let model = Backbone::from_parts(bundle.config.clone(), store, bundle.has_adapters)?;
    if lm_head_digest(&model).to_hex() != bundle.digests.lm_head {
        return Err(Error::Integrity("lm_head digest mismatch".into()));
    }
    if base_checksum(&model).to_hex() != bundle.digests.base {
        return Err(Error::Integrity("base weight digest mismatch".into()));
    }
    if bundle.has_adapters && Some(adapter_checksum(&model).to_hex()) != bundle.digests.adapters {
        return Err(Error::Integrity("adapter digest mismatch".into()));
    }
    Ok((model, bundle))
}
