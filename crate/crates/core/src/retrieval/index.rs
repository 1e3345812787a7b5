use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::MultiVecEmbedding;
use crate::error::{Error, Result};
use crate::tensorcore::{kernels, Tensor};

const MAGIC: &[u8; 4] = b"MVIX";
const VERSION: u32 = 1;

/// Σ over query rows of the best dot product against any document row.
pub fn maxsim(q: &MultiVecEmbedding, d: &MultiVecEmbedding) -> Result<f32> {
    if q.dim() != d.dim() {
        return Err(Error::Dimension(format!(
            "query dim {} vs document dim {}",
            q.dim(),
            d.dim()
        )));
    }
    Ok(kernels::maxsim(q.vectors.data(), d.vectors.data(), q.dim()).0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub doc_id: String,
    pub score: f32,
}

/// Hits in descending score order; equal scores keep insertion order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub hits: Vec<Hit>,
}

impl RetrievalResult {
    pub fn rank_of(&self, doc_id: &str) -> Option<usize> {
        self.hits.iter().position(|h| h.doc_id == doc_id)
    }
}

/// Exhaustively scanned document store.
#[derive(Debug, Clone, PartialEq)]
pub struct Index {
    proj_dim: usize,
    entries: Vec<(String, MultiVecEmbedding)>,
    ids: HashSet<String>,
}

impl Index {
    pub fn new(proj_dim: usize) -> Self {
        Self {
            proj_dim,
            entries: Vec::new(),
            ids: HashSet::new(),
        }
    }

    pub fn proj_dim(&self) -> usize {
        self.proj_dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, MultiVecEmbedding)] {
        &self.entries
    }

    pub fn add(&mut self, doc_id: impl Into<String>, embedding: MultiVecEmbedding) -> Result<()> {
        let doc_id = doc_id.into();
        if embedding.dim() != self.proj_dim {
            return Err(Error::Dimension(format!(
                "document {doc_id} has dim {}, index expects {}",
                embedding.dim(),
                self.proj_dim
            )));
        }
        if !self.ids.insert(doc_id.clone()) {
            return Err(Error::Config(format!("duplicate document id {doc_id}")));
        }
        self.entries.push((doc_id, embedding));
        Ok(())
    }

    /// Top `k` documents by MaxSim. `k` larger than the index returns all.
    pub fn search(&self, q: &MultiVecEmbedding, k: usize) -> Result<RetrievalResult> {
        if self.entries.is_empty() {
            return Err(Error::Empty("search over an empty index"));
        }
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        let mut scored = Vec::with_capacity(self.entries.len());
        for (i, (id, emb)) in self.entries.iter().enumerate() {
            scored.push((maxsim(q, emb)?, i, id));
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        Ok(RetrievalResult {
            hits: scored
                .into_iter()
                .take(k)
                .map(|(score, _, id)| Hit {
                    doc_id: id.clone(),
                    score,
                })
                .collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.proj_dim as u32).to_le_bytes())?;
        for (id, emb) in &self.entries {
            w.write_all(&(id.len() as u32).to_le_bytes())?;
            w.write_all(id.as_bytes())?;
            w.write_all(&(emb.num_tokens() as u32).to_le_bytes())?;
            w.write_all(&emb.vectors.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not an index file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported index version {version}")));
        }
        let proj_dim = read_u32(&mut r)? as usize;
        let mut index = Self::new(proj_dim);
        loop {
            let mut len = [0u8; 4];
            match r.read_exact(&mut len) {
                Ok(()) => {}
                Err(e) if e.kind() == ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e.into()),
            }
            let mut id = vec![0u8; u32::from_le_bytes(len) as usize];
            r.read_exact(&mut id)?;
            let id = String::from_utf8(id).map_err(|_| Error::Format("document id is not UTF-8".into()))?;
            let rows = read_u32(&mut r)? as usize;
            let mut bytes = vec![0u8; rows * proj_dim * 4];
            r.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let vectors = Tensor::matrix(rows, proj_dim, data)?;
            index.add(id.clone(), MultiVecEmbedding::new(vectors, id))?;
        }
        Ok(index)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
