//! Seeded synthetic query/document corpus with known relevance.
//!
//! A fixed world defines `NUM_CONCEPTS` concepts, each with a prototype 4×4
//! patch and a token id. A document shows `DOC_CONCEPTS` distinct concepts as
//! noisy patches; its query names a subset of them; its caption lists all of
//! them in patch order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::{ModelInput, Patch, PATCH_DIM};
use crate::tokens::{ASK, EOS, FIRST_FREE, PAD};

pub const NUM_CONCEPTS: usize = 32;
pub const DOC_CONCEPTS: usize = 6;
pub const QUERY_CONCEPTS: usize = 4;
/// Queries are padded to this length.
pub const QUERY_LEN: usize = 6;
pub const PATCH_NOISE: f32 = 0.1;
pub const DEFAULT_PAIRS: usize = 2000;
pub const WORLD_SEED: u64 = 0x5eed_0f_c0ffee;

const MAGIC: &[u8; 4] = b"DHCP";
const VERSION: u32 = 1;

/// One training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub query: Vec<u32>,
    pub document: Vec<Patch>,
    pub caption: Vec<u32>,
}

impl Pair {
    pub fn query_input(&self) -> ModelInput {
        ModelInput::tokens(self.query.clone())
    }

    pub fn document_input(&self) -> ModelInput {
        ModelInput {
            patches: self.document.clone(),
            tokens: Vec::new(),
        }
    }

    /// Patches followed by the ask token: the generation prompt for this page.
    pub fn prompt(&self) -> ModelInput {
        ModelInput {
            patches: self.document.clone(),
            tokens: vec![ASK],
        }
    }

    /// Concept tokens named by the query (padding removed).
    pub fn query_concepts(&self) -> impl Iterator<Item = u32> + '_ {
        self.query.iter().copied().filter(|t| *t != PAD)
    }
}

/// Concept prototypes shared by every corpus.
#[derive(Debug, Clone)]
pub struct World {
    prototypes: Vec<Patch>,
}

impl Default for World {
    fn default() -> Self {
        Self::new(WORLD_SEED)
    }
}

impl World {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 1.0).expect("valid std");
        let prototypes = (0..NUM_CONCEPTS)
            .map(|_| std::array::from_fn(|_| normal.sample(&mut rng)))
            .collect();
        Self { prototypes }
    }

    pub fn token(concept: usize) -> u32 {
        FIRST_FREE + concept as u32
    }

    pub fn prototype(&self, concept: usize) -> &Patch {
        &self.prototypes[concept]
    }

    /// A random pair whose query names `QUERY_CONCEPTS` of the document's concepts.
    pub fn sample_pair(&self, rng: &mut ChaCha8Rng) -> Pair {
        let all: Vec<usize> = (0..NUM_CONCEPTS).collect();
        let concepts: Vec<usize> = all.choose_multiple(rng, DOC_CONCEPTS).copied().collect();
        let noise = Normal::new(0.0f32, PATCH_NOISE).expect("valid std");
        let document = concepts
            .iter()
            .map(|c| {
                let p = &self.prototypes[*c];
                std::array::from_fn(|i| p[i] + noise.sample(rng))
            })
            .collect();
        let mut named: Vec<usize> = concepts.clone();
        named.shuffle(rng);
        let mut query: Vec<u32> = named[..QUERY_CONCEPTS].iter().map(|c| Self::token(*c)).collect();
        query.resize(QUERY_LEN, PAD);
        let mut caption: Vec<u32> = concepts.iter().map(|c| Self::token(*c)).collect();
        caption.push(EOS);
        Pair {
            query,
            document,
            caption,
        }
    }
}

/// Training pairs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub pairs: Vec<Pair>,
}

impl Corpus {
    /// `n` pairs drawn with `seed` from the default world.
    pub fn synthetic(seed: u64, n: usize) -> Self {
        let world = World::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            pairs: (0..n).map(|_| world.sample_pair(&mut rng)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.pairs.len() as u32).to_le_bytes())?;
        w.write_all(&(PATCH_DIM as u32).to_le_bytes())?;
        for p in &self.pairs {
            write_ids(w, &p.query)?;
            w.write_all(&(p.document.len() as u32).to_le_bytes())?;
            for patch in &p.document {
                for v in patch {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            write_ids(w, &p.caption)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a corpus file".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported corpus version {version}")));
        }
        let n = read_u32(r)? as usize;
        let patch_dim = read_u32(r)? as usize;
        if patch_dim != PATCH_DIM {
            return Err(Error::Format(format!("patch size {patch_dim}, expected {PATCH_DIM}")));
        }
        let mut pairs = Vec::with_capacity(n);
        for _ in 0..n {
            let query = read_ids(r)?;
            let patches = read_u32(r)? as usize;
            let mut document = Vec::with_capacity(patches);
            for _ in 0..patches {
                let mut patch = [0.0f32; PATCH_DIM];
                for v in &mut patch {
                    let mut b = [0u8; 4];
                    r.read_exact(&mut b)?;
                    *v = f32::from_le_bytes(b);
                }
                document.push(patch);
            }
            let caption = read_ids(r)?;
            pairs.push(Pair {
                query,
                document,
                caption,
            });
        }
        Ok(Self { pairs })
    }
}

fn write_ids(w: &mut impl Write, ids: &[u32]) -> Result<()> {
    w.write_all(&(ids.len() as u32).to_le_bytes())?;
    for id in ids {
        w.write_all(&id.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_ids(r: &mut impl Read) -> Result<Vec<u32>> {
    let n = read_u32(r)? as usize;
    (0..n).map(|_| read_u32(r)).collect()
}

/// Held-out retrieval benchmark: one relevant document per query.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub pairs: Vec<Pair>,
}

impl EvalSet {
    /// `n` pairs whose queries match exactly one document in the pool.
    pub fn held_out(seed: u64, n: usize) -> Self {
        let world = World::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Keep this stream disjoint from the one training corpora use.
        rng.set_stream(1);
        let mut pairs: Vec<Pair> = Vec::with_capacity(n);
        while pairs.len() < n {
            let candidate = world.sample_pair(&mut rng);
            let ambiguous = pairs.iter().any(|p| {
                covers(&p.caption, &candidate.query) || covers(&candidate.caption, &p.query)
            });
            if !ambiguous {
                pairs.push(candidate);
            }
        }
        Self { pairs }
    }

    pub fn doc_id(i: usize) -> String {
        format!("doc-{i:04}")
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn covers(caption: &[u32], query: &[u32]) -> bool {
    query.iter().filter(|t| **t != PAD).all(|t| caption.contains(t))
}
