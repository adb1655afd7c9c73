//! Sources of pretrained knowledge: semantic weights for channel pruning and
//! text embeddings for channel perturbation.
//!
//! The stubs are pure functions of their input and a seed. The file provider
//! serves vectors from an `UPEMB1` archive, typically written by an offline
//! exporter that runs the real image backbone and text encoder.
//!
//! `UPEMB1` layout, all integers little-endian:
//!
//! ```text
//! "UPEMB1" | dim: u32 | count: u32 | count × (len: u16, key: UTF-8) | count × dim × f32
//! ```

use std::collections::HashMap;
use std::fmt;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use rand::Rng;
use rand::SeedableRng;
use rand_xoshiro::SplitMix64;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tensor::Tensor;

/// Dimension of every provider embedding.
pub const EMBED_DIM: usize = 512;

const MAGIC: &[u8; 6] = b"UPEMB1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceTag {
    Stub,
    File,
}

impl fmt::Display for SourceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SourceTag::Stub => "stub",
            SourceTag::File => "file",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingVector {
    pub values: Vec<f32>,
    pub source_tag: SourceTag,
}

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Semantic descriptor of a pre-fused feature map.
pub trait SemanticProvider: Send + Sync {
    /// `features` is one sample, shaped (1, c, h, w). `pair_key` names the
    /// source pair for providers that look vectors up rather than compute them.
    fn semantic_embed(&self, features: &Tensor<f32>, pair_key: Option<&str>) -> Result<EmbeddingVector>;
}

pub trait TextProvider: Send + Sync {
    fn text_embed(&self, prompt: &str) -> Result<EmbeddingVector>;
}

/// Deterministic stand-in for both pretrained encoders.
#[derive(Clone, Copy, Debug)]
pub struct StubProvider {
    seed: u64,
}

fn stream(hash: u64) -> impl Iterator<Item = f32> {
    let mut rng = SplitMix64::seed_from_u64(hash);
    std::iter::repeat_with(move || rng.gen_range(-1.0f64..=1.0) as f32)
}

impl StubProvider {
    pub fn new(seed: u64) -> Self {
        StubProvider { seed }
    }

    fn hash(&self, domain: &[u8], bytes: &[u8]) -> u64 {
        let mut h = FnvHasher::default();
        h.write(&self.seed.to_le_bytes());
        h.write(domain);
        h.write(bytes);
        h.finish()
    }

    /// Row-major (EMBED_DIM × c) projection applied to channel means.
    fn projection(&self, c: usize) -> Vec<f32> {
        stream(self.hash(b"semantic", &(c as u64).to_le_bytes()))
            .take(EMBED_DIM * c)
            .collect()
    }
}

impl SemanticProvider for StubProvider {
    fn semantic_embed(&self, features: &Tensor<f32>, _pair_key: Option<&str>) -> Result<EmbeddingVector> {
        let s = features.shape();
        if s.n() != 1 || s.c() == 0 || s.plane() == 0 {
            return Err(Error::Dimension(format!("semantic stub needs one non-empty sample, got {s}")));
        }
        let inv = 1.0 / s.plane() as f32;
        let means: Vec<f32> = (0..s.c()).map(|c| features.plane(0, c).iter().sum::<f32>() * inv).collect();
        let proj = self.projection(s.c());
        let norm = 1.0 / (s.c() as f32).sqrt();
        let values = proj
            .chunks(s.c())
            .map(|row| row.iter().zip(&means).map(|(p, m)| p * m).sum::<f32>() * norm)
            .collect();
        Ok(EmbeddingVector { values, source_tag: SourceTag::Stub })
    }
}

impl TextProvider for StubProvider {
    fn text_embed(&self, prompt: &str) -> Result<EmbeddingVector> {
        if prompt.is_empty() {
            return Err(Error::Argument("text prompt must not be empty".into()));
        }
        Ok(EmbeddingVector {
            values: stream(self.hash(b"text", prompt.as_bytes())).take(EMBED_DIM).collect(),
            source_tag: SourceTag::Stub,
        })
    }
}

/// Keyed vectors of one dimension, in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    keys: Vec<String>,
    values: Vec<f32>,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable { dim, ..Default::default() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn insert(&mut self, key: impl Into<String>, values: &[f32]) -> Result<()> {
        let key = key.into();
        if values.len() != self.dim {
            return Err(Error::Dimension(format!(
                "entry {key:?} has {} values, table dim is {}",
                values.len(),
                self.dim
            )));
        }
        if key.len() > u16::MAX as usize {
            return Err(Error::Argument(format!("key of {} bytes is too long", key.len())));
        }
        if self.index.contains_key(&key) {
            return Err(Error::Argument(format!("duplicate key {key:?}")));
        }
        self.index.insert(key.clone(), self.keys.len());
        self.keys.push(key);
        self.values.extend_from_slice(values);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&[f32]> {
        self.index.get(key).map(|&i| &self.values[i * self.dim..(i + 1) * self.dim])
    }

    pub fn lookup(&self, key: &str) -> Result<&[f32]> {
        self.get(key).ok_or_else(|| Error::Lookup(key.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(14 + self.values.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.keys.len() as u32).to_le_bytes());
        for k in &self.keys {
            out.extend_from_slice(&(k.len() as u16).to_le_bytes());
            out.extend_from_slice(k.as_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses one table from the front of `bytes`, returning it and the
    /// number of bytes consumed. Offsets in errors are relative to `base`.
    pub fn parse_prefix(bytes: &[u8], base: usize) -> Result<(Self, usize)> {
        let mut pos = 0;
        let take = |pos: &mut usize, n: usize, what: &str| -> Result<&[u8]> {
            let slice = bytes.get(*pos..*pos + n).ok_or_else(|| Error::Format {
                offset: base + *pos,
                message: format!("truncated {what}: need {n} bytes, {} left", bytes.len().saturating_sub(*pos)),
            })?;
            *pos += n;
            Ok(slice)
        };
        if take(&mut pos, 6, "magic")? != MAGIC {
            return Err(Error::Format { offset: base, message: "bad magic, expected UPEMB1".into() });
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap()) as usize;
        let dim = u32_at(take(&mut pos, 4, "dim")?);
        let count = u32_at(take(&mut pos, 4, "count")?);
        let mut table = EmbeddingTable::new(dim);
        let mut keys = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let at = pos;
            let len = u16::from_le_bytes(take(&mut pos, 2, "key length")?.try_into().unwrap()) as usize;
            let raw = take(&mut pos, len, "key")?;
            let key = std::str::from_utf8(raw).map_err(|_| Error::Format {
                offset: base + at + 2,
                message: "key is not UTF-8".into(),
            })?;
            keys.push((at, key.to_string()));
        }
        let payload_len = count
            .checked_mul(dim)
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| Error::Format { offset: base + 6, message: "dim × count overflows".into() })?;
        let payload_at = pos;
        let payload = take(&mut pos, payload_len, "payload")?;
        for (i, (at, key)) in keys.into_iter().enumerate() {
            let vals: Vec<f32> = payload[i * dim * 4..(i + 1) * dim * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            table.insert(key, &vals).map_err(|e| Error::Format {
                offset: base + at,
                message: e.to_string(),
            })?;
        }
        debug_assert_eq!(payload_at + payload_len, pos);
        Ok((table, pos))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (table, used) = Self::parse_prefix(bytes, 0)?;
        if used != bytes.len() {
            return Err(Error::Format {
                offset: used,
                message: format!("{} trailing bytes", bytes.len() - used),
            });
        }
        Ok(table)
    }
}

pub fn save_embedding_file(path: &Path, table: &EmbeddingTable) -> Result<()> {
    write_atomic(path, &table.to_bytes())
}

pub fn load_embedding_file(path: &Path) -> Result<EmbeddingTable> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingTable::from_bytes(&bytes)
}

/// Serves stored vectors: prompts are looked up verbatim, semantic vectors by pair key.
#[derive(Clone, Debug)]
pub struct FileProvider {
    table: EmbeddingTable,
}

impl FileProvider {
    pub fn new(table: EmbeddingTable) -> Self {
        FileProvider { table }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(FileProvider::new(load_embedding_file(path)?))
    }

    pub fn table(&self) -> &EmbeddingTable {
        &self.table
    }

    fn vector(&self, key: &str) -> Result<EmbeddingVector> {
        let values = self.table.lookup(key)?.to_vec();
        if values.len() != EMBED_DIM {
            return Err(Error::Dimension(format!(
                "entry {key:?} has dim {}, expected {EMBED_DIM}",
                values.len()
            )));
        }
        Ok(EmbeddingVector { values, source_tag: SourceTag::File })
    }
}

impl SemanticProvider for FileProvider {
    fn semantic_embed(&self, _features: &Tensor<f32>, pair_key: Option<&str>) -> Result<EmbeddingVector> {
        let key = pair_key.ok_or_else(|| Error::Argument("file semantic provider needs a pair key".into()))?;
        self.vector(key)
    }
}

impl TextProvider for FileProvider {
    fn text_embed(&self, prompt: &str) -> Result<EmbeddingVector> {
        if prompt.is_empty() {
            return Err(Error::Argument("text prompt must not be empty".into()));
        }
        self.vector(prompt)
    }
}

/// The semantic and text provider used by one model run.
pub struct Providers {
    semantic: Box<dyn SemanticProvider>,
    text: Box<dyn TextProvider>,
}

impl Providers {
    pub fn new(semantic: Box<dyn SemanticProvider>, text: Box<dyn TextProvider>) -> Self {
        Providers { semantic, text }
    }

    pub fn stub(seed: u64) -> Self {
        Providers::new(Box::new(StubProvider::new(seed)), Box::new(StubProvider::new(seed)))
    }

    /// Both roles served from one `UPEMB1` file.
    pub fn from_file(path: &Path) -> Result<Self> {
        let p = FileProvider::load(path)?;
        Ok(Providers::new(Box::new(p.clone()), Box::new(p)))
    }

    pub fn semantic(&self) -> &dyn SemanticProvider {
        self.semantic.as_ref()
    }

    pub fn text(&self) -> &dyn TextProvider {
        self.text.as_ref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn stub_is_deterministic_and_sized() {
        let p = StubProvider::new(3);
        let a = p.text_embed("infrared and visible image fusion").unwrap();
        assert_eq!(a, p.text_embed("infrared and visible image fusion").unwrap());
        assert_eq!(a.dim(), EMBED_DIM);
        assert!(a.values.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_ne!(a, p.text_embed("medical image fusion").unwrap());
        for hw in [4, 9] {
            let f = Tensor::from_fn(Shape::new(1, 6, hw, hw), |_, c, y, x| (c + y * x) as f32 * 0.01);
            assert_eq!(p.semantic_embed(&f, None).unwrap().dim(), EMBED_DIM);
        }
    }

    #[test]
    fn empty_prompt_is_an_argument_error() {
        assert!(matches!(StubProvider::new(0).text_embed(""), Err(Error::Argument(_))));
    }

    #[test]
    fn corrupted_magic_and_truncation_report_offsets() {
        let mut t = EmbeddingTable::new(2);
        t.insert("k", &[1.0, 2.0]).unwrap();
        let mut b = t.to_bytes();
        b[0] = b'X';
        assert!(matches!(EmbeddingTable::from_bytes(&b), Err(Error::Format { offset: 0, .. })));
        let b = t.to_bytes();
        let err = EmbeddingTable::from_bytes(&b[..b.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 17, .. }), "{err}");
    }

    #[test]
    fn empty_table_errors_on_every_key() {
        let t = EmbeddingTable::from_bytes(&EmbeddingTable::new(EMBED_DIM).to_bytes()).unwrap();
        let p = FileProvider::new(t);
        assert!(matches!(p.text_embed("anything"), Err(Error::Lookup(k)) if k == "anything"));
    }
}
