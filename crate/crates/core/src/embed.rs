//! Query and passage encoders.
//!
//! Retrieval scores a passage against a question by the dot product of the
//! query encoding and the passage encoding. The two sides are independent
//! [`Encoder`]s held by a [`DualEncoder`]; they may be the same backend.
//!
//! [`HashEncoder`] is a deterministic, dependency-free encoder for tests and
//! offline runs: each term is hashed into one of `dims` buckets with a ±1
//! sign, the bucket counts are summed and the result is L2-normalized. Texts
//! that share terms correlate; texts with disjoint terms are nearly
//! orthogonal.

use std::fmt::Debug;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::http::{EncodeRequest, EncodeResponse, EndpointConfig, HttpError, JsonEndpoint};
use crate::tokenize::terms;

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("embedding contains a non-finite value at position {0}")]
    NonFinite(usize),
    #[error("embedding has no components")]
    Empty,
    #[error("cannot encode empty text")]
    EmptyText,
    #[error("encoder unavailable after {attempts} attempt(s): {last}")]
    EncoderUnavailable { last: HttpError, attempts: u32 },
    #[error("encoder returned {got} vectors for {expected} texts")]
    CountMismatch { expected: usize, got: usize },
    #[error("embedding cache I/O: {0}")]
    CacheIO(#[from] std::io::Error),
    #[error("embedding cache line {line}: {message}")]
    CacheFormat { line: usize, message: String },
}

type Result<T, E = EmbedError> = std::result::Result<T, E>;

/// A finite, non-empty real vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(EmbedError::Empty);
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite(i));
        }
        Ok(Self(values))
    }

    pub fn dims(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }

    pub fn check_dims(&self, expected: usize) -> Result<()> {
        if self.dims() == expected {
            Ok(())
        } else {
            Err(EmbedError::DimensionMismatch {
                expected,
                got: self.dims(),
            })
        }
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = EmbedError;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A text encoder producing vectors of a fixed dimensionality.
pub trait Encoder: Send + Sync + Debug {
    fn dims(&self) -> usize;

    fn encode_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>>;

    fn encode(&self, text: &str) -> Result<EmbeddingVector> {
        let mut v = self.encode_batch(&[text])?;
        v.pop().ok_or(EmbedError::CountMismatch { expected: 1, got: 0 })
    }
}

/// Separate query-side and passage-side encoders.
#[derive(Debug, Clone)]
pub struct DualEncoder {
    query: Arc<dyn Encoder>,
    passage: Arc<dyn Encoder>,
}

impl DualEncoder {
    pub fn new(query: Arc<dyn Encoder>, passage: Arc<dyn Encoder>) -> Self {
        Self { query, passage }
    }

    /// Same backend on both sides.
    pub fn shared(encoder: Arc<dyn Encoder>) -> Self {
        Self::new(encoder.clone(), encoder)
    }

    pub fn query_dims(&self) -> usize {
        self.query.dims()
    }

    pub fn passage_dims(&self) -> usize {
        self.passage.dims()
    }

    pub fn encode_query(&self, text: &str) -> Result<EmbeddingVector> {
        encode_checked(self.query.as_ref(), text)
    }

    pub fn encode_passage(&self, text: &str) -> Result<EmbeddingVector> {
        encode_checked(self.passage.as_ref(), text)
    }

    pub fn encode_passages(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        if texts.iter().any(|t| t.trim().is_empty()) {
            return Err(EmbedError::EmptyText);
        }
        let out = self.passage.encode_batch(texts)?;
        if out.len() != texts.len() {
            return Err(EmbedError::CountMismatch {
                expected: texts.len(),
                got: out.len(),
            });
        }
        for v in &out {
            v.check_dims(self.passage.dims())?;
        }
        Ok(out)
    }
}

fn encode_checked(encoder: &dyn Encoder, text: &str) -> Result<EmbeddingVector> {
    if text.trim().is_empty() {
        return Err(EmbedError::EmptyText);
    }
    let v = encoder.encode(text)?;
    v.check_dims(encoder.dims())?;
    Ok(v)
}

// ---------------------------------------------------------------------------
// hash encoder

/// Seeded signed-hash bag-of-terms encoder, L2-normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashEncoder {
    dims: usize,
    seed: u64,
}

impl HashEncoder {
    pub fn new(dims: usize, seed: u64) -> Self {
        assert!(dims > 0, "dims must be positive");
        Self { dims, seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Unnormalized bucket sums. A text without any term maps to the zero
    /// vector, which is left unnormalized.
    fn project(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dims];
        for term in terms(text) {
            let h = term_hash(self.seed, &term);
            let bucket = (h % self.dims as u64) as usize;
            v[bucket] += if h >> 63 == 1 { -1.0 } else { 1.0 };
        }
        v
    }
}

impl Encoder for HashEncoder {
    fn dims(&self) -> usize {
        self.dims
    }

    fn encode_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        texts
            .iter()
            .map(|t| {
                let mut v = self.project(t);
                let norm = dot(&v, &v).sqrt();
                if norm > 0.0 {
                    v.iter_mut().for_each(|x| *x /= norm);
                }
                EmbeddingVector::new(v)
            })
            .collect()
    }
}

/// FNV-1a over the seed and the term bytes, finished with the splitmix64
/// mixer so the sign bit is well distributed.
pub fn term_hash(seed: u64, term: &str) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for b in seed.to_le_bytes().iter().chain(term.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(PRIME);
    }
    let mut z = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// remote encoder

/// Encoder served over HTTP: POST `{"texts": [...]}`, reply `{"vectors": [[...]]}`.
#[derive(Debug)]
pub struct RemoteEncoder {
    endpoint: JsonEndpoint,
    dims: usize,
    batch_size: usize,
}

impl RemoteEncoder {
    pub const DEFAULT_BATCH: usize = 32;

    pub fn new(cfg: &EndpointConfig, dims: usize) -> Self {
        Self {
            endpoint: JsonEndpoint::new(cfg),
            dims,
            batch_size: Self::DEFAULT_BATCH,
        }
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size.max(1);
        self
    }

    fn encode_one_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        let resp: EncodeResponse = self
            .endpoint
            .post(&EncodeRequest { texts: texts.to_vec() })
            .map_err(|(last, attempts)| EmbedError::EncoderUnavailable { last, attempts })?;
        if resp.vectors.len() != texts.len() {
            return Err(EmbedError::CountMismatch {
                expected: texts.len(),
                got: resp.vectors.len(),
            });
        }
        resp.vectors
            .into_iter()
            .map(|values| {
                let v = EmbeddingVector::new(values)?;
                v.check_dims(self.dims)?;
                Ok(v)
            })
            .collect()
    }
}

impl Encoder for RemoteEncoder {
    fn dims(&self) -> usize {
        self.dims
    }

    fn encode_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        let batches: Vec<&[&str]> = texts.chunks(self.batch_size).collect();
        if batches.len() <= 1 {
            return batches.first().map_or(Ok(Vec::new()), |b| self.encode_one_batch(b));
        }
        // the endpoint's limiter bounds how many of these run at once
        let results: Vec<Result<Vec<EmbeddingVector>>> = std::thread::scope(|s| {
            let handles: Vec<_> = batches
                .iter()
                .map(|b| s.spawn(move || self.encode_one_batch(b)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("encoder thread panicked")).collect()
        });
        let mut out = Vec::with_capacity(texts.len());
        for r in results {
            out.extend(r?);
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// embedding cache

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CachedEmbedding {
    pub id: String,
    pub values: EmbeddingVector,
}

/// Writes `{id, values}` JSONL.
pub fn write_cache(path: impl AsRef<Path>, entries: &[CachedEmbedding]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut w, e).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_cache(path: impl AsRef<Path>) -> Result<Vec<CachedEmbedding>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| EmbedError::CacheFormat {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
