//! Dense vector index over chunk embeddings.
//!
//! Similarity is the raw dot product between the query vector and a stored
//! passage vector; encoders decide whether vectors are normalized. Two search
//! paths share one [`Index`]:
//!
//! * [`Index::search_exact`] scores every entry and is the reference answer.
//! * [`Index::search`] walks the HNSW graph: greedy descent through the upper
//!   layers, then a beam of width `max(ef_search, k)` on the base layer.
//!
//! Every result list is ordered by descending score with ties broken by
//! ascending chunk id, and every attached score is the exact dot product.

mod hnsw;
mod persist;

use std::cmp::Ordering;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};

use serde::{Deserialize, Serialize};

use crate::embed::{dot, EmbeddingVector};

pub use persist::{FORMAT_VERSION, MAGIC};

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("dimension mismatch: index has {expected} dims, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("duplicate chunk id `{0}`")]
    DuplicateId(String),
    #[error("invalid index parameters: {0}")]
    InvalidParams(String),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("index file I/O: {0}")]
    StoreIO(#[from] std::io::Error),
    #[error("unsupported index file: {0}")]
    FormatVersionMismatch(String),
    #[error("corrupt index file: {0}")]
    Corrupt(String),
}

type Result<T, E = IndexError> = std::result::Result<T, E>;

/// HNSW construction and search parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexParams {
    pub dims: usize,
    /// Degree bound on upper layers; the base layer allows twice this.
    #[serde(default = "IndexParams::default_max_neighbors")]
    pub max_neighbors: usize,
    #[serde(default = "IndexParams::default_ef_construction")]
    pub ef_construction: usize,
    #[serde(default = "IndexParams::default_ef_search")]
    pub ef_search: usize,
    /// Probability that a node reaching layer `l` also reaches `l + 1`.
    #[serde(default = "IndexParams::default_level_probability")]
    pub level_probability: f64,
    #[serde(default)]
    pub seed: u64,
}

impl IndexParams {
    pub fn new(dims: usize) -> Self {
        Self {
            dims,
            max_neighbors: Self::default_max_neighbors(),
            ef_construction: Self::default_ef_construction(),
            ef_search: Self::default_ef_search(),
            level_probability: Self::default_level_probability(),
            seed: 0,
        }
    }

    fn default_max_neighbors() -> usize {
        16
    }

    fn default_ef_construction() -> usize {
        200
    }

    fn default_ef_search() -> usize {
        128
    }

    fn default_level_probability() -> f64 {
        (-1.0f64).exp()
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(IndexError::InvalidParams(m.to_string()));
        if self.dims == 0 {
            return bad("dims must be positive");
        }
        if self.max_neighbors < 2 {
            return bad("max_neighbors must be at least 2");
        }
        if self.ef_construction == 0 || self.ef_search == 0 {
            return bad("ef values must be positive");
        }
        if !(self.level_probability > 0.0 && self.level_probability < 1.0) {
            return bad("level_probability must lie strictly between 0 and 1");
        }
        Ok(())
    }

    /// Degree bound for `layer`.
    pub fn layer_capacity(&self, layer: usize) -> usize {
        if layer == 0 {
            2 * self.max_neighbors
        } else {
            self.max_neighbors
        }
    }
}

/// Which retrieval stage produced a score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Coarse,
    Fine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDocument {
    pub chunk_id: String,
    pub score: f64,
    pub stage: Stage,
}

impl ScoredDocument {
    /// Descending score, then ascending chunk id.
    pub fn rank_cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then_with(|| self.chunk_id.cmp(&other.chunk_id))
    }
}

pub fn sort_ranked(docs: &mut [ScoredDocument]) {
    docs.sort_by(ScoredDocument::rank_cmp);
}

/// One vector to index.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub chunk_id: String,
    pub vector: EmbeddingVector,
}

impl IndexEntry {
    pub fn new(chunk_id: impl Into<String>, vector: EmbeddingVector) -> Self {
        Self {
            chunk_id: chunk_id.into(),
            vector,
        }
    }
}

/// An immutable HNSW graph plus the flat vector table it indexes.
pub struct Index {
    params: IndexParams,
    ids: Vec<String>,
    vectors: Vec<f64>,
    /// `links[node][layer]` for `layer` in `0..=level(node)`.
    links: Vec<Vec<Vec<u32>>>,
    entry: Option<u32>,
    searches: AtomicU64,
}

impl fmt::Debug for Index {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Index")
            .field("params", &self.params)
            .field("len", &self.len())
            .field("max_level", &self.max_level())
            .finish()
    }
}

impl Index {
    /// Builds the graph by inserting `entries` in order. Deterministic for a
    /// fixed seed and insertion order.
    pub fn build(entries: Vec<IndexEntry>, params: IndexParams) -> Result<Self> {
        params.validate()?;
        let mut seen = std::collections::HashSet::with_capacity(entries.len());
        let mut ids = Vec::with_capacity(entries.len());
        let mut vectors = Vec::with_capacity(entries.len() * params.dims);
        for e in entries {
            if e.vector.dims() != params.dims {
                return Err(IndexError::DimensionMismatch {
                    expected: params.dims,
                    got: e.vector.dims(),
                });
            }
            if !seen.insert(e.chunk_id.clone()) {
                return Err(IndexError::DuplicateId(e.chunk_id));
            }
            ids.push(e.chunk_id);
            vectors.extend_from_slice(e.vector.values());
        }
        let (links, entry) = hnsw::Builder::new(&params, &vectors).build();
        Ok(Self {
            params,
            ids,
            vectors,
            links,
            entry,
            searches: AtomicU64::new(0),
        })
    }

    pub fn params(&self) -> &IndexParams {
        &self.params
    }

    pub fn dims(&self) -> usize {
        self.params.dims
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn chunk_ids(&self) -> &[String] {
        &self.ids
    }

    pub fn entry_point(&self) -> Option<&str> {
        self.entry.map(|e| self.ids[e as usize].as_str())
    }

    pub fn max_level(&self) -> usize {
        self.entry.map_or(0, |e| self.links[e as usize].len() - 1)
    }

    pub fn level_of(&self, node: usize) -> usize {
        self.links[node].len() - 1
    }

    /// Neighbor lists of `node` on `layer`, as node positions.
    pub fn neighbors(&self, node: usize, layer: usize) -> &[u32] {
        &self.links[node][layer]
    }

    pub fn vector(&self, node: usize) -> &[f64] {
        let d = self.params.dims;
        &self.vectors[node * d..(node + 1) * d]
    }

    /// Number of search calls served so far (both paths).
    pub fn search_count(&self) -> u64 {
        self.searches.load(AtomicOrdering::Relaxed)
    }

    /// Approximate top-`k` by dot product.
    pub fn search(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<ScoredDocument>> {
        self.check_query(query, k)?;
        self.searches.fetch_add(1, AtomicOrdering::Relaxed);
        if self.is_empty() {
            return Ok(Vec::new());
        }
        if k >= self.len() {
            return Ok(self.exact(query.values(), k));
        }
        let ef = self.params.ef_search.max(k);
        let found = hnsw::search(self, query.values(), ef);
        let mut out: Vec<ScoredDocument> = found
            .into_iter()
            .map(|node| self.scored(node as usize, query.values()))
            .collect();
        sort_ranked(&mut out);
        out.truncate(k);
        Ok(out)
    }

    /// Exact top-`k` by dot product over every entry.
    pub fn search_exact(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<ScoredDocument>> {
        self.check_query(query, k)?;
        self.searches.fetch_add(1, AtomicOrdering::Relaxed);
        Ok(self.exact(query.values(), k))
    }

    fn exact(&self, query: &[f64], k: usize) -> Vec<ScoredDocument> {
        let mut all: Vec<ScoredDocument> = (0..self.len()).map(|i| self.scored(i, query)).collect();
        if k < all.len() {
            all.select_nth_unstable_by(k, ScoredDocument::rank_cmp);
            all.truncate(k);
        }
        sort_ranked(&mut all);
        all
    }

    fn scored(&self, node: usize, query: &[f64]) -> ScoredDocument {
        ScoredDocument {
            chunk_id: self.ids[node].clone(),
            score: dot(self.vector(node), query),
            stage: Stage::Coarse,
        }
    }

    fn check_query(&self, query: &EmbeddingVector, k: usize) -> Result<()> {
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        if query.dims() != self.dims() {
            return Err(IndexError::DimensionMismatch {
                expected: self.dims(),
                got: query.dims(),
            });
        }
        Ok(())
    }

    /// Checks graph well-formedness: degree bounds, live edge targets, no
    /// self loops, and a top-level entry point.
    pub fn check_graph(&self) -> Result<(), String> {
        let n = self.len();
        if self.links.len() != n {
            return Err(format!("{} link tables for {n} nodes", self.links.len()));
        }
        match self.entry {
            None if n > 0 => return Err("non-empty index without entry point".into()),
            Some(e) if e as usize >= n => return Err(format!("entry point {e} out of range")),
            _ => {}
        }
        let top = self.max_level();
        for (node, layers) in self.links.iter().enumerate() {
            if layers.is_empty() {
                return Err(format!("node {node} has no layer 0"));
            }
            if layers.len() - 1 > top {
                return Err(format!("node {node} is above the entry point level"));
            }
            for (layer, nbrs) in layers.iter().enumerate() {
                if nbrs.len() > self.params.layer_capacity(layer) {
                    return Err(format!("node {node} layer {layer} has degree {}", nbrs.len()));
                }
                for &nb in nbrs {
                    let nb = nb as usize;
                    if nb == node {
                        return Err(format!("node {node} links to itself on layer {layer}"));
                    }
                    if nb >= n || self.links[nb].len() <= layer {
                        return Err(format!("node {node} layer {layer} links to dead node {nb}"));
                    }
                }
            }
        }
        Ok(())
    }
}
