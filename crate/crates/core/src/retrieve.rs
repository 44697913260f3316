//! Two-stage retrieval: coarse HNSW candidates, then reranking.

use std::fmt::Debug;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::ChunkCatalog;
use crate::embed::{DualEncoder, EmbedError};
use crate::rerank::{Candidate, RerankError, Reranker};
use crate::vindex::{Index, IndexError, ScoredDocument};

#[derive(Debug, thiserror::Error)]
pub enum RetrieveError {
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Rerank(#[from] RerankError),
    #[error("chunk `{0}` is indexed but missing from the chunk store")]
    MissingChunk(String),
    #[error("final_n {final_n} exceeds coarse_k {coarse_k}")]
    TooMany { final_n: usize, coarse_k: usize },
}

/// A retrieved passage with the score that selected it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Passage {
    #[serde(flatten)]
    pub doc: ScoredDocument,
    pub text: String,
}

/// Anything that turns a question into ranked passages.
pub trait Retriever: Send + Sync + Debug {
    /// Returns at most `final_n` passages, best first.
    fn retrieve(&self, query: &str, final_n: usize) -> Result<Vec<Passage>, RetrieveError>;
}

/// Dense coarse search over an [`Index`] followed by a [`Reranker`].
#[derive(Debug, Clone)]
pub struct TwoStageRetriever {
    encoder: DualEncoder,
    index: Arc<Index>,
    catalog: Arc<ChunkCatalog>,
    reranker: Reranker,
}

impl TwoStageRetriever {
    pub fn new(encoder: DualEncoder, index: Arc<Index>, catalog: Arc<ChunkCatalog>, reranker: Reranker) -> Self {
        Self {
            encoder,
            index,
            catalog,
            reranker,
        }
    }

    pub fn index(&self) -> &Arc<Index> {
        &self.index
    }

    /// Coarse stage only: the top `coarse_k` by dot product.
    pub fn coarse(&self, query: &str) -> Result<Vec<ScoredDocument>, RetrieveError> {
        let q = self.encoder.encode_query(query)?;
        Ok(self.index.search(&q, self.reranker.config().coarse_k)?)
    }

    fn text_of(&self, id: &str) -> Result<String, RetrieveError> {
        self.catalog
            .get(id)
            .map(|c| c.text.clone())
            .ok_or_else(|| RetrieveError::MissingChunk(id.to_string()))
    }
}

impl Retriever for TwoStageRetriever {
    fn retrieve(&self, query: &str, final_n: usize) -> Result<Vec<Passage>, RetrieveError> {
        let coarse_k = self.reranker.config().coarse_k;
        if final_n > coarse_k {
            return Err(RetrieveError::TooMany { final_n, coarse_k });
        }
        let coarse = self.coarse(query)?;
        let candidates = coarse
            .iter()
            .map(|d| {
                Ok(Candidate {
                    chunk_id: d.chunk_id.clone(),
                    text: self.text_of(&d.chunk_id)?,
                })
            })
            .collect::<Result<Vec<_>, RetrieveError>>()?;
        let fine = self.reranker.with_final_n(final_n)?.rerank(query, &candidates)?;
        fine.into_iter()
            .map(|doc| {
                let text = self.text_of(&doc.chunk_id)?;
                Ok(Passage { doc, text })
            })
            .collect()
    }
}
