//! The JSON run configuration: corpus and index locations, encoders,
//! reranker, model backends, pipeline switches and evaluation settings.
//!
//! Unknown keys are rejected at every level. Relative paths are resolved
//! against the directory holding the config file.
//!
//! ```json
//! {
//!   "chunks": "chunks.jsonl",
//!   "index": {"path": "corpus.idx", "seed": 7},
//!   "encoder": {"kind": "hash", "dims": 64},
//!   "reranker": {"kind": "overlap"},
//!   "backends": {"default": {"scripted": "rules.jsonl"}},
//!   "pipeline": {"retrieve_n": 5}
//! }
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bench::EvalConfig;
use crate::corpus::{ChunkCatalog, ChunkPolicy};
use crate::embed::{DualEncoder, Encoder, HashEncoder, RemoteEncoder};
use crate::http::EndpointConfig;
use crate::modelgw::{Backend, Gateway, RemoteChatBackend, Role, ScriptedBackend};
use crate::pipeline::{Pipeline, PipelineConfig};
use crate::rerank::{OverlapF1Scorer, RemoteScorer, RerankConfig, Reranker, Scorer};
use crate::retrieve::{Retriever, TwoStageRetriever};
use crate::vindex::{Index, IndexParams};
use crate::Error;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Hash,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub dims: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub endpoint: Option<EndpointConfig>,
    #[serde(default)]
    pub batch_size: Option<usize>,
}

impl EncoderSpec {
    pub fn build(&self) -> Result<Arc<dyn Encoder>, ConfigError> {
        if self.dims == 0 {
            return Err(ConfigError::Invalid("encoder dims must be positive".into()));
        }
        Ok(match self.kind {
            EncoderKind::Hash => Arc::new(HashEncoder::new(self.dims, self.seed)),
            EncoderKind::Remote => {
                let ep = self
                    .endpoint
                    .as_ref()
                    .ok_or_else(|| ConfigError::Invalid("remote encoder needs an `endpoint`".into()))?;
                let enc = RemoteEncoder::new(ep, self.dims);
                Arc::new(match self.batch_size {
                    Some(b) => enc.with_batch_size(b),
                    None => enc,
                })
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RerankerKind {
    #[default]
    Overlap,
    Remote,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RerankerSpec {
    pub kind: RerankerKind,
    pub endpoint: Option<EndpointConfig>,
    pub batch_size: Option<usize>,
}

impl RerankerSpec {
    pub fn build(&self) -> Result<Arc<dyn Scorer>, ConfigError> {
        Ok(match self.kind {
            RerankerKind::Overlap => Arc::new(OverlapF1Scorer),
            RerankerKind::Remote => {
                let ep = self
                    .endpoint
                    .as_ref()
                    .ok_or_else(|| ConfigError::Invalid("remote reranker needs an `endpoint`".into()))?;
                Arc::new(RemoteScorer::new(ep, self.batch_size.unwrap_or(32)))
            }
        })
    }
}

/// Exactly one of `scripted` (a rules file) or `endpoint` (a chat server).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSpec {
    pub scripted: Option<PathBuf>,
    pub endpoint: Option<EndpointConfig>,
    pub model: Option<String>,
}

impl BackendSpec {
    pub fn build(&self) -> Result<Arc<dyn Backend>, Error> {
        match (&self.scripted, &self.endpoint) {
            (Some(path), None) => Ok(Arc::new(ScriptedBackend::from_file(path)?)),
            (None, Some(ep)) => Ok(Arc::new(RemoteChatBackend::new(ep, self.model.clone()))),
            _ => Err(ConfigError::Invalid("a backend needs exactly one of `scripted` or `endpoint`".into()).into()),
        }
    }
}

/// Per-role backends; roles without their own entry use `default`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendsSpec {
    pub default: Option<BackendSpec>,
    pub know: Option<BackendSpec>,
    pub dag: Option<BackendSpec>,
    pub medical: Option<BackendSpec>,
}

impl BackendsSpec {
    pub fn for_role(&self, role: Role) -> Option<&BackendSpec> {
        let own = match role {
            Role::Know => &self.know,
            Role::Dag => &self.dag,
            Role::Medical => &self.medical,
        };
        own.as_ref().or(self.default.as_ref())
    }
}

/// Index location and HNSW parameters; dims come from the encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexSpec {
    pub path: PathBuf,
    #[serde(default)]
    pub max_neighbors: Option<usize>,
    #[serde(default)]
    pub ef_construction: Option<usize>,
    #[serde(default)]
    pub ef_search: Option<usize>,
    #[serde(default)]
    pub level_probability: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl IndexSpec {
    pub fn params(&self, dims: usize) -> IndexParams {
        let mut p = IndexParams::new(dims).with_seed(self.seed);
        if let Some(v) = self.max_neighbors {
            p.max_neighbors = v;
        }
        if let Some(v) = self.ef_construction {
            p.ef_construction = v;
        }
        if let Some(v) = self.ef_search {
            p.ef_search = v;
        }
        if let Some(v) = self.level_probability {
            p.level_probability = v;
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub chunks: Option<PathBuf>,
    #[serde(default)]
    pub chunk_policy: ChunkPolicy,
    #[serde(default)]
    pub index: Option<IndexSpec>,
    #[serde(default)]
    pub encoder: Option<EncoderSpec>,
    /// Separate query-side encoder; the passage encoder is used when absent.
    #[serde(default)]
    pub query_encoder: Option<EncoderSpec>,
    #[serde(default)]
    pub reranker: RerankerSpec,
    #[serde(default)]
    pub backends: BackendsSpec,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every field has a default")
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl Config {
    pub fn parse(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::parse(&text, path)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        if let Some(p) = &mut self.chunks {
            resolve(base, p);
        }
        if let Some(i) = &mut self.index {
            resolve(base, &mut i.path);
        }
        let backends = &mut self.backends;
        for spec in [&mut backends.default, &mut backends.know, &mut backends.dag, &mut backends.medical]
            .into_iter()
            .flatten()
        {
            if let Some(p) = &mut spec.scripted {
                resolve(base, p);
            }
        }
    }

    fn need<'a, T>(&self, v: &'a Option<T>, key: &str) -> Result<&'a T, ConfigError> {
        v.as_ref()
            .ok_or_else(|| ConfigError::Invalid(format!("`{key}` is required for this command")))
    }

    pub fn chunks_path(&self) -> Result<&Path, ConfigError> {
        self.need(&self.chunks, "chunks").map(PathBuf::as_path)
    }

    pub fn index_spec(&self) -> Result<&IndexSpec, ConfigError> {
        self.need(&self.index, "index")
    }

    pub fn dual_encoder(&self) -> Result<DualEncoder, ConfigError> {
        let passage = self.need(&self.encoder, "encoder")?.build()?;
        let query = match &self.query_encoder {
            Some(q) => q.build()?,
            None => passage.clone(),
        };
        Ok(DualEncoder::new(query, passage))
    }

    pub fn gateway(&self) -> Result<Gateway, Error> {
        let mut built = Vec::with_capacity(3);
        for role in Role::ALL {
            let spec = self
                .backends
                .for_role(role)
                .ok_or_else(|| ConfigError::Invalid(format!("no backend for the {role} role")))?;
            built.push(spec.build()?);
        }
        let medical = built.pop().expect("three roles");
        let dag = built.pop().expect("three roles");
        let know = built.pop().expect("three roles");
        Ok(Gateway::new(know, dag, medical).with_budgets(self.pipeline.budgets))
    }

    pub fn retriever(&self) -> Result<TwoStageRetriever, Error> {
        let encoder = self.dual_encoder()?;
        let index = Index::load(&self.index_spec()?.path)?;
        let catalog = ChunkCatalog::load(self.chunks_path()?)?;
        let reranker = Reranker::new(
            self.reranker.build()?,
            RerankConfig {
                coarse_k: self.pipeline.coarse_k,
                final_n: self.pipeline.retrieve_n,
            },
        )?;
        Ok(TwoStageRetriever::new(encoder, Arc::new(index), Arc::new(catalog), reranker))
    }

    /// Loads the index only when some run could retrieve.
    pub fn pipeline(&self, rag_needed: bool) -> Result<Pipeline, Error> {
        let retriever: Option<Arc<dyn Retriever>> = if rag_needed {
            Some(Arc::new(self.retriever()?))
        } else {
            None
        };
        Ok(Pipeline::new(self.gateway()?, retriever, self.pipeline.clone())?)
    }
}
