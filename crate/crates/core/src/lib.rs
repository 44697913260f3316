//! Gated, DAG-decomposed retrieval-augmented generation.
//!
//! A question first meets a knowledge gate. Questions the answering model
//! claims to know are answered directly; the rest are split into a
//! dependency graph of sub-questions, each of which is gated again and,
//! when needed, answered over passages from a two-stage dense retriever.
//! A final synthesis call merges retrieved passages, a draft answer and the
//! sub-question answers.
//!
//! Every model call goes through [`modelgw::Gateway`], so the whole flow
//! runs against scripted backends with no model weights.

pub mod bench;
pub mod config;
pub mod corpus;
pub mod curate;
pub mod dag;
pub mod embed;
pub mod gate;
pub mod http;
pub mod modelgw;
pub mod pipeline;
pub mod rerank;
pub mod retrieve;
pub mod tokenize;
pub mod vindex;

pub use config::Config;
pub use pipeline::{Pipeline, PipelineConfig, PipelineResult};

/// Any error the library can return.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Corpus(#[from] corpus::CorpusError),
    #[error(transparent)]
    Embed(#[from] embed::EmbedError),
    #[error(transparent)]
    Index(#[from] vindex::IndexError),
    #[error(transparent)]
    Rerank(#[from] rerank::RerankError),
    #[error(transparent)]
    Retrieve(#[from] retrieve::RetrieveError),
    #[error(transparent)]
    Gateway(#[from] modelgw::GatewayError),
    #[error(transparent)]
    Gate(#[from] gate::GateError),
    #[error(transparent)]
    Dag(#[from] dag::DagError),
    #[error(transparent)]
    Pipeline(#[from] pipeline::PipelineError),
    #[error(transparent)]
    Curate(#[from] curate::CurateError),
    #[error(transparent)]
    Bench(#[from] bench::BenchError),
    #[error(transparent)]
    Config(#[from] config::ConfigError),
}

const IO_REPRS: [&str; 4] = ["Os {", "Kind(", "Custom {", "Error {"];

impl Error {
    /// Name of the innermost error variant, e.g. `BackendTimeout` for a
    /// timeout wrapped by the pipeline.
    pub fn name(&self) -> String {
        let debug = format!("{self:?}");
        let mut rest = debug.as_str();
        // Skip this enum's own wrapper variant.
        if let Some(i) = rest.find('(') {
            rest = &rest[i + 1..];
        }
        loop {
            let end = rest.find(|c: char| !c.is_alphanumeric() && c != '_').unwrap_or(rest.len());
            let ident = &rest[..end];
            let after = &rest[end..];
            let nested = after.strip_prefix('(').filter(|s| s.starts_with(|c: char| c.is_ascii_uppercase()));
            // std::io::Error debug forms are not ours to name
            let nested = nested.filter(|s| !IO_REPRS.iter().any(|r| s.starts_with(r)));
            match nested {
                Some(inner) => rest = inner,
                None => return ident.to_string(),
            }
        }
    }
}


/// Runs the code blocks of the book as doc-tests.
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $file:literal) => {
            #[doc = include_str!(concat!("../../../book/src/", $file))]
            mod $name {}
        };
    }
    chapter!(introduction, "introduction.md");
    chapter!(corpus, "corpus.md");
    chapter!(retrieval, "retrieval.md");
    chapter!(index_format, "index-format.md");
    chapter!(gate_and_plan, "gate-and-plan.md");
    chapter!(pipeline, "pipeline.md");
    chapter!(evaluation, "evaluation.md");
    chapter!(curation, "curation.md");
    chapter!(cli, "cli.md");
}
