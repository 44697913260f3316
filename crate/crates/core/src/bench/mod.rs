//! Benchmark harness: datasets, answer extraction, evaluation with an
//! optional choice-shuffling ensemble, ablations, sweeps and reports.

mod dataset;
mod eval;
mod extract;
pub mod report;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use dataset::{load_dataset, parse_dataset, DatasetFormat, LoadOptions};
pub use eval::{
    ablate, evaluate, read_traces, summarize, sweep_docs, ablation_variants, vote, write_traces, BenchReport, Ensemble,
    EvalConfig, GateStats, ItemRecord, TraceRecord, Variant,
};
pub use extract::{extract_answer, Extracted, Presentation};

use crate::pipeline::PipelineError;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("{path}:{line}: {message}")]
    Format { path: PathBuf, line: usize, message: String },
    #[error("item `{id}`: gold label {gold:?} is not among the options")]
    MissingGold { id: String, gold: String },
    #[error("item `{id}`: {message}")]
    InvalidItem { id: String, message: String },
    #[error("duplicate item id `{0}`")]
    DuplicateItem(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("unknown dataset format `{0}` (expected native, medqa, medmcqa, mmlu, pubmedqa or bioasq)")]
    UnknownFormat(String),
    #[error("sweep needs retrieval enabled")]
    SweepWithoutRag,
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItemKind {
    /// Four lettered options.
    Mcq,
    /// Yes / No.
    Boolean,
    /// Yes / No / Maybe.
    Boolean3,
}

impl ItemKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ItemKind::Mcq => "mcq",
            ItemKind::Boolean => "boolean",
            ItemKind::Boolean3 => "boolean3",
        }
    }

    /// The option labels every item of this kind carries, in order.
    pub fn labels(self) -> &'static [&'static str] {
        match self {
            ItemKind::Mcq => &["A", "B", "C", "D"],
            ItemKind::Boolean => &["Yes", "No"],
            ItemKind::Boolean3 => &["Yes", "No", "Maybe"],
        }
    }
}

impl fmt::Display for ItemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ItemKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mcq" => Ok(ItemKind::Mcq),
            "boolean" => Ok(ItemKind::Boolean),
            "boolean3" => Ok(ItemKind::Boolean3),
            other => Err(format!("unknown item kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerOption {
    pub label: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchItem {
    pub id: String,
    pub question: String,
    pub kind: ItemKind,
    pub options: Vec<AnswerOption>,
    pub gold: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
}

impl BenchItem {
    /// Builds a validated item. Labels are fixed by `kind`; `gold` is
    /// matched case-insensitively and stored in canonical case. Yes/no
    /// kinds ignore `texts` and use their labels.
    pub fn new(
        id: impl Into<String>,
        question: impl Into<String>,
        kind: ItemKind,
        texts: &[String],
        gold: &str,
        context: Option<String>,
    ) -> Result<Self, BenchError> {
        let id = id.into();
        let question = question.into();
        let invalid = |message: String| BenchError::InvalidItem {
            id: id.clone(),
            message,
        };
        if question.trim().is_empty() {
            return Err(invalid("empty question".into()));
        }
        let labels = kind.labels();
        let options: Vec<AnswerOption> = match kind {
            ItemKind::Mcq => {
                if texts.len() != labels.len() {
                    return Err(invalid(format!("mcq needs exactly 4 options, got {}", texts.len())));
                }
                labels
                    .iter()
                    .zip(texts)
                    .map(|(l, t)| AnswerOption {
                        label: l.to_string(),
                        text: t.trim().to_string(),
                    })
                    .collect()
            }
            ItemKind::Boolean | ItemKind::Boolean3 => labels
                .iter()
                .map(|l| AnswerOption {
                    label: l.to_string(),
                    text: l.to_string(),
                })
                .collect(),
        };
        let gold_trimmed = gold.trim();
        let Some(canonical) = labels.iter().find(|l| l.eq_ignore_ascii_case(gold_trimmed)) else {
            return Err(BenchError::MissingGold {
                id,
                gold: gold.to_string(),
            });
        };
        Ok(Self {
            gold: canonical.to_string(),
            id,
            question,
            kind,
            options,
            context: context.filter(|c| !c.trim().is_empty()),
        })
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.options.iter().map(|o| o.label.as_str())
    }

    pub fn label_position(&self, label: &str) -> Option<usize> {
        self.options.iter().position(|o| o.label == label)
    }
}
