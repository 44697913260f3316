//! Training-data curation: score screens, duplicate removal, diversity
//! selection and retrieval-augmented record construction.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::embed::{DualEncoder, EmbedError, EmbeddingVector};
use crate::vindex::{Index, IndexError};

#[derive(Debug, thiserror::Error)]
pub enum CurateError {
    #[error("embedding {index} has {found} dims, expected {expected}")]
    DimensionMismatch { index: usize, expected: usize, found: usize },
    #[error("m must be in 1..={n}, got {m}")]
    InvalidM { m: usize, n: usize },
    #[error("seed index {seed} out of range for {n} points")]
    InvalidSeed { seed: usize, n: usize },
    #[error("pool has {available} non-golden documents, {requested} distractors requested")]
    InsufficientPool { available: usize, requested: usize },
    #[error("a training record needs at least one golden document")]
    NoGolden,
    #[error("record id `{0}` appears more than once")]
    DuplicateId(String),
    #[error("record {id} has a non-finite quality score")]
    NonFiniteScore { id: String },
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Format { path: PathBuf, line: usize, message: String },
}

type Result<T, E = CurateError> = std::result::Result<T, E>;

/// Initial screen on the quality score.
pub const QUALITY_THRESHOLD: f64 = 9.0;
/// Second screen on the reward-model score.
pub const REWARD_THRESHOLD: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurationRecord {
    pub id: String,
    pub instruction: String,
    pub response: String,
    pub quality_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<EmbeddingVector>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreField {
    Quality,
    Reward,
}

impl CurationRecord {
    pub fn score(&self, field: ScoreField) -> Option<f64> {
        match field {
            ScoreField::Quality => Some(self.quality_score),
            ScoreField::Reward => self.reward_score,
        }
    }
}

/// Ids must be unique and quality scores finite.
pub fn validate_records(records: &[CurationRecord]) -> Result<()> {
    let mut seen = HashSet::new();
    for r in records {
        if !r.quality_score.is_finite() || r.reward_score.is_some_and(|s| !s.is_finite()) {
            return Err(CurateError::NonFiniteScore { id: r.id.clone() });
        }
        if !seen.insert(r.id.as_str()) {
            return Err(CurateError::DuplicateId(r.id.clone()));
        }
    }
    Ok(())
}

/// Keeps records whose quality score is at least `threshold`, in order.
pub fn filter_by_score(records: Vec<CurationRecord>, threshold: f64) -> Vec<CurationRecord> {
    filter_by_field(records, ScoreField::Quality, threshold)
}

/// Records lacking the field are dropped.
pub fn filter_by_field(records: Vec<CurationRecord>, field: ScoreField, threshold: f64) -> Vec<CurationRecord> {
    records
        .into_iter()
        .filter(|r| r.score(field).is_some_and(|s| s >= threshold))
        .collect()
}

fn normalize_instruction(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Drops records whose instruction matches an earlier one after
/// lowercasing and whitespace collapsing.
pub fn dedupe(records: Vec<CurationRecord>) -> Vec<CurationRecord> {
    let mut seen = HashSet::new();
    records
        .into_iter()
        .filter(|r| seen.insert(normalize_instruction(&r.instruction)))
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_dims(points: &[EmbeddingVector]) -> Result<()> {
    let Some(first) = points.first() else {
        return Ok(());
    };
    for (index, p) in points.iter().enumerate() {
        if p.dims() != first.dims() {
            return Err(CurateError::DimensionMismatch {
                index,
                expected: first.dims(),
                found: p.dims(),
            });
        }
    }
    Ok(())
}

/// Greedy k-center selection under Euclidean distance. Starts at
/// `seed_index`; each further pick is the point farthest from its nearest
/// picked center, lowest index on ties. Returns indices in pick order.
pub fn k_center_greedy(points: &[EmbeddingVector], m: usize, seed_index: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if m == 0 || m > n {
        return Err(CurateError::InvalidM { m, n });
    }
    if seed_index >= n {
        return Err(CurateError::InvalidSeed { seed: seed_index, n });
    }
    check_dims(points)?;
    let mut picked = vec![false; n];
    let mut nearest = vec![f64::INFINITY; n];
    let mut order = Vec::with_capacity(m);
    let mut next = seed_index;
    loop {
        picked[next] = true;
        order.push(next);
        if order.len() == m {
            return Ok(order);
        }
        let center = points[next].values();
        nearest.par_iter_mut().enumerate().for_each(|(i, d)| {
            let nd = sq_dist(points[i].values(), center);
            if nd < *d {
                *d = nd;
            }
        });
        let mut best: Option<usize> = None;
        for i in 0..n {
            if picked[i] {
                continue;
            }
            if best.is_none_or(|b| nearest[i] > nearest[b]) {
                best = Some(i);
            }
        }
        next = best.expect("m <= n leaves an unpicked point");
    }
}

/// Largest distance from any point to its nearest center.
pub fn covering_radius(points: &[EmbeddingVector], centers: &[usize]) -> f64 {
    points
        .iter()
        .map(|p| {
            centers
                .iter()
                .map(|&c| sq_dist(p.values(), points[c].values()))
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
        .sqrt()
}

/// A question paired with the documents that support its answer and hard
/// negatives that merely look relevant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RagTrainingRecord {
    pub question: String,
    pub golden_docs: Vec<String>,
    pub distractor_docs: Vec<String>,
    pub answer: String,
}

/// Distractors are the top exact-search hits for the question that are not
/// golden.
pub fn build_rag_record(
    question: &str,
    golden: &[String],
    answer: &str,
    pool: &Index,
    encoder: &DualEncoder,
    n_distractors: usize,
) -> Result<RagTrainingRecord> {
    let mut golden_docs = Vec::new();
    for g in golden {
        if !golden_docs.contains(g) {
            golden_docs.push(g.clone());
        }
    }
    if golden_docs.is_empty() {
        return Err(CurateError::NoGolden);
    }
    let golden_set: HashSet<&str> = golden_docs.iter().map(String::as_str).collect();
    let available = pool.chunk_ids().iter().filter(|id| !golden_set.contains(id.as_str())).count();
    if available < n_distractors {
        return Err(CurateError::InsufficientPool {
            available,
            requested: n_distractors,
        });
    }
    let distractor_docs = if n_distractors == 0 {
        Vec::new()
    } else {
        let q = encoder.encode_query(question)?;
        pool.search_exact(&q, pool.len())?
            .into_iter()
            .filter(|d| !golden_set.contains(d.chunk_id.as_str()))
            .take(n_distractors)
            .map(|d| d.chunk_id)
            .collect()
    };
    Ok(RagTrainingRecord {
        question: question.to_string(),
        golden_docs,
        distractor_docs,
        answer: answer.to_string(),
    })
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let io = |source| CurateError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CurateError::Format {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let path = path.as_ref();
    let io = |source| CurateError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for item in items {
        serde_json::to_writer(&mut w, item).expect("records serialize");
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}
