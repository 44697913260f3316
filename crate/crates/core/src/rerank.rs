//! Fine-grained retrieval stage: score coarse candidates against the query
//! and keep the best few.
//!
//! What "relevant" means is owned by the [`Scorer`]. This module only fixes
//! the selection mechanics: output is at most `final_n` of the inputs,
//! ordered by descending score with ties broken by ascending chunk id, and
//! independent of input order.

use std::collections::HashMap;
use std::fmt::Debug;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::http::{EndpointConfig, HttpError, JsonEndpoint};
use crate::tokenize::terms;
use crate::vindex::{sort_ranked, ScoredDocument, Stage};

#[derive(Debug, thiserror::Error)]
pub enum RerankError {
    #[error("scorer unavailable after {attempts} attempt(s): {last}")]
    ScorerUnavailable { last: HttpError, attempts: u32 },
    #[error("scorer returned {got} scores for {expected} passages")]
    ScoreCount { expected: usize, got: usize },
    #[error("scorer returned a non-finite score for `{0}`")]
    NonFinite(String),
    #[error("invalid rerank config: {0}")]
    InvalidConfig(String),
}

type Result<T, E = RerankError> = std::result::Result<T, E>;

/// Relevance of each passage to one query, higher is better.
pub trait Scorer: Send + Sync + Debug {
    fn score(&self, query: &str, passages: &[&str]) -> Result<Vec<f64>>;
}

/// Token-overlap F1 between query and passage terms (lowercased,
/// punctuation stripped, multiset intersection).
#[derive(Debug, Clone, Copy, Default)]
pub struct OverlapF1Scorer;

impl OverlapF1Scorer {
    pub fn f1(query: &str, passage: &str) -> f64 {
        let q: Vec<String> = terms(query).collect();
        let p: Vec<String> = terms(passage).collect();
        if q.is_empty() || p.is_empty() {
            return 0.0;
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in &q {
            *counts.entry(t).or_insert(0) += 1;
        }
        let mut common = 0usize;
        for t in &p {
            if let Some(n) = counts.get_mut(t.as_str()) {
                if *n > 0 {
                    *n -= 1;
                    common += 1;
                }
            }
        }
        if common == 0 {
            return 0.0;
        }
        let precision = common as f64 / p.len() as f64;
        let recall = common as f64 / q.len() as f64;
        2.0 * precision * recall / (precision + recall)
    }
}

impl Scorer for OverlapF1Scorer {
    fn score(&self, query: &str, passages: &[&str]) -> Result<Vec<f64>> {
        Ok(passages.iter().map(|p| Self::f1(query, p)).collect())
    }
}

#[derive(Debug, Serialize)]
struct ScoreRequest<'a> {
    query: &'a str,
    passages: &'a [&'a str],
}

#[derive(Debug, Deserialize)]
struct ScoreResponse {
    scores: Vec<f64>,
}

/// Reranker served over HTTP: POST `{"query", "passages"}`, reply `{"scores"}`.
#[derive(Debug)]
pub struct RemoteScorer {
    endpoint: JsonEndpoint,
    batch_size: usize,
}

impl RemoteScorer {
    pub fn new(cfg: &EndpointConfig, batch_size: usize) -> Self {
        Self {
            endpoint: JsonEndpoint::new(cfg),
            batch_size: batch_size.max(1),
        }
    }

    fn score_batch(&self, query: &str, passages: &[&str]) -> Result<Vec<f64>> {
        let resp: ScoreResponse = self
            .endpoint
            .post(&ScoreRequest { query, passages })
            .map_err(|(last, attempts)| RerankError::ScorerUnavailable { last, attempts })?;
        if resp.scores.len() != passages.len() {
            return Err(RerankError::ScoreCount {
                expected: passages.len(),
                got: resp.scores.len(),
            });
        }
        Ok(resp.scores)
    }
}

impl Scorer for RemoteScorer {
    fn score(&self, query: &str, passages: &[&str]) -> Result<Vec<f64>> {
        let batches: Vec<&[&str]> = passages.chunks(self.batch_size).collect();
        let results: Vec<Result<Vec<f64>>> = std::thread::scope(|s| {
            let handles: Vec<_> = batches
                .iter()
                .map(|b| s.spawn(move || self.score_batch(query, b)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("scorer thread panicked")).collect()
        });
        let mut out = Vec::with_capacity(passages.len());
        for r in results {
            out.extend(r?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RerankConfig {
    pub coarse_k: usize,
    pub final_n: usize,
}

impl Default for RerankConfig {
    fn default() -> Self {
        Self {
            coarse_k: 32,
            final_n: 5,
        }
    }
}

impl RerankConfig {
    pub fn validate(&self) -> Result<()> {
        if self.final_n == 0 || self.final_n > self.coarse_k {
            return Err(RerankError::InvalidConfig(format!(
                "need 1 <= final_n ({}) <= coarse_k ({})",
                self.final_n, self.coarse_k
            )));
        }
        Ok(())
    }
}

/// A coarse-stage candidate with its passage text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    pub chunk_id: String,
    pub text: String,
}

/// Scorer plus selection sizes.
#[derive(Debug, Clone)]
pub struct Reranker {
    scorer: Arc<dyn Scorer>,
    config: RerankConfig,
}

impl Reranker {
    pub fn new(scorer: Arc<dyn Scorer>, config: RerankConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { scorer, config })
    }

    pub fn config(&self) -> &RerankConfig {
        &self.config
    }

    pub fn with_final_n(&self, final_n: usize) -> Result<Self> {
        Self::new(
            self.scorer.clone(),
            RerankConfig {
                final_n,
                ..self.config
            },
        )
    }

    /// Scores every candidate and returns the best `min(final_n, len)`.
    pub fn rerank(&self, query: &str, candidates: &[Candidate]) -> Result<Vec<ScoredDocument>> {
        if candidates.is_empty() {
            return Ok(Vec::new());
        }
        let texts: Vec<&str> = candidates.iter().map(|c| c.text.as_str()).collect();
        let scores = self.scorer.score(query, &texts)?;
        if scores.len() != candidates.len() {
            return Err(RerankError::ScoreCount {
                expected: candidates.len(),
                got: scores.len(),
            });
        }
        let mut out = Vec::with_capacity(candidates.len());
        for (c, score) in candidates.iter().zip(scores) {
            if !score.is_finite() {
                return Err(RerankError::NonFinite(c.chunk_id.clone()));
            }
            out.push(ScoredDocument {
                chunk_id: c.chunk_id.clone(),
                score,
                stage: Stage::Fine,
            });
        }
        sort_ranked(&mut out);
        out.truncate(self.config.final_n);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug)]
    struct Constant;

    impl Scorer for Constant {
        fn score(&self, _q: &str, p: &[&str]) -> Result<Vec<f64>> {
            Ok(vec![0.5; p.len()])
        }
    }

    fn cands(items: &[(&str, &str)]) -> Vec<Candidate> {
        items
            .iter()
            .map(|(id, t)| Candidate {
                chunk_id: id.to_string(),
                text: t.to_string(),
            })
            .collect()
    }

    #[test]
    fn overlap_f1_by_hand() {
        // query terms {aspirin, dose}
        // "aspirin dosing guide": 1 common, P = 1/3, R = 1/2, F1 = 0.4
        // "aspirin dose chart":   2 common, P = 2/3, R = 1,   F1 = 0.8
        assert!((OverlapF1Scorer::f1("aspirin dose", "aspirin dosing guide") - 0.4).abs() < 1e-12);
        assert!((OverlapF1Scorer::f1("aspirin dose", "aspirin dose chart") - 0.8).abs() < 1e-12);
        assert_eq!(OverlapF1Scorer::f1("aspirin dose", "weather report"), 0.0);
        assert_eq!(OverlapF1Scorer::f1("", "weather report"), 0.0);
    }

    #[test]
    fn overlap_scorer_drops_the_unrelated_passage() {
        let r = Reranker::new(Arc::new(OverlapF1Scorer), RerankConfig { coarse_k: 3, final_n: 2 }).unwrap();
        let got = r
            .rerank(
                "aspirin dose",
                &cands(&[
                    ("a", "aspirin dosing guide"),
                    ("b", "weather report"),
                    ("c", "aspirin dose chart"),
                ]),
            )
            .unwrap();
        let ids: Vec<_> = got.iter().map(|d| d.chunk_id.as_str()).collect();
        assert_eq!(ids, ["c", "a"]);
        assert!(got.iter().all(|d| d.stage == Stage::Fine));
    }

    #[test]
    fn short_lists_are_returned_whole() {
        let r = Reranker::new(Arc::new(OverlapF1Scorer), RerankConfig::default()).unwrap();
        let got = r.rerank("x", &cands(&[("1", "x"), ("2", "y"), ("3", "x y")])).unwrap();
        assert_eq!(got.len(), 3);
        assert_eq!(got[0].chunk_id, "1");
        assert!(r.rerank("x", &[]).unwrap().is_empty());
    }

    #[test]
    fn constant_scores_fall_back_to_id_order() {
        let r = Reranker::new(Arc::new(Constant), RerankConfig { coarse_k: 32, final_n: 2 }).unwrap();
        let got = r.rerank("q", &cands(&[("z", ""), ("m", ""), ("b", ""), ("k", "")])).unwrap();
        let ids: Vec<_> = got.iter().map(|d| d.chunk_id.as_str()).collect();
        assert_eq!(ids, ["b", "k"]);
    }

    #[test]
    fn config_bounds() {
        assert!(RerankConfig { coarse_k: 4, final_n: 5 }.validate().is_err());
        assert!(RerankConfig { coarse_k: 4, final_n: 0 }.validate().is_err());
        assert!(RerankConfig { coarse_k: 32, final_n: 5 }.validate().is_ok());
    }

    #[derive(Debug)]
    struct Broken;

    impl Scorer for Broken {
        fn score(&self, _q: &str, p: &[&str]) -> Result<Vec<f64>> {
            Ok(vec![f64::NAN; p.len()])
        }
    }

    #[test]
    fn non_finite_scores_are_errors() {
        let r = Reranker::new(Arc::new(Broken), RerankConfig::default()).unwrap();
        assert!(matches!(r.rerank("q", &cands(&[("a", "t")])), Err(RerankError::NonFinite(_))));
    }
}
