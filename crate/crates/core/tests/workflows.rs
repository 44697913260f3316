mod common;

use std::collections::HashSet;
use std::fs;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dagrag::bench::{self, EvalConfig, Variant};
use dagrag::corpus::{self, ChunkPolicy, ChunkStore, RawDocument, Source};
use dagrag::curate::{self, CurationRecord, ScoreField};
use dagrag::embed::{DualEncoder, EmbeddingVector, Encoder, HashEncoder};
use dagrag::modelgw::{CompletionRequest, FnBackend, Gateway, Role};
use dagrag::pipeline::{CallPurpose, Event};
use dagrag::rerank::{OverlapF1Scorer, RerankConfig, Reranker};
use dagrag::retrieve::{RetrieveError, Retriever, TwoStageRetriever};
use dagrag::tokenize::{Tokenizer, WhitespaceTokenizer};
use dagrag::vindex::{Index, IndexEntry, IndexParams};
use dagrag::{Pipeline, PipelineConfig};

// Independent re-derivation of the signed hash projection: FNV-1a over
// seed bytes then term bytes, splitmix64 finish, bucket = h mod d, sign
// from the top bit.
fn oracle_hash(seed: u64, term: &str) -> u64 {
    let mut h: u64 = 14695981039346656037;
    for b in seed.to_le_bytes().into_iter().chain(term.bytes()) {
        h = (h ^ b as u64).wrapping_mul(1099511628211);
    }
    let mut z = h.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn oracle_encode(text: &str, d: usize, seed: u64) -> Vec<f64> {
    let mut v = vec![0.0; d];
    for word in text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
        let h = oracle_hash(seed, &word.to_lowercase());
        v[(h % d as u64) as usize] += if (h >> 63) & 1 == 1 { -1.0 } else { 1.0 };
    }
    let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

#[test]
fn disjoint_texts_are_nearly_orthogonal() {
    let pairs = [
        ("aspirin dose for headache", "insulin resistance in the pancreas"),
        ("acute kidney injury", "migraine with visual aura"),
        ("heparin induced thrombocytopenia", "vitamin d and bone density"),
    ];
    let enc = HashEncoder::new(64, 0);
    for (a, b) in pairs {
        let (oa, ob) = (oracle_encode(a, 64, 0), oracle_encode(b, 64, 0));
        let got_a = enc.encode(a).unwrap();
        for (x, y) in got_a.values().iter().zip(&oa) {
            assert!((x - y).abs() < 1e-12);
        }
        let expected: f64 = oa.iter().zip(&ob).map(|(x, y)| x * y).sum();
        let got = got_a.dot(&enc.encode(b).unwrap());
        assert!((got - expected).abs() < 1e-12);
        assert!(expected.abs() < 0.5, "{a} / {b}: {expected}");
    }
}

#[test]
fn query_encoder_dims_must_match_the_index() {
    let fx = common::corpus(50, 1);
    let wrong = DualEncoder::new(Arc::new(HashEncoder::new(32, 11)), Arc::new(HashEncoder::new(64, 11)));
    let r = TwoStageRetriever::new(
        wrong,
        fx.index.clone(),
        Arc::new(corpus::ChunkCatalog::new(Vec::new())),
        Reranker::new(Arc::new(OverlapF1Scorer), RerankConfig { coarse_k: 32, final_n: 5 }).unwrap(),
    );
    let err = r.retrieve("aspirin", 5).unwrap_err();
    assert!(format!("{err:?}").contains("DimensionMismatch"), "{err:?}");
    assert!(matches!(err, RetrieveError::Index(_)));
}

#[test]
fn ingest_counts_persisted_lines() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("chunks.jsonl");
    let docs: Vec<RawDocument> = (0..10)
        .map(|i| RawDocument {
            source: Source::Statpearls,
            title: format!("t{i}"),
            raw_text: format!("Paragraph number {i} about gout."),
        })
        .collect();
    let mut store = ChunkStore::open(&path).unwrap();
    let m = corpus::ingest(docs.clone(), &ChunkPolicy::default(), &WhitespaceTokenizer, &mut store).unwrap();
    drop(store);
    let lines = fs::read_to_string(&path).unwrap().lines().count();
    assert_eq!(lines, 10);
    assert_eq!(m.total.chunk_count as usize, lines);

    // re-ingesting the same stream collides on ids
    let mut store = ChunkStore::open(&path).unwrap();
    assert!(corpus::ingest(docs, &ChunkPolicy::default(), &WhitespaceTokenizer, &mut store).is_err());

    let empty = dir.path().join("empty.jsonl");
    let mut store = ChunkStore::open(&empty).unwrap();
    let m = corpus::ingest(Vec::new(), &ChunkPolicy::default(), &WhitespaceTokenizer, &mut store).unwrap();
    assert_eq!(m.total.chunk_count, 0);
}

#[test]
fn three_forty_token_paragraphs_under_fifty() {
    let para = |w: &str| vec![w; 40].join(" ");
    let text = format!("{}\n\n{}\n\n{}", para("alpha"), para("beta"), para("gamma"));
    let chunks = corpus::chunk_text(&text, &ChunkPolicy { max_tokens: 50 }, &WhitespaceTokenizer).unwrap();
    assert_eq!(chunks.len(), 3);
    for c in &chunks {
        assert_eq!(c.split_whitespace().count(), 40);
        assert!(WhitespaceTokenizer.count(c) <= 50);
    }
}

#[test]
fn hand_summed_top_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let vs: Vec<Vec<f64>> = (0..3).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let q: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
    let entries = vs
        .iter()
        .enumerate()
        .map(|(i, v)| IndexEntry::new(format!("v{i}"), EmbeddingVector::new(v.clone()).unwrap()))
        .collect();
    let index = Index::build(entries, IndexParams::new(5)).unwrap();
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in vs.iter().enumerate() {
        let mut s = 0.0;
        for j in 0..5 {
            s += v[j] * q[j];
        }
        if s > best.1 {
            best = (i, s);
        }
    }
    let hit = &index.search(&EmbeddingVector::new(q).unwrap(), 1).unwrap()[0];
    assert_eq!(hit.chunk_id, format!("v{}", best.0));
    assert!((hit.score - best.1).abs() < 1e-12);
}

#[test]
fn hash_encoded_corpus_recall() {
    let fx = common::corpus(1000, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut total = 0.0;
    for _ in 0..50 {
        let q = fx.encoder.encode_query(&common::random_text(&mut rng, 4)).unwrap();
        let truth: HashSet<String> = fx.index.search_exact(&q, 10).unwrap().into_iter().map(|d| d.chunk_id).collect();
        let got = fx.index.search(&q, 10).unwrap();
        total += got.iter().filter(|d| truth.contains(&d.chunk_id)).count() as f64 / 10.0;
    }
    let recall = total / 50.0;
    assert!(recall >= 0.95, "recall {recall}");
}

fn record(i: usize, quality: f64, reward: Option<f64>) -> CurationRecord {
    CurationRecord {
        id: format!("r{i}"),
        instruction: format!("instruction {i}"),
        response: "r".into(),
        quality_score: quality,
        reward_score: reward,
        embedding: None,
    }
}

#[test]
fn two_stage_screen_is_an_intersection() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let records: Vec<CurationRecord> = (0..20)
        .map(|i| record(i, rng.random_range(7.0..10.0), Some(rng.random_range(-1.0..3.0))))
        .collect();
    let staged = curate::filter_by_field(
        curate::filter_by_field(records.clone(), ScoreField::Quality, curate::QUALITY_THRESHOLD),
        ScoreField::Reward,
        curate::REWARD_THRESHOLD,
    );
    let a: HashSet<String> = records.iter().filter(|r| r.quality_score >= 9.0).map(|r| r.id.clone()).collect();
    let b: HashSet<String> = records.iter().filter(|r| r.reward_score.unwrap() >= 1.0).map(|r| r.id.clone()).collect();
    let got: HashSet<String> = staged.iter().map(|r| r.id.clone()).collect();
    assert_eq!(got, &a & &b);
    assert!(!got.is_empty() && got.len() < 20);
}

#[test]
fn distractors_are_exact_top_excluding_golden() {
    let fx = common::corpus(10, 6);
    let q = "aspirin platelet kidney";
    let golden = vec!["pubmed:3:0".to_string()];
    let rec = curate::build_rag_record(q, &golden, "ans", &fx.index, &fx.encoder, 3).unwrap();
    let qv = fx.encoder.encode_query(q).unwrap();
    let oracle: Vec<String> = fx
        .index
        .search_exact(&qv, 10)
        .unwrap()
        .into_iter()
        .map(|d| d.chunk_id)
        .filter(|id| !golden.contains(id))
        .take(3)
        .collect();
    assert_eq!(rec.distractor_docs, oracle);
}

fn medical_backend(know_even: bool) -> Gateway {
    Gateway::uniform(Arc::new(FnBackend::new(move |req: &CompletionRequest| {
        Ok(match req.role {
            Role::Know => {
                let case: usize = req
                    .prompt
                    .split("Case ")
                    .nth(1)
                    .and_then(|s| s.split(':').next())
                    .and_then(|s| s.parse().ok())
                    .unwrap_or(1);
                if know_even && case.is_multiple_of(2) { "know" } else { "unknow" }.to_string()
            }
            Role::Dag => "no usable plan".to_string(),
            Role::Medical => "A".to_string(),
        })
    })))
}

#[test]
fn sweep_respects_n_and_grows_prompts() {
    let fx = common::corpus(200, 7);
    let cfg = PipelineConfig {
        enable_gate: false,
        enable_dag: false,
        ..PipelineConfig::default()
    };
    let p = Pipeline::new(medical_backend(false), Some(fx.retriever.clone()), cfg).unwrap();
    let items = common::mcq_items(6, &["A", "B"]);
    let ns = [1, 3, 5];
    let (reports, traces) = bench::sweep_docs(&p, "fx", "sweep", &items, &ns, &EvalConfig::default()).unwrap();
    assert_eq!(reports.iter().map(|r| r.retrieve_n).collect::<Vec<_>>(), ns);
    for t in &traces {
        let r = t.result.as_ref().unwrap();
        assert!(r.base_retrieved.len() <= t.retrieve_n);
        assert!(r.retrieved.values().all(|d| d.len() <= t.retrieve_n));
        for e in &r.events {
            if let Event::Retrieve { docs, .. } = e {
                assert!(*docs <= t.retrieve_n);
            }
        }
    }
    for item in &items {
        let sizes: Vec<usize> = ns
            .iter()
            .map(|&n| {
                let t = traces.iter().find(|t| t.item_id == item.id && t.retrieve_n == n).unwrap();
                let r = t.result.as_ref().unwrap();
                r.calls.iter().find(|c| c.purpose == CallPurpose::Synthesis).unwrap().untruncated_tokens
            })
            .collect();
        assert!(sizes.windows(2).all(|w| w[0] <= w[1]), "{sizes:?}");
    }
}

#[test]
fn gate_halves_retrievals_when_half_are_known() {
    let fx = common::corpus(200, 8);
    let base = PipelineConfig {
        enable_dag: false,
        ..PipelineConfig::default()
    };
    let p = Pipeline::new(medical_backend(true), Some(fx.retriever.clone()), base.clone()).unwrap();
    let variants = vec![
        Variant {
            name: "rag".into(),
            config: PipelineConfig {
                enable_gate: false,
                ..base.clone()
            },
        },
        Variant {
            name: "gate+rag".into(),
            config: base,
        },
    ];
    let items = common::mcq_items(20, &["A"]);
    let (reports, _) = bench::ablate(&p, "fx", &items, &variants, &EvalConfig::default()).unwrap();
    let (rag, gated) = (&reports[0], &reports[1]);
    assert_eq!(gated.gate.know, 10);
    assert!(gated.retrieval_calls * 2 <= rag.retrieval_calls);
    assert_eq!(gated.retrieval_calls, rag.retrieval_calls / 2);
}

#[test]
fn no_rag_variant_never_touches_the_index() {
    let fx = common::corpus(100, 9);
    let p = Pipeline::new(medical_backend(true), Some(fx.retriever.clone()), PipelineConfig::default()).unwrap();
    let before = fx.index.search_count();
    let variants: Vec<Variant> = bench::ablation_variants(p.config()).into_iter().filter(|v| !v.config.enable_rag).collect();
    let (_, traces) = bench::ablate(&p, "fx", &common::mcq_items(10, &["A"]), &variants, &EvalConfig::default()).unwrap();
    assert_eq!(fx.index.search_count(), before);
    assert!(traces.iter().all(|t| t.result.as_ref().unwrap().retrieval_calls == 0));
}
