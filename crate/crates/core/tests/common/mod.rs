#![allow(dead_code)]

use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dagrag::bench::{BenchItem, ItemKind};
use dagrag::corpus::{ChunkCatalog, CorpusChunk, Source};
use dagrag::embed::{DualEncoder, HashEncoder};
use dagrag::rerank::{OverlapF1Scorer, RerankConfig, Reranker};
use dagrag::retrieve::TwoStageRetriever;
use dagrag::tokenize::{ByteQuarterTokenizer, Tokenizer};
use dagrag::vindex::{Index, IndexEntry, IndexParams};

pub const VOCAB: [&str; 40] = [
    "aspirin", "insulin", "heparin", "warfarin", "statin", "glucose", "platelet", "kidney", "liver", "asthma",
    "bronchus", "fever", "sepsis", "antibody", "vaccine", "tumor", "biopsy", "lesion", "cortisol", "thyroid",
    "anemia", "iron", "ferritin", "stroke", "infarct", "troponin", "murmur", "valve", "edema", "diuretic",
    "potassium", "sodium", "acidosis", "lactate", "seizure", "migraine", "neuron", "retina", "cornea", "gout",
];

pub fn random_text(rng: &mut impl Rng, words: usize) -> String {
    (0..words).map(|_| *VOCAB.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

pub struct Fixture {
    pub encoder: DualEncoder,
    pub index: Arc<Index>,
    pub retriever: Arc<TwoStageRetriever>,
}

/// `n` random chunks, hash-encoded at 64 dims and reranked by overlap F1
/// (coarse 32, final 5).
pub fn corpus(n: usize, seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chunks: Vec<CorpusChunk> = (0..n)
        .map(|i| {
            let text = random_text(&mut rng, 12);
            CorpusChunk {
                id: format!("pubmed:{i}:0"),
                source: Source::Pubmed,
                title: String::new(),
                token_estimate: ByteQuarterTokenizer.count(&text),
                text,
            }
        })
        .collect();
    let encoder = DualEncoder::shared(Arc::new(HashEncoder::new(64, 11)));
    let texts: Vec<&str> = chunks.iter().map(|c| c.text.as_str()).collect();
    let entries = encoder
        .encode_passages(&texts)
        .unwrap()
        .into_iter()
        .zip(&chunks)
        .map(|(v, c)| IndexEntry::new(c.id.clone(), v))
        .collect();
    let index = Arc::new(Index::build(entries, IndexParams::new(64).with_seed(5)).unwrap());
    let reranker = Reranker::new(Arc::new(OverlapF1Scorer), RerankConfig { coarse_k: 32, final_n: 5 }).unwrap();
    let retriever = Arc::new(TwoStageRetriever::new(
        encoder.clone(),
        index.clone(),
        Arc::new(ChunkCatalog::new(chunks)),
        reranker,
    ));
    Fixture {
        encoder,
        index,
        retriever,
    }
}

/// Four-option items whose gold letter cycles with `golds`.
pub fn mcq_items(n: usize, golds: &[&str]) -> Vec<BenchItem> {
    (0..n)
        .map(|i| {
            let texts: Vec<String> = ["w", "x", "y", "z"].iter().map(|o| format!("option {o}{i}")).collect();
            BenchItem::new(
                format!("item{i:03}"),
                format!("Case {i}: which finding fits {}?", VOCAB[i % VOCAB.len()]),
                ItemKind::Mcq,
                &texts,
                golds[i % golds.len()],
                None,
            )
            .unwrap()
        })
        .collect()
}
