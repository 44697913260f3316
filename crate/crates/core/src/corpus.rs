//! Corpus ingestion: paragraph chunking, the append-only chunk store and the
//! per-source manifest.
//!
//! Chunk store files are UTF-8 JSONL, one [`CorpusChunk`] per line with the
//! fields `id`, `source`, `title`, `text` and `token_estimate`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::tokenize::Tokenizer;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("document is empty or whitespace only")]
    EmptyDocument,
    #[error("duplicate chunk id `{0}`")]
    DuplicateId(String),
    #[error("chunk store I/O on {path}: {source}")]
    StoreIO {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed chunk store line {line} in {path}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid chunk policy: {0}")]
    InvalidPolicy(String),
    #[error("cannot parse size `{0}`")]
    BadSize(String),
    #[error("manifest total {total} does not equal the per-source sum {sum}")]
    ManifestMismatch { total: u64, sum: u64 },
}

type Result<T, E = CorpusError> = std::result::Result<T, E>;

/// Where a chunk came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Pubmed,
    Wikipedia,
    Statpearls,
    Textbooks,
    Custom,
}

impl Source {
    pub const ALL: [Source; 5] = [
        Source::Pubmed,
        Source::Wikipedia,
        Source::Statpearls,
        Source::Textbooks,
        Source::Custom,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Source::Pubmed => "pubmed",
            Source::Wikipedia => "wikipedia",
            Source::Statpearls => "statpearls",
            Source::Textbooks => "textbooks",
            Source::Custom => "custom",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Source::Pubmed => "PubMed",
            Source::Wikipedia => "Wikipedia",
            Source::Statpearls => "StatPearls",
            Source::Textbooks => "Textbooks",
            Source::Custom => "Custom",
        }
    }

    /// Short description used in the manifest when none is given.
    pub fn default_description(self) -> &'static str {
        match self {
            Source::Pubmed => "Medical Literature",
            Source::Wikipedia => "General Knowledge",
            Source::Statpearls => "Medical Database",
            Source::Textbooks => "Medical Education",
            Source::Custom => "Custom Collection",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Source::ALL
            .into_iter()
            .find(|src| src.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown source `{s}`"))
    }
}

/// One retrievable paragraph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusChunk {
    pub id: String,
    pub source: Source,
    pub title: String,
    pub text: String,
    pub token_estimate: usize,
}

/// A pre-extracted document waiting to be chunked.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawDocument {
    pub source: Source,
    #[serde(default)]
    pub title: String,
    #[serde(alias = "text")]
    pub raw_text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChunkPolicy {
    pub max_tokens: usize,
}

impl Default for ChunkPolicy {
    fn default() -> Self {
        Self { max_tokens: 256 }
    }
}

/// Splits `raw_text` on blank lines and hard-splits any paragraph whose token
/// count exceeds `policy.max_tokens`.
///
/// Paragraphs are never merged. Hard splits happen at word boundaries where
/// possible and fall back to character boundaries for single over-long words.
pub fn chunk_text(
    raw_text: &str,
    policy: &ChunkPolicy,
    tokenizer: &dyn Tokenizer,
) -> Result<Vec<String>> {
    if policy.max_tokens == 0 {
        return Err(CorpusError::InvalidPolicy("max_tokens must be at least 1".into()));
    }
    if raw_text.trim().is_empty() {
        return Err(CorpusError::EmptyDocument);
    }
    let mut chunks = Vec::new();
    for paragraph in paragraphs(raw_text) {
        if tokenizer.count(&paragraph) <= policy.max_tokens {
            chunks.push(paragraph);
        } else {
            hard_split(&paragraph, policy.max_tokens, tokenizer, &mut chunks);
        }
    }
    Ok(chunks)
}

fn paragraphs(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !current.is_empty() {
                out.push(current.join("\n").trim().to_string());
                current.clear();
            }
        } else {
            current.push(line);
        }
    }
    if !current.is_empty() {
        out.push(current.join("\n").trim().to_string());
    }
    out
}

fn hard_split(paragraph: &str, max_tokens: usize, tokenizer: &dyn Tokenizer, out: &mut Vec<String>) {
    let mut current = String::new();
    for word in paragraph.split_whitespace() {
        let candidate = if current.is_empty() {
            word.to_string()
        } else {
            format!("{current} {word}")
        };
        if tokenizer.count(&candidate) <= max_tokens {
            current = candidate;
            continue;
        }
        if !current.is_empty() {
            out.push(std::mem::take(&mut current));
        }
        if tokenizer.count(word) <= max_tokens {
            current = word.to_string();
        } else {
            // a single word longer than the budget: cut at character boundaries
            let mut piece = String::new();
            for ch in word.chars() {
                piece.push(ch);
                if tokenizer.count(&piece) > max_tokens && piece.chars().count() > 1 {
                    piece.pop();
                    out.push(std::mem::take(&mut piece));
                    piece.push(ch);
                }
            }
            current = piece;
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
}

/// Chunk id format: `{source}:{document-index}:{chunk-index}`.
pub fn chunk_id(source: Source, doc_index: usize, chunk_index: usize) -> String {
    format!("{source}:{doc_index}:{chunk_index}")
}

/// Chunks one document into [`CorpusChunk`]s carrying deterministic ids.
pub fn chunk_document(
    doc: &RawDocument,
    doc_index: usize,
    policy: &ChunkPolicy,
    tokenizer: &dyn Tokenizer,
) -> Result<Vec<CorpusChunk>> {
    let texts = chunk_text(&doc.raw_text, policy, tokenizer)?;
    Ok(texts
        .into_iter()
        .enumerate()
        .map(|(i, text)| CorpusChunk {
            id: chunk_id(doc.source, doc_index, i),
            source: doc.source,
            title: doc.title.clone(),
            token_estimate: tokenizer.count(&text),
            text,
        })
        .collect())
}

// ---------------------------------------------------------------------------
// manifest

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub source: String,
    pub chunk_count: u64,
    pub embedding_bytes: u64,
    pub description: String,
}

/// Per-source chunk and embedding sizes plus their total.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub sources: Vec<ManifestEntry>,
    pub total: ManifestEntry,
}

impl CorpusManifest {
    /// Builds a manifest whose total is the exact sum of `sources`.
    pub fn from_entries(sources: Vec<ManifestEntry>) -> Self {
        let total = ManifestEntry {
            source: "merge".into(),
            chunk_count: sources.iter().map(|e| e.chunk_count).sum(),
            embedding_bytes: sources.iter().map(|e| e.embedding_bytes).sum(),
            description: "Knowledge Combination".into(),
        };
        Self { sources, total }
    }

    pub fn empty() -> Self {
        Self::from_entries(Vec::new())
    }

    pub fn validate(&self) -> Result<()> {
        let sum: u64 = self.sources.iter().map(|e| e.chunk_count).sum();
        if sum != self.total.chunk_count {
            return Err(CorpusError::ManifestMismatch {
                total: self.total.chunk_count,
                sum,
            });
        }
        Ok(())
    }

    /// Sets `embedding_bytes` assuming `bytes_per_vector` per chunk.
    pub fn with_embedding_size(mut self, bytes_per_vector: u64) -> Self {
        for e in &mut self.sources {
            e.embedding_bytes = e.chunk_count * bytes_per_vector;
        }
        Self::from_entries(self.sources)
    }

    /// Aligned text table with `Data | Chunks | Embedding | Introduction` columns.
    pub fn render_table(&self) -> String {
        let mut rows = vec![[
            "Data".to_string(),
            "Chunks".to_string(),
            "Embedding".to_string(),
            "Introduction".to_string(),
        ]];
        for e in self.sources.iter().chain(std::iter::once(&self.total)) {
            let name = Source::from_str(&e.source)
                .map(|s| s.display_name().to_string())
                .unwrap_or_else(|_| capitalize(&e.source));
            rows.push([
                name,
                format_si(e.chunk_count),
                format_si(e.embedding_bytes),
                e.description.clone(),
            ]);
        }
        crate::bench::report::align_rows(&rows)
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(first) => first.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

const SI_UNITS: [(u64, char); 4] = [
    (1_000_000_000_000, 'T'),
    (1_000_000_000, 'G'),
    (1_000_000, 'M'),
    (1_000, 'K'),
];

/// Formats a count with one decimal and a decimal SI suffix: `23_900_000` → `"23.9M"`.
pub fn format_si(n: u64) -> String {
    for (unit, suffix) in SI_UNITS {
        if n >= unit {
            let tenths = (n as u128 * 10 + unit as u128 / 2) / unit as u128;
            return if tenths.is_multiple_of(10) {
                format!("{}{suffix}", tenths / 10)
            } else {
                format!("{}.{}{suffix}", tenths / 10, tenths % 10)
            };
        }
    }
    n.to_string()
}

/// Inverse of [`format_si`], exact for any decimal mantissa: `"301.2K"` → `301_200`.
pub fn parse_si(s: &str) -> Result<u64> {
    let bad = || CorpusError::BadSize(s.to_string());
    let s = s.trim();
    let (digits, multiplier) = match s.chars().last() {
        Some(c) if c.is_ascii_alphabetic() => {
            let unit = SI_UNITS
                .iter()
                .find(|(_, suffix)| suffix.eq_ignore_ascii_case(&c))
                .map(|(u, _)| *u)
                .ok_or_else(bad)?;
            (&s[..s.len() - 1], unit)
        }
        _ => (s, 1),
    };
    let (int_part, frac_part) = digits.split_once('.').unwrap_or((digits, ""));
    if int_part.is_empty() && frac_part.is_empty() {
        return Err(bad());
    }
    if !int_part.chars().chain(frac_part.chars()).all(|c| c.is_ascii_digit()) {
        return Err(bad());
    }
    let scale = 10u128.pow(frac_part.len() as u32);
    let mantissa: u128 = format!("{int_part}{frac_part}").parse().map_err(|_| bad())?;
    let value = mantissa * multiplier as u128;
    if !value.is_multiple_of(scale) {
        return Err(bad());
    }
    u64::try_from(value / scale).map_err(|_| bad())
}

// ---------------------------------------------------------------------------
// chunk store

/// Append-only JSONL chunk store with a single writer.
#[derive(Debug)]
pub struct ChunkStore {
    path: PathBuf,
    writer: BufWriter<File>,
    ids: HashSet<String>,
    counts: BTreeMap<Source, u64>,
}

impl ChunkStore {
    /// Opens `path` for appending, creating it if needed. Existing rows are
    /// scanned so duplicate ids are caught across sessions.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut ids = HashSet::new();
        let mut counts = BTreeMap::new();
        if path.exists() {
            for chunk in read_chunks(&path)? {
                *counts.entry(chunk.source).or_insert(0) += 1;
                ids.insert(chunk.id);
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|source| CorpusError::StoreIO { path: path.clone(), source })?;
        Ok(Self {
            path,
            writer: BufWriter::new(file),
            ids,
            counts,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Appends all chunks of one document, or none of them.
    pub fn append_all(&mut self, chunks: &[CorpusChunk]) -> Result<()> {
        let mut batch = HashSet::new();
        for c in chunks {
            if self.ids.contains(&c.id) || !batch.insert(c.id.as_str()) {
                return Err(CorpusError::DuplicateId(c.id.clone()));
            }
        }
        for c in chunks {
            let line = serde_json::to_string(c).expect("chunk serializes");
            writeln!(self.writer, "{line}").map_err(|e| self.io(e))?;
        }
        for c in chunks {
            self.ids.insert(c.id.clone());
            *self.counts.entry(c.source).or_insert(0) += 1;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush().map_err(|e| self.io(e))
    }

    pub fn manifest(&self) -> CorpusManifest {
        CorpusManifest::from_entries(
            self.counts
                .iter()
                .map(|(src, &n)| ManifestEntry {
                    source: src.as_str().to_string(),
                    chunk_count: n,
                    embedding_bytes: 0,
                    description: src.default_description().to_string(),
                })
                .collect(),
        )
    }

    fn io(&self, source: std::io::Error) -> CorpusError {
        CorpusError::StoreIO {
            path: self.path.clone(),
            source,
        }
    }
}

impl Drop for ChunkStore {
    fn drop(&mut self) {
        let _ = self.writer.flush();
    }
}

/// Reads every chunk from a JSONL store file.
pub fn read_chunks(path: impl AsRef<Path>) -> Result<Vec<CorpusChunk>> {
    let path = path.as_ref();
    let io = |source| CorpusError::StoreIO {
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
        let chunk = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(chunk);
    }
    Ok(out)
}

/// Chunks every document of `documents` and appends the result to `store`.
///
/// Document indices count from zero in stream order, so re-ingesting the same
/// stream into the same store fails with [`CorpusError::DuplicateId`].
pub fn ingest<I>(
    documents: I,
    policy: &ChunkPolicy,
    tokenizer: &dyn Tokenizer,
    store: &mut ChunkStore,
) -> Result<CorpusManifest>
where
    I: IntoIterator<Item = RawDocument>,
{
    for (doc_index, doc) in documents.into_iter().enumerate() {
        let chunks = chunk_document(&doc, doc_index, policy, tokenizer)?;
        store.append_all(&chunks)?;
    }
    store.flush()?;
    Ok(store.manifest())
}

/// In-memory id → chunk lookup, immutable once loaded.
#[derive(Debug, Clone, Default)]
pub struct ChunkCatalog {
    chunks: HashMap<String, CorpusChunk>,
}

impl ChunkCatalog {
    pub fn new(chunks: impl IntoIterator<Item = CorpusChunk>) -> Self {
        Self {
            chunks: chunks.into_iter().map(|c| (c.id.clone(), c)).collect(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::new(read_chunks(path)?))
    }

    pub fn get(&self, id: &str) -> Option<&CorpusChunk> {
        self.chunks.get(id)
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenize::ByteQuarterTokenizer;

    fn chunks(text: &str, max: usize) -> Vec<String> {
        chunk_text(text, &ChunkPolicy { max_tokens: max }, &ByteQuarterTokenizer).unwrap()
    }

    #[test]
    fn blank_lines_split_paragraphs() {
        assert_eq!(chunks("A.\n\nB.", 100), ["A.", "B."]);
        assert_eq!(chunks("A.", 100), ["A."]);
        assert_eq!(chunks("  \n A.\n   \n\n B. \n", 100), ["A.", "B."]);
    }

    #[test]
    fn single_newlines_stay_inside_a_paragraph() {
        assert_eq!(chunks("line one\nline two", 100), ["line one\nline two"]);
    }

    #[test]
    fn whitespace_document_is_rejected() {
        let err = chunk_text(" \n\t ", &ChunkPolicy::default(), &ByteQuarterTokenizer).unwrap_err();
        assert!(matches!(err, CorpusError::EmptyDocument));
    }

    #[test]
    fn zero_budget_is_rejected() {
        let err = chunk_text("a", &ChunkPolicy { max_tokens: 0 }, &ByteQuarterTokenizer).unwrap_err();
        assert!(matches!(err, CorpusError::InvalidPolicy(_)));
    }

    #[test]
    fn oversized_paragraph_is_hard_split() {
        // 10 words of 7 bytes + separators; budget 5 tokens = 20 bytes
        let para = ["abcdefg"; 10].join(" ");
        let out = chunks(&para, 5);
        assert!(out.len() > 1);
        for c in &out {
            assert!(ByteQuarterTokenizer.count(c) <= 5, "{c:?}");
        }
        assert_eq!(out.concat().replace(' ', ""), para.replace(' ', ""));
    }

    #[test]
    fn long_word_is_cut_by_characters() {
        let word = "x".repeat(30);
        let out = chunks(&word, 2);
        assert_eq!(out.len(), 4);
        assert!(out.iter().all(|c| ByteQuarterTokenizer.count(c) <= 2));
        assert_eq!(out.concat(), word);
    }

    #[test]
    fn ids_follow_source_document_chunk() {
        let doc = RawDocument {
            source: Source::Statpearls,
            title: "t".into(),
            raw_text: "one\n\ntwo".into(),
        };
        let got = chunk_document(&doc, 7, &ChunkPolicy::default(), &ByteQuarterTokenizer).unwrap();
        assert_eq!(got[0].id, "statpearls:7:0");
        assert_eq!(got[1].id, "statpearls:7:1");
        assert_eq!(got[1].token_estimate, 1);
    }

    #[test]
    fn si_formatting() {
        assert_eq!(format_si(23_900_000), "23.9M");
        assert_eq!(format_si(301_200), "301.2K");
        assert_eq!(format_si(900_000_000), "900M");
        assert_eq!(format_si(181_668_700_000), "181.7G");
        assert_eq!(format_si(999), "999");
        assert_eq!(parse_si("23.9M").unwrap(), 23_900_000);
        assert_eq!(parse_si("368.7M").unwrap(), 368_700_000);
        assert_eq!(parse_si("12").unwrap(), 12);
        assert!(parse_si("1.5X").is_err());
        assert!(parse_si("M").is_err());
        assert!(parse_si("0.0001K").is_err());
    }

    #[test]
    fn manifest_validation_catches_bad_totals() {
        let mut m = CorpusManifest::from_entries(vec![ManifestEntry {
            source: "pubmed".into(),
            chunk_count: 3,
            embedding_bytes: 0,
            description: String::new(),
        }]);
        assert!(m.validate().is_ok());
        m.total.chunk_count = 4;
        assert!(matches!(m.validate(), Err(CorpusError::ManifestMismatch { .. })));
    }
}
