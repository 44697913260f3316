//! Dataset loading.
//!
//! `native` is JSONL with the [`BenchItem`] fields; `options` may be
//! omitted for yes/no kinds. The adapters read the layouts the public
//! benchmark releases ship in:
//!
//! | format     | layout                                                                  |
//! |------------|-------------------------------------------------------------------------|
//! | `medqa`    | JSONL: `question`, `options` {A..D}, `answer_idx`                       |
//! | `medmcqa`  | JSONL: `id`, `question`, `opa`..`opd`, `cop` (1-based option number)    |
//! | `mmlu`     | headerless CSV: question, A, B, C, D, answer letter                     |
//! | `pubmedqa` | JSON object keyed by PMID: `QUESTION`, `CONTEXTS`, `final_decision`     |
//! | `bioasq`   | JSON `{"questions": [...]}`; `yesno` items with `body`, `exact_answer`  |

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::Deserialize;
use serde_json::Value;

use super::{AnswerOption, BenchError, BenchItem, ItemKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DatasetFormat {
    Native,
    MedQa,
    MedMcqa,
    Mmlu,
    PubMedQa,
    BioAsq,
}

impl FromStr for DatasetFormat {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, BenchError> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "native" | "jsonl" => DatasetFormat::Native,
            "medqa" => DatasetFormat::MedQa,
            "medmcqa" => DatasetFormat::MedMcqa,
            "mmlu" | "mmlu-med" => DatasetFormat::Mmlu,
            "pubmedqa" => DatasetFormat::PubMedQa,
            "bioasq" => DatasetFormat::BioAsq,
            _ => return Err(BenchError::UnknownFormat(s.to_string())),
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadOptions {
    /// Drop any bundled context passage and keep only the question.
    pub questions_only: bool,
}

pub fn load_dataset(path: impl AsRef<Path>, format: DatasetFormat, opts: LoadOptions) -> Result<Vec<BenchItem>, BenchError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_dataset(&text, format, opts, path)
}

/// `origin` is only used in error messages.
pub fn parse_dataset(text: &str, format: DatasetFormat, opts: LoadOptions, origin: &Path) -> Result<Vec<BenchItem>, BenchError> {
    let ctx = Ctx { origin };
    let mut items = match format {
        DatasetFormat::Native => ctx.jsonl(text, native)?,
        DatasetFormat::MedQa => ctx.jsonl(text, medqa)?,
        DatasetFormat::MedMcqa => ctx.jsonl(text, medmcqa)?,
        DatasetFormat::Mmlu => ctx.mmlu(text)?,
        DatasetFormat::PubMedQa => ctx.pubmedqa(text)?,
        DatasetFormat::BioAsq => ctx.bioasq(text)?,
    };
    let mut seen = HashSet::new();
    for item in &mut items {
        if !seen.insert(item.id.clone()) {
            return Err(BenchError::DuplicateItem(item.id.clone()));
        }
        if opts.questions_only {
            item.context = None;
        }
    }
    Ok(items)
}

struct Ctx<'a> {
    origin: &'a Path,
}

enum LineError {
    Format(String),
    Item(BenchError),
}

impl From<serde_json::Error> for LineError {
    fn from(e: serde_json::Error) -> Self {
        LineError::Format(e.to_string())
    }
}

impl From<BenchError> for LineError {
    fn from(e: BenchError) -> Self {
        LineError::Item(e)
    }
}

impl Ctx<'_> {
    fn format_error(&self, line: usize, message: impl Into<String>) -> BenchError {
        BenchError::Format {
            path: self.origin.to_path_buf(),
            line,
            message: message.into(),
        }
    }

    fn jsonl(&self, text: &str, parse: fn(&str, usize) -> Result<BenchItem, LineError>) -> Result<Vec<BenchItem>, BenchError> {
        let mut items = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match parse(line, i + 1) {
                Ok(item) => items.push(item),
                Err(LineError::Format(m)) => return Err(self.format_error(i + 1, m)),
                Err(LineError::Item(e)) => return Err(e),
            }
        }
        Ok(items)
    }

    fn mmlu(&self, text: &str) -> Result<Vec<BenchItem>, BenchError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(text.as_bytes());
        let mut items = Vec::new();
        for (i, row) in reader.records().enumerate() {
            let line = i + 1;
            let row = row.map_err(|e| self.format_error(line, e.to_string()))?;
            if row.len() != 6 {
                return Err(self.format_error(line, format!("expected 6 columns, found {}", row.len())));
            }
            let texts: Vec<String> = (1..5).map(|c| row[c].to_string()).collect();
            items.push(BenchItem::new(format!("mmlu-{line}"), &row[0], ItemKind::Mcq, &texts, &row[5], None)?);
        }
        Ok(items)
    }

    fn pubmedqa(&self, text: &str) -> Result<Vec<BenchItem>, BenchError> {
        #[derive(Deserialize)]
        struct Entry {
            #[serde(rename = "QUESTION")]
            question: String,
            #[serde(rename = "CONTEXTS", default)]
            contexts: Vec<String>,
            final_decision: String,
        }
        let entries: BTreeMap<String, Entry> =
            serde_json::from_str(text).map_err(|e| self.format_error(e.line(), e.to_string()))?;
        entries
            .into_iter()
            .map(|(pmid, e)| {
                let context = (!e.contexts.is_empty()).then(|| e.contexts.join("\n"));
                BenchItem::new(pmid, e.question, ItemKind::Boolean3, &[], &e.final_decision, context)
            })
            .collect()
    }

    fn bioasq(&self, text: &str) -> Result<Vec<BenchItem>, BenchError> {
        #[derive(Deserialize)]
        struct File {
            questions: Vec<Question>,
        }
        #[derive(Deserialize)]
        struct Question {
            id: String,
            body: String,
            #[serde(rename = "type")]
            kind: String,
            #[serde(default)]
            exact_answer: Value,
            #[serde(default)]
            snippets: Vec<Snippet>,
        }
        #[derive(Deserialize)]
        struct Snippet {
            text: String,
        }
        let file: File = serde_json::from_str(text).map_err(|e| self.format_error(e.line(), e.to_string()))?;
        file.questions
            .into_iter()
            .filter(|q| q.kind == "yesno")
            .map(|q| {
                let gold = match &q.exact_answer {
                    Value::String(s) => s.clone(),
                    Value::Array(a) => a.first().and_then(Value::as_str).unwrap_or_default().to_string(),
                    _ => String::new(),
                };
                let context = (!q.snippets.is_empty()).then(|| {
                    q.snippets.iter().map(|s| s.text.as_str()).collect::<Vec<_>>().join("\n")
                });
                BenchItem::new(q.id, q.body, ItemKind::Boolean, &[], &gold, context)
            })
            .collect()
    }
}

fn native(line: &str, _n: usize) -> Result<BenchItem, LineError> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Raw {
        id: String,
        question: String,
        kind: ItemKind,
        #[serde(default)]
        options: Vec<AnswerOption>,
        gold: String,
        #[serde(default)]
        context: Option<String>,
    }
    let raw: Raw = serde_json::from_str(line)?;
    if raw.kind == ItemKind::Mcq {
        let labels: Vec<&str> = raw.options.iter().map(|o| o.label.as_str()).collect();
        if labels.len() == 4 && labels != ItemKind::Mcq.labels() {
            return Err(LineError::Format(format!("mcq option labels must be A, B, C, D in order, got {labels:?}")));
        }
    }
    let texts: Vec<String> = raw.options.into_iter().map(|o| o.text).collect();
    Ok(BenchItem::new(raw.id, raw.question, raw.kind, &texts, &raw.gold, raw.context)?)
}

fn medqa(line: &str, n: usize) -> Result<BenchItem, LineError> {
    #[derive(Deserialize)]
    struct Raw {
        #[serde(default)]
        id: Option<String>,
        question: String,
        options: BTreeMap<String, String>,
        answer_idx: String,
    }
    let raw: Raw = serde_json::from_str(line)?;
    let id = raw.id.unwrap_or_else(|| format!("medqa-{n}"));
    let keys: Vec<&str> = raw.options.keys().map(String::as_str).collect();
    if keys != ItemKind::Mcq.labels() {
        return Err(LineError::Item(BenchError::InvalidItem {
            id,
            message: format!("mcq needs options A, B, C, D, got {keys:?}"),
        }));
    }
    let texts: Vec<String> = raw.options.into_values().collect();
    Ok(BenchItem::new(id, raw.question, ItemKind::Mcq, &texts, &raw.answer_idx, None)?)
}

fn medmcqa(line: &str, n: usize) -> Result<BenchItem, LineError> {
    #[derive(Deserialize)]
    struct Raw {
        #[serde(default)]
        id: Option<String>,
        question: String,
        opa: String,
        opb: String,
        opc: String,
        opd: String,
        cop: u32,
    }
    let raw: Raw = serde_json::from_str(line)?;
    let id = raw.id.unwrap_or_else(|| format!("medmcqa-{n}"));
    let gold = match raw.cop {
        1..=4 => ItemKind::Mcq.labels()[raw.cop as usize - 1].to_string(),
        other => other.to_string(),
    };
    Ok(BenchItem::new(id, raw.question, ItemKind::Mcq, &[raw.opa, raw.opb, raw.opc, raw.opd], &gold, None)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str, format: DatasetFormat) -> Result<Vec<BenchItem>, BenchError> {
        parse_dataset(text, format, LoadOptions::default(), Path::new("fixture"))
    }

    #[test]
    fn native_mcq_and_boolean() {
        let text = r#"{"id":"1","question":"q","kind":"mcq","options":[{"label":"A","text":"a"},{"label":"B","text":"b"},{"label":"C","text":"c"},{"label":"D","text":"d"}],"gold":"C"}
{"id":"2","question":"q2","kind":"boolean3","gold":"maybe","context":"ctx"}"#;
        let items = parse(text, DatasetFormat::Native).unwrap();
        assert_eq!(items.len(), 2);
        assert_eq!(items[0].gold, "C");
        assert_eq!(items[1].gold, "Maybe");
        assert_eq!(items[1].labels().collect::<Vec<_>>(), ["Yes", "No", "Maybe"]);
        assert_eq!(items[1].context.as_deref(), Some("ctx"));
    }

    #[test]
    fn gold_outside_options() {
        let text = r#"{"id":"1","question":"q","kind":"mcq","options":[{"label":"A","text":"a"},{"label":"B","text":"b"},{"label":"C","text":"c"},{"label":"D","text":"d"}],"gold":"E"}"#;
        assert!(matches!(parse(text, DatasetFormat::Native), Err(BenchError::MissingGold { .. })));
        let text = r#"{"id":"1","question":"q","kind":"boolean","gold":"maybe"}"#;
        assert!(matches!(parse(text, DatasetFormat::Native), Err(BenchError::MissingGold { .. })));
    }

    #[test]
    fn format_errors_carry_line_numbers() {
        let text = "{\"id\":\"1\",\"question\":\"q\",\"kind\":\"boolean\",\"gold\":\"yes\"}\n\nnot json\n";
        match parse(text, DatasetFormat::Native) {
            Err(BenchError::Format { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn medqa_layout() {
        let line = r#"{"question": "A 23-year-old...", "answer": "Nitrofurantoin", "options": {"A": "Ampicillin", "B": "Ceftriaxone", "C": "Doxycycline", "D": "Nitrofurantoin"}, "meta_info": "step2&3", "answer_idx": "D"}"#;
        let items = parse(&format!("{line}\n{line}"), DatasetFormat::MedQa).unwrap();
        assert_eq!(items[1].id, "medqa-2");
        assert_eq!(items[0].gold, "D");
        assert_eq!(items[0].options[3].text, "Nitrofurantoin");
        let five = line.replace(r#""D": "Nitrofurantoin""#, r#""D": "x", "E": "y""#);
        assert!(parse(&five, DatasetFormat::MedQa).is_err());
    }

    #[test]
    fn medmcqa_layout() {
        let line = r#"{"id":"abc","question":"q","opa":"a","opb":"b","opc":"c","opd":"d","cop":2,"exp":"because","subject_name":"Anatomy"}"#;
        let items = parse(line, DatasetFormat::MedMcqa).unwrap();
        assert_eq!(items[0].gold, "B");
        let bad = line.replace(r#""cop":2"#, r#""cop":7"#);
        assert!(matches!(parse(&bad, DatasetFormat::MedMcqa), Err(BenchError::MissingGold { .. })));
    }

    #[test]
    fn mmlu_layout() {
        let text = "\"Which bone, is longest?\",Femur,Tibia,Ulna,Radius,A\nq2,a,b,c,d,c\n";
        let items = parse(text, DatasetFormat::Mmlu).unwrap();
        assert_eq!(items[0].question, "Which bone, is longest?");
        assert_eq!(items[1].gold, "C");
        assert!(parse("q,a,b,A\n", DatasetFormat::Mmlu).is_err());
    }

    #[test]
    fn pubmedqa_layout_and_questions_only() {
        let text = r#"{"21645374": {"QUESTION": "Do mitochondria play a role?", "CONTEXTS": ["c1", "c2"], "final_decision": "yes"}}"#;
        let items = parse(text, DatasetFormat::PubMedQa).unwrap();
        assert_eq!(items[0].kind, ItemKind::Boolean3);
        assert_eq!(items[0].context.as_deref(), Some("c1\nc2"));
        let bare = parse_dataset(
            text,
            DatasetFormat::PubMedQa,
            LoadOptions { questions_only: true },
            Path::new("f"),
        )
        .unwrap();
        assert!(bare[0].context.is_none());
    }

    #[test]
    fn bioasq_keeps_yesno_only() {
        let text = r#"{"questions": [
            {"id": "a", "body": "Is X a kinase?", "type": "yesno", "exact_answer": "yes", "snippets": [{"text": "s"}]},
            {"id": "b", "body": "List genes", "type": "list", "exact_answer": [["g"]]}
        ]}"#;
        let items = parse(text, DatasetFormat::BioAsq).unwrap();
        assert_eq!(items.len(), 1);
        assert_eq!(items[0].gold, "Yes");
        assert_eq!(items[0].kind, ItemKind::Boolean);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let line = r#"{"id":"1","question":"q","kind":"boolean","gold":"yes"}"#;
        assert!(matches!(
            parse(&format!("{line}\n{line}"), DatasetFormat::Native),
            Err(BenchError::DuplicateItem(_))
        ));
    }
}
