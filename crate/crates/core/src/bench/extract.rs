//! Option presentation and answer extraction.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{AnswerOption, BenchItem, ItemKind};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extracted {
    Label(String),
    Unparsed,
}

impl Extracted {
    pub fn label(&self) -> Option<&str> {
        match self {
            Extracted::Label(l) => Some(l),
            Extracted::Unparsed => None,
        }
    }
}

static LETTER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b([A-D])\b").unwrap());
static FOLLOWED_BY_WORD: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s+[a-z]").unwrap());
static YES_NO: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\b(yes|no|maybe)\b").unwrap());

fn normalize(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .trim_end_matches('.')
        .to_lowercase()
}

fn extract_from(text: &str, kind: ItemKind, options: &[AnswerOption]) -> Extracted {
    let whole = normalize(text);
    if let Some(o) = options.iter().find(|o| normalize(&o.text) == whole) {
        return Extracted::Label(o.label.clone());
    }
    let has = |l: &str| options.iter().find(|o| o.label.eq_ignore_ascii_case(l));
    match kind {
        ItemKind::Mcq => {
            for m in LETTER.captures_iter(text) {
                let g = m.get(1).unwrap();
                // "A" followed by a lowercase word is the article.
                if g.as_str() == "A" && FOLLOWED_BY_WORD.is_match(&text[g.end()..]) {
                    continue;
                }
                if let Some(o) = has(g.as_str()) {
                    return Extracted::Label(o.label.clone());
                }
            }
        }
        ItemKind::Boolean | ItemKind::Boolean3 => {
            for m in YES_NO.captures_iter(text) {
                if let Some(o) = has(&m[1]) {
                    return Extracted::Label(o.label.clone());
                }
            }
        }
    }
    Extracted::Unparsed
}

/// An exact match of an option's full text wins; otherwise the first
/// standalone option label (capital A-D, or yes/no/maybe in any case).
pub fn extract_answer(model_text: &str, item: &BenchItem) -> Extracted {
    extract_from(model_text, item.kind, &item.options)
}

/// An item shown with its options in some order. For lettered items the
/// letters stay A-D and the texts move; for yes/no items the words move.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Presentation<'a> {
    item: &'a BenchItem,
    order: Vec<usize>,
    shown: Vec<AnswerOption>,
}

impl<'a> Presentation<'a> {
    pub fn identity(item: &'a BenchItem) -> Self {
        Self::permuted(item, (0..item.options.len()).collect())
    }

    /// `order[j]` is the original index of the option shown at position j.
    pub fn permuted(item: &'a BenchItem, order: Vec<usize>) -> Self {
        let mut check = order.clone();
        check.sort_unstable();
        assert!(
            check.iter().copied().eq(0..item.options.len()),
            "order must permute the option indices"
        );
        let shown = order
            .iter()
            .enumerate()
            .map(|(j, &i)| match item.kind {
                ItemKind::Mcq => AnswerOption {
                    label: ItemKind::Mcq.labels()[j].to_string(),
                    text: item.options[i].text.clone(),
                },
                ItemKind::Boolean | ItemKind::Boolean3 => item.options[i].clone(),
            })
            .collect();
        Self { item, order, shown }
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn options(&self) -> &[AnswerOption] {
        &self.shown
    }

    /// The question as handed to the pipeline.
    pub fn render(&self) -> String {
        let mut out = String::new();
        if let Some(ctx) = &self.item.context {
            out.push_str("Context: ");
            out.push_str(ctx);
            out.push_str("\n\n");
        }
        out.push_str(self.item.question.trim());
        out.push('\n');
        match self.item.kind {
            ItemKind::Mcq => {
                for o in &self.shown {
                    out.push_str(&format!("{}. {}\n", o.label, o.text));
                }
            }
            ItemKind::Boolean | ItemKind::Boolean3 => {
                let words: Vec<&str> = self.shown.iter().map(|o| o.label.as_str()).collect();
                out.push_str(&format!("Options: {}\n", words.join(", ")));
            }
        }
        out
    }

    /// Extracts against the shown options and maps back to the item's own
    /// labels.
    pub fn extract(&self, model_text: &str) -> Extracted {
        match extract_from(model_text, self.item.kind, &self.shown) {
            Extracted::Label(shown) => {
                let j = self.shown.iter().position(|o| o.label == shown).expect("extracted from shown");
                Extracted::Label(self.item.options[self.order[j]].label.clone())
            }
            Extracted::Unparsed => Extracted::Unparsed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mcq() -> BenchItem {
        let texts: Vec<String> = ["Aspirin", "Vitamin D", "Insulin", "Heparin"].iter().map(|s| s.to_string()).collect();
        BenchItem::new("1", "Which drug?", ItemKind::Mcq, &texts, "A", None).unwrap()
    }

    fn boolean() -> BenchItem {
        BenchItem::new("2", "Is it?", ItemKind::Boolean, &[], "yes", None).unwrap()
    }

    fn label(s: &str) -> Extracted {
        Extracted::Label(s.into())
    }

    #[test]
    fn letter_rule() {
        assert_eq!(extract_answer("The answer is (B).", &mcq()), label("B"));
        assert_eq!(extract_answer("C", &mcq()), label("C"));
        assert_eq!(extract_answer("A patient like this needs D.", &mcq()), label("D"));
        assert_eq!(extract_answer("Answer: A", &mcq()), label("A"));
    }

    #[test]
    fn full_text_rule() {
        assert_eq!(extract_answer("Insulin", &mcq()), label("C"));
        assert_eq!(extract_answer("  vitamin d. ", &mcq()), label("B"));
    }

    #[test]
    fn unparsed() {
        assert_eq!(extract_answer("insufficient information", &boolean()), Extracted::Unparsed);
        assert_eq!(extract_answer("none of these", &mcq()), Extracted::Unparsed);
        assert_eq!(extract_answer("maybe", &boolean()), Extracted::Unparsed);
    }

    #[test]
    fn yes_no_words() {
        assert_eq!(extract_answer("No, it is not.", &boolean()), label("No"));
        assert_eq!(extract_answer("Final answer: YES", &boolean()), label("Yes"));
        assert_eq!(extract_answer("nothing known", &boolean()), Extracted::Unparsed);
    }

    #[test]
    fn permuted_extraction_maps_back() {
        let item = mcq();
        let p = Presentation::permuted(&item, vec![2, 0, 3, 1]);
        assert_eq!(p.options()[0].text, "Insulin");
        assert!(p.render().contains("A. Insulin\nB. Aspirin\nC. Heparin\nD. Vitamin D\n"));
        assert_eq!(p.extract("B"), label("A"));
        assert_eq!(p.extract("Heparin"), label("D"));
        assert_eq!(Presentation::identity(&item).extract("B"), label("B"));
    }

    #[test]
    fn boolean_render() {
        let item = BenchItem::new("3", "Q?", ItemKind::Boolean3, &[], "maybe", Some("ctx".into())).unwrap();
        let p = Presentation::permuted(&item, vec![2, 0, 1]);
        assert_eq!(p.render(), "Context: ctx\n\nQ?\nOptions: Maybe, Yes, No\n");
        assert_eq!(p.extract("maybe so"), label("Maybe"));
    }
}
