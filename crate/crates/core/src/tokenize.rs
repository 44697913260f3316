//! Token counting.
//!
//! Every budget in the engine is expressed in tokens, but no particular
//! model tokenizer is assumed. [`Tokenizer`] is the pluggable counter;
//! [`ByteQuarterTokenizer`] is the default approximation of one token per
//! four bytes of UTF-8, rounded up.

use std::fmt::Debug;

/// Counts tokens in a piece of text.
pub trait Tokenizer: Send + Sync + Debug {
    fn count(&self, text: &str) -> usize;
}

/// `ceil(bytes / 4)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ByteQuarterTokenizer;

impl Tokenizer for ByteQuarterTokenizer {
    fn count(&self, text: &str) -> usize {
        text.len().div_ceil(4)
    }
}

/// Splits on whitespace; one token per word. Handy for hand-checkable tests.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

/// Lowercased alphanumeric runs. Shared by the hash encoder and the overlap
/// scorer so that "Aspirin," and "aspirin" are the same term.
pub fn terms(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_quarter_rounds_up() {
        let t = ByteQuarterTokenizer;
        assert_eq!(t.count(""), 0);
        assert_eq!(t.count("a"), 1);
        assert_eq!(t.count("abcd"), 1);
        assert_eq!(t.count("abcde"), 2);
        // multi-byte characters count by bytes
        assert_eq!(t.count("é"), 1);
        assert_eq!(t.count("ééé"), 2);
    }

    #[test]
    fn terms_strip_punctuation_and_case() {
        let got: Vec<_> = terms("Aspirin, dose-chart (mg)!").collect();
        assert_eq!(got, ["aspirin", "dose", "chart", "mg"]);
    }
}
