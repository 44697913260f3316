//! Prompt assembly for answering calls and budget-driven truncation.
//!
//! A prompt is kept structured until the last moment so that truncation
//! can drop whole units in priority order: lowest-ranked passages first,
//! then the oldest prior question/answer pairs, then the draft. The header,
//! any notes and the question itself are never removed.

use serde::{Deserialize, Serialize};

use crate::retrieve::Passage;
use crate::tokenize::Tokenizer;

/// A question already answered earlier in the run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ComposedPrompt {
    pub header: String,
    /// Best first.
    pub passages: Vec<Passage>,
    pub draft: Option<String>,
    /// Oldest first.
    pub prior: Vec<QaPair>,
    pub notes: Vec<String>,
    pub question: String,
}

impl ComposedPrompt {
    pub fn question(question: impl Into<String>) -> Self {
        Self {
            question: question.into(),
            ..Self::default()
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        if !self.header.is_empty() {
            out.push_str(&self.header);
            out.push_str("\n\n");
        }
        if !self.passages.is_empty() {
            out.push_str("Documents:\n");
            for (i, p) in self.passages.iter().enumerate() {
                out.push_str(&format!("[{}] {}\n", i + 1, p.text));
            }
            out.push('\n');
        }
        if let Some(draft) = &self.draft {
            out.push_str("Draft answer:\n");
            out.push_str(draft);
            out.push_str("\n\n");
        }
        if !self.prior.is_empty() {
            out.push_str("Answered sub-questions:\n");
            for qa in &self.prior {
                out.push_str(&format!("Q: {}\nA: {}\n", qa.question, qa.answer));
            }
            out.push('\n');
        }
        if !self.notes.is_empty() {
            out.push_str("Unanswered sub-questions:\n");
            for n in &self.notes {
                out.push_str(&format!("- {n}\n"));
            }
            out.push('\n');
        }
        out.push_str("Question: ");
        out.push_str(&self.question);
        out.push('\n');
        out
    }

    /// The part truncation can never remove.
    fn floor(&self) -> ComposedPrompt {
        ComposedPrompt {
            header: self.header.clone(),
            notes: self.notes.clone(),
            question: self.question.clone(),
            ..Default::default()
        }
    }
}

/// Documents, then prior answers, then the question. Passages are sorted
/// by descending score (ties by chunk id) regardless of input order.
pub fn compose_subtask_prompt(question: &str, docs: &[Passage], dep_answers: &[QaPair]) -> ComposedPrompt {
    let mut passages = docs.to_vec();
    passages.sort_by(|a, b| a.doc.rank_cmp(&b.doc));
    ComposedPrompt {
        passages,
        prior: dep_answers.to_vec(),
        ..ComposedPrompt::question(question)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("header and question alone need {tokens} tokens, budget is {budget}")]
pub struct BudgetImpossible {
    pub tokens: usize,
    pub budget: usize,
}

/// What [`enforce_budget`] removed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Truncation {
    pub original_tokens: usize,
    pub final_tokens: usize,
    pub passages_dropped: usize,
    pub pairs_dropped: usize,
    pub draft_dropped: bool,
}

/// Drops units until the rendered prompt fits `budget` tokens: the
/// lowest-ranked passage first, then the oldest answered pair, then the draft.
pub fn enforce_budget(
    mut prompt: ComposedPrompt,
    budget: usize,
    tokenizer: &dyn Tokenizer,
) -> Result<(ComposedPrompt, Truncation), BudgetImpossible> {
    let original_tokens = tokenizer.count(&prompt.render());
    let mut t = Truncation {
        original_tokens,
        final_tokens: original_tokens,
        ..Default::default()
    };
    if original_tokens <= budget {
        return Ok((prompt, t));
    }
    let floor = tokenizer.count(&prompt.floor().render());
    if floor > budget {
        return Err(BudgetImpossible { tokens: floor, budget });
    }
    loop {
        let tokens = tokenizer.count(&prompt.render());
        if tokens <= budget {
            t.final_tokens = tokens;
            return Ok((prompt, t));
        }
        let worst = (0..prompt.passages.len()).max_by(|&a, &b| prompt.passages[a].doc.rank_cmp(&prompt.passages[b].doc));
        if let Some(i) = worst {
            prompt.passages.remove(i);
            t.passages_dropped += 1;
        } else if !prompt.prior.is_empty() {
            prompt.prior.remove(0);
            t.pairs_dropped += 1;
        } else if prompt.draft.take().is_some() {
            t.draft_dropped = true;
        } else {
            unreachable!("floor fits the budget");
        }
    }
}
