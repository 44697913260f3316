//! Knowledge gate: asks the know-role model whether a question can be
//! answered from parametric knowledge alone.

use serde::{Deserialize, Serialize};

use crate::modelgw::{CompletionRequest, Gateway, GatewayError, Role};

/// Gate prompt. `{Query}` is replaced exactly once, in a single pass.
pub const GATE_TEMPLATE: &str = "Below is an instruction that describes a task. Write a response that appropriately completes the request.

### Instruction:
Based on your inner knowledge, determine whether you can answer this medical question. If you are sure you can answer it, please use \"know\" as your only answer. If you cannot answer it or are not confident about it, please use \"unknow\" as your only answer. If the actual situation is that you cannot answer it or the answer is incorrect, but you say \"know\", you will be severely punished.

Medical question: {Query}

### Response:
";

pub(crate) const QUERY_SLOT: &str = "{Query}";

/// Literal single-slot substitution: text inside `value` is never
/// re-interpreted.
pub(crate) fn fill_template(template: &str, value: &str) -> String {
    let (head, tail) = template
        .split_once(QUERY_SLOT)
        .expect("template has a query slot");
    let mut out = String::with_capacity(template.len() + value.len());
    out.push_str(head);
    out.push_str(value);
    out.push_str(tail);
    out
}

pub fn render_gate_prompt(question: &str) -> String {
    fill_template(GATE_TEMPLATE, question)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Knowledge {
    Know,
    Unknow,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateDecision {
    pub decision: Knowledge,
    pub raw_output: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GateError {
    #[error("gate output {raw_output:?} is neither know nor unknow")]
    AmbiguousGateOutput { raw_output: String },
    #[error(transparent)]
    Backend(#[from] GatewayError),
}

/// Lowercase, trim, strip trailing punctuation, take the first word, and
/// drop any punctuation wrapped around it. `know` is positive; `unknow` and
/// `unknown` are negative.
pub fn parse_gate_output(raw_output: &str) -> Result<Knowledge, GateError> {
    let lowered = raw_output.to_lowercase();
    let trimmed = lowered.trim().trim_end_matches(|c: char| c.is_ascii_punctuation());
    let first = trimmed
        .split_whitespace()
        .next()
        .unwrap_or("")
        .trim_matches(|c: char| !c.is_alphanumeric());
    match first {
        "know" => Ok(Knowledge::Know),
        "unknow" | "unknown" => Ok(Knowledge::Unknow),
        _ => Err(GateError::AmbiguousGateOutput {
            raw_output: raw_output.to_string(),
        }),
    }
}

/// Max output tokens for a gate call; the answer is a single word.
pub const GATE_OUTPUT_TOKENS: usize = 8;

pub fn classify(gateway: &Gateway, question: &str) -> Result<GateDecision, GateError> {
    let req = CompletionRequest::new(Role::Know, render_gate_prompt(question), GATE_OUTPUT_TOKENS);
    let out = gateway.complete(&req)?;
    let decision = parse_gate_output(&out.text)?;
    Ok(GateDecision {
        decision,
        raw_output: out.text,
    })
}
