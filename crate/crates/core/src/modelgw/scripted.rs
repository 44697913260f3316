//! Deterministic backend driven by ordered prompt-matching rules.
//!
//! Rules file format: JSONL, one object per line with either `contains`
//! (substring) or `pattern` (regex), plus `response` and an optional
//! `consumes` flag. The first matching rule that is still live wins; a
//! consuming rule answers once and is then skipped.

use std::fs;
use std::path::Path;
use std::sync::Mutex;

use regex::Regex;
use serde::Deserialize;

use super::{Backend, Completion, CompletionRequest, GatewayError, Usage};
use crate::tokenize::{ByteQuarterTokenizer, Tokenizer};

#[derive(Debug, Clone)]
pub enum Matcher {
    Contains(String),
    Pattern(Regex),
}

impl Matcher {
    pub fn matches(&self, prompt: &str) -> bool {
        match self {
            Matcher::Contains(s) => prompt.contains(s.as_str()),
            Matcher::Pattern(re) => re.is_match(prompt),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScriptedRule {
    pub matcher: Matcher,
    pub response: String,
    pub consumes: bool,
}

impl ScriptedRule {
    pub fn contains(needle: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            matcher: Matcher::Contains(needle.into()),
            response: response.into(),
            consumes: false,
        }
    }

    pub fn pattern(re: &str, response: impl Into<String>) -> Result<Self, GatewayError> {
        Ok(Self {
            matcher: Matcher::Pattern(Regex::new(re).map_err(|e| GatewayError::BadScript(e.to_string()))?),
            response: response.into(),
            consumes: false,
        })
    }

    /// Rule that matches every prompt.
    pub fn always(response: impl Into<String>) -> Self {
        Self::contains("", response)
    }

    pub fn once(mut self) -> Self {
        self.consumes = true;
        self
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleLine {
    contains: Option<String>,
    pattern: Option<String>,
    response: String,
    #[serde(default)]
    consumes: bool,
}

#[derive(Debug)]
pub struct ScriptedBackend {
    rules: Vec<ScriptedRule>,
    spent: Mutex<Vec<bool>>,
    tokenizer: ByteQuarterTokenizer,
}

impl ScriptedBackend {
    pub fn new(rules: Vec<ScriptedRule>) -> Self {
        let spent = Mutex::new(vec![false; rules.len()]);
        Self {
            rules,
            spent,
            tokenizer: ByteQuarterTokenizer,
        }
    }

    pub fn parse_rules(jsonl: &str) -> Result<Vec<ScriptedRule>, GatewayError> {
        let mut rules = Vec::new();
        for (i, line) in jsonl.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |m: String| GatewayError::BadScript(format!("line {}: {m}", i + 1));
            let raw: RuleLine = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
            let matcher = match (raw.contains, raw.pattern) {
                (Some(s), None) => Matcher::Contains(s),
                (None, Some(p)) => Matcher::Pattern(Regex::new(&p).map_err(|e| bad(e.to_string()))?),
                _ => return Err(bad("exactly one of `contains` or `pattern` is required".into())),
            };
            rules.push(ScriptedRule {
                matcher,
                response: raw.response,
                consumes: raw.consumes,
            });
        }
        Ok(rules)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| GatewayError::BadScript(format!("{}: {e}", path.display())))?;
        Ok(Self::new(Self::parse_rules(&text)?))
    }
}

impl Backend for ScriptedBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, GatewayError> {
        let mut spent = self.spent.lock().expect("scripted backend poisoned");
        let hit = self
            .rules
            .iter()
            .enumerate()
            .find(|(i, r)| !spent[*i] && r.matcher.matches(&req.prompt));
        let Some((i, rule)) = hit else {
            let excerpt: String = req.prompt.chars().rev().take(120).collect::<Vec<_>>().into_iter().rev().collect();
            return Err(GatewayError::NoScriptMatch {
                role: req.role,
                excerpt,
            });
        };
        if rule.consumes {
            spent[i] = true;
        }
        Ok(Completion {
            text: rule.response.clone(),
            usage: Usage {
                prompt_tokens: self.tokenizer.count(&req.prompt),
                output_tokens: self.tokenizer.count(&rule.response),
            },
        })
    }
}
