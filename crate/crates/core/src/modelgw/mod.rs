//! The single path for generative model calls.
//!
//! Every call names a [`Role`]: the knowledge gate, the decomposer or the
//! medical answerer. The [`Gateway`] checks the prompt against the role's
//! token budget before anything reaches a backend, so an oversized prompt
//! fails with [`GatewayError::BudgetExceeded`] and no I/O.

mod remote;
mod scripted;

use std::fmt::{self, Debug};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::tokenize::{ByteQuarterTokenizer, Tokenizer};

pub use remote::RemoteChatBackend;
pub use scripted::{Matcher, ScriptedBackend, ScriptedRule};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GatewayError {
    #[error("{role} backend timed out after {attempts} attempt(s)")]
    BackendTimeout { role: Role, attempts: u32 },
    #[error("{role} backend unavailable: {message}")]
    BackendUnavailable { role: Role, message: String },
    #[error("no scripted rule matched the {role} prompt: {excerpt:?}")]
    NoScriptMatch { role: Role, excerpt: String },
    #[error("{role} prompt has {tokens} tokens, budget is {budget}")]
    BudgetExceeded { role: Role, tokens: usize, budget: usize },
    #[error("invalid scripted rules: {0}")]
    BadScript(String),
}

/// Which of the three model bindings a call targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Know,
    Dag,
    Medical,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Know, Role::Dag, Role::Medical];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Know => "know",
            Role::Dag => "dag",
            Role::Medical => "medical",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-role prompt budgets in tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoleBudgets {
    pub know: usize,
    pub dag: usize,
    pub medical: usize,
}

impl Default for RoleBudgets {
    fn default() -> Self {
        Self {
            know: 1024,
            dag: 2048,
            medical: 2816,
        }
    }
}

impl RoleBudgets {
    pub fn get(&self, role: Role) -> usize {
        match role {
            Role::Know => self.know,
            Role::Dag => self.dag,
            Role::Medical => self.medical,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub role: Role,
    pub prompt: String,
    pub max_output_tokens: usize,
    #[serde(default)]
    pub temperature: f64,
}

impl CompletionRequest {
    pub fn new(role: Role, prompt: impl Into<String>, max_output_tokens: usize) -> Self {
        Self {
            role,
            prompt: prompt.into(),
            max_output_tokens,
            temperature: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: usize,
    pub output_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub usage: Usage,
}

/// A model server or stand-in.
pub trait Backend: Send + Sync + Debug {
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, GatewayError>;
}

/// A backend computed by a closure, for tests and adapters.
pub struct FnBackend<F> {
    f: F,
    tokenizer: ByteQuarterTokenizer,
}

impl<F> FnBackend<F>
where
    F: Fn(&CompletionRequest) -> Result<String, GatewayError> + Send + Sync,
{
    pub fn new(f: F) -> Self {
        Self {
            f,
            tokenizer: ByteQuarterTokenizer,
        }
    }
}

impl<F> Debug for FnBackend<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("FnBackend")
    }
}

impl<F> Backend for FnBackend<F>
where
    F: Fn(&CompletionRequest) -> Result<String, GatewayError> + Send + Sync,
{
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, GatewayError> {
        let text = (self.f)(req)?;
        Ok(Completion {
            usage: Usage {
                prompt_tokens: self.tokenizer.count(&req.prompt),
                output_tokens: self.tokenizer.count(&text),
            },
            text,
        })
    }
}

/// Role-bound backends behind budget enforcement.
#[derive(Debug, Clone)]
pub struct Gateway {
    know: Arc<dyn Backend>,
    dag: Arc<dyn Backend>,
    medical: Arc<dyn Backend>,
    budgets: RoleBudgets,
    tokenizer: Arc<dyn Tokenizer>,
    calls: Arc<[AtomicU64; 3]>,
}

impl Gateway {
    pub fn new(know: Arc<dyn Backend>, dag: Arc<dyn Backend>, medical: Arc<dyn Backend>) -> Self {
        Self {
            know,
            dag,
            medical,
            budgets: RoleBudgets::default(),
            tokenizer: Arc::new(ByteQuarterTokenizer),
            calls: Arc::new(Default::default()),
        }
    }

    /// One backend for every role.
    pub fn uniform(backend: Arc<dyn Backend>) -> Self {
        Self::new(backend.clone(), backend.clone(), backend)
    }

    pub fn with_budgets(mut self, budgets: RoleBudgets) -> Self {
        self.budgets = budgets;
        self
    }

    pub fn with_tokenizer(mut self, tokenizer: Arc<dyn Tokenizer>) -> Self {
        self.tokenizer = tokenizer;
        self
    }

    pub fn budgets(&self) -> &RoleBudgets {
        &self.budgets
    }

    pub fn tokenizer(&self) -> &Arc<dyn Tokenizer> {
        &self.tokenizer
    }

    pub fn backend(&self, role: Role) -> &Arc<dyn Backend> {
        match role {
            Role::Know => &self.know,
            Role::Dag => &self.dag,
            Role::Medical => &self.medical,
        }
    }

    /// Calls forwarded to the backend for `role` so far.
    pub fn call_count(&self, role: Role) -> u64 {
        self.calls[role as usize].load(Ordering::Relaxed)
    }

    pub fn complete(&self, req: &CompletionRequest) -> Result<Completion, GatewayError> {
        let tokens = self.tokenizer.count(&req.prompt);
        let budget = self.budgets.get(req.role);
        if tokens > budget {
            return Err(GatewayError::BudgetExceeded {
                role: req.role,
                tokens,
                budget,
            });
        }
        self.calls[req.role as usize].fetch_add(1, Ordering::Relaxed);
        self.backend(req.role).complete(req)
    }
}
