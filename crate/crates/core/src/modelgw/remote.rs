//! Chat-completion client for local or hosted inference servers.
//!
//! Request: `{"model"?, "messages": [{"role": "user", "content": prompt}],
//! "temperature", "max_tokens"}`. Response: the first choice's
//! `message.content`, with `usage.prompt_tokens` / `usage.completion_tokens`
//! when the server reports them.

use serde::{Deserialize, Serialize};

use super::{Backend, Completion, CompletionRequest, GatewayError, Role, Usage};
use crate::http::{EndpointConfig, HttpError, JsonEndpoint};
use crate::tokenize::{ByteQuarterTokenizer, Tokenizer};

#[derive(Debug, Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Debug, Serialize)]
struct ChatRequest<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<&'a str>,
    messages: [ChatMessage<'a>; 1],
    temperature: f64,
    max_tokens: usize,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<ChatUsage>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Debug, Deserialize)]
struct ChoiceMessage {
    content: String,
}

#[derive(Debug, Deserialize)]
struct ChatUsage {
    prompt_tokens: usize,
    #[serde(default)]
    completion_tokens: usize,
}

#[derive(Debug)]
pub struct RemoteChatBackend {
    endpoint: JsonEndpoint,
    model: Option<String>,
    tokenizer: ByteQuarterTokenizer,
}

impl RemoteChatBackend {
    pub fn new(cfg: &EndpointConfig, model: Option<String>) -> Self {
        Self {
            endpoint: JsonEndpoint::new(cfg),
            model,
            tokenizer: ByteQuarterTokenizer,
        }
    }
}

fn gateway_error(role: Role, last: HttpError, attempts: u32) -> GatewayError {
    match last {
        HttpError::Timeout => GatewayError::BackendTimeout { role, attempts },
        other => GatewayError::BackendUnavailable {
            role,
            message: format!("{other} after {attempts} attempt(s)"),
        },
    }
}

impl Backend for RemoteChatBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, GatewayError> {
        let body = ChatRequest {
            model: self.model.as_deref(),
            messages: [ChatMessage {
                role: "user",
                content: &req.prompt,
            }],
            temperature: req.temperature,
            max_tokens: req.max_output_tokens,
        };
        let resp: ChatResponse = self
            .endpoint
            .post(&body)
            .map_err(|(last, attempts)| gateway_error(req.role, last, attempts))?;
        let text = resp
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| GatewayError::BackendUnavailable {
                role: req.role,
                message: "response has no choices".into(),
            })?;
        let usage = match resp.usage {
            Some(u) => Usage {
                prompt_tokens: u.prompt_tokens,
                output_tokens: u.completion_tokens,
            },
            None => Usage {
                prompt_tokens: self.tokenizer.count(&req.prompt),
                output_tokens: self.tokenizer.count(&text),
            },
        };
        Ok(Completion { text, usage })
    }
}
