//! Model backend abstraction.
//!
//! [`ModelGateway`] wraps any [`ModelBackend`] with the retry policy and cost
//! accounting the runtime relies on. Two backends ship with the crate: the
//! HTTP [`wire::WireBackend`] for OpenAI-compatible chat-completion endpoints
//! and the deterministic [`scripted::ScriptedBackend`] used by tests and
//! offline runs.

mod cost;
mod retry;
pub mod scripted;
pub mod wire;

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::clock::Clock;

pub use cost::{Cost, CostModel, Price, UnknownModel};
pub use retry::RetryPolicy;
pub use scripted::{Script, ScriptError, ScriptRule, ScriptedBackend};
pub use wire::{WireBackend, WireConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub id: String,
    pub name: String,
    pub arguments: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tool_calls: Vec<ToolCall>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call_id: Option<String>,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self::plain(Role::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::plain(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::plain(Role::Assistant, content)
    }

    pub fn assistant_calls(content: impl Into<String>, calls: Vec<ToolCall>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
            tool_calls: calls,
            tool_call_id: None,
        }
    }

    pub fn tool_result(call_id: impl Into<String>, content: impl Into<String>) -> Self {
        Self {
            role: Role::Tool,
            content: content.into(),
            tool_calls: Vec::new(),
            tool_call_id: Some(call_id.into()),
        }
    }

    fn plain(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
            tool_calls: Vec::new(),
            tool_call_id: None,
        }
    }
}

/// JSON-schema description of a callable tool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: String,
    pub description: String,
    pub parameters: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    /// Caller tag. For the scripted backend this is the first half of the
    /// `(agent, step)` lookup key.
    pub agent: String,
    /// Explicit step key. When absent the scripted backend counts calls per
    /// agent tag.
    pub step: Option<u32>,
    pub model: String,
    pub messages: Vec<ChatMessage>,
    /// `None` means tools are disabled for this call.
    pub tools: Option<Vec<ToolSpec>>,
    pub temperature: f64,
    pub max_output_tokens: u32,
    /// Overall deadline for the call including retries.
    pub deadline: Option<Duration>,
}

impl ChatRequest {
    pub fn new(agent: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            agent: agent.into(),
            step: None,
            model: model.into(),
            messages: Vec::new(),
            tools: None,
            temperature: crate::config::DEFAULT_TEMPERATURE,
            max_output_tokens: crate::config::DEFAULT_MAX_OUTPUT_TOKENS,
            deadline: None,
        }
    }

    pub fn message(mut self, msg: ChatMessage) -> Self {
        self.messages.push(msg);
        self
    }

    pub fn tools_enabled(&self) -> bool {
        self.tools.is_some()
    }

    /// All message contents joined by newlines.
    pub fn transcript(&self) -> String {
        let mut out = String::new();
        for m in &self.messages {
            out.push_str(&m.content);
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tool_calls: Vec<ToolCall>,
    pub usage: Usage,
}

impl ChatResponse {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: Some(text.into()),
            ..Default::default()
        }
    }

    pub fn text_or_empty(&self) -> &str {
        self.text.as_deref().unwrap_or("")
    }
}

/// Failure of a single attempt against a backend.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("transient backend failure: {0}")]
    Transient(String),
    #[error("rate limited: {0}")]
    RateLimited(String),
    #[error("request timed out")]
    Timeout,
    #[error("non-retryable backend failure: {0}")]
    NonRetryable(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("script exhausted for ({agent}, {step})")]
    ScriptExhausted { agent: String, step: u32 },
}

impl BackendError {
    /// Timeouts, server-side and rate-limit failures are retried; everything
    /// else is surfaced immediately.
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            BackendError::Transient(_) | BackendError::RateLimited(_) | BackendError::Timeout
        )
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GatewayError {
    #[error("gateway unavailable after {attempts} attempts: {last}")]
    Unavailable { attempts: u32, last: BackendError },
    #[error("{0}")]
    NonRetryable(BackendError),
    #[error(transparent)]
    UnknownModel(#[from] UnknownModel),
}

pub trait ModelBackend: Send + Sync {
    fn send(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

/// A finished call: the response plus what it cost and how many attempts it
/// took.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub response: ChatResponse,
    pub cost: Cost,
    pub attempts: u32,
}

/// Shared front door to the model backend.
#[derive(Clone)]
pub struct ModelGateway {
    backend: Arc<dyn ModelBackend>,
    policy: RetryPolicy,
    costs: CostModel,
    clock: Arc<dyn Clock>,
}

impl ModelGateway {
    pub fn new(
        backend: Arc<dyn ModelBackend>,
        costs: CostModel,
        clock: Arc<dyn Clock>,
    ) -> Self {
        Self {
            backend,
            policy: RetryPolicy::default(),
            costs,
            clock,
        }
    }

    pub fn with_policy(mut self, policy: RetryPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn policy(&self) -> &RetryPolicy {
        &self.policy
    }

    pub fn costs(&self) -> &CostModel {
        &self.costs
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn complete(&self, req: &ChatRequest) -> Result<Completion, GatewayError> {
        self.complete_with(req, &self.policy)
    }

    /// Sends `req`, retrying transient failures under `policy`.
    ///
    /// A request without tool schemas that comes back with tool calls is a
    /// protocol error and is never retried.
    pub fn complete_with(
        &self,
        req: &ChatRequest,
        policy: &RetryPolicy,
    ) -> Result<Completion, GatewayError> {
        // Price lookup first so an unpriced model fails before spending anything.
        self.costs.price(&req.model)?;
        let started = self.clock.now();
        let mut attempt = 0;
        loop {
            attempt += 1;
            let mut attempt_req;
            let send_req = match req.deadline {
                Some(deadline) => {
                    let elapsed = self.clock.now().saturating_sub(started);
                    attempt_req = req.clone();
                    attempt_req.deadline = Some(deadline.saturating_sub(elapsed));
                    &attempt_req
                }
                None => req,
            };
            let err = match self.backend.send(send_req) {
                Ok(resp) => {
                    if !req.tools_enabled() && !resp.tool_calls.is_empty() {
                        return Err(GatewayError::NonRetryable(BackendError::Protocol(
                            "tool calls returned for a request without tool schemas".into(),
                        )));
                    }
                    let cost = self.costs.estimate(&resp.usage, &req.model)?;
                    return Ok(Completion {
                        response: resp,
                        cost,
                        attempts: attempt,
                    });
                }
                Err(e) => e,
            };
            if !err.is_retryable() {
                return Err(GatewayError::NonRetryable(err));
            }
            if attempt >= policy.max_attempts {
                log::warn!("model call for {} failed after {attempt} attempts", req.agent);
                return Err(GatewayError::Unavailable {
                    attempts: attempt,
                    last: err,
                });
            }
            let delay = policy.delay_for(attempt);
            if let Some(deadline) = req.deadline {
                let elapsed = self.clock.now().saturating_sub(started);
                if elapsed + delay >= deadline {
                    return Err(GatewayError::Unavailable {
                        attempts: attempt,
                        last: err,
                    });
                }
            }
            log::debug!(
                "retrying model call for {} in {:.1}s after: {err}",
                req.agent,
                delay.as_secs_f64()
            );
            self.clock.sleep(delay);
        }
    }
}
