//! Client for OpenAI-compatible `/chat/completions` endpoints.

use std::time::Duration;

use serde_json::{json, Map, Value};

use super::{BackendError, ChatRequest, ChatResponse, ModelBackend, Role, ToolCall, Usage};

pub const ENV_ENDPOINT: &str = "COHORT_ENDPOINT";
pub const ENV_API_KEY: &str = "COHORT_API_KEY";

#[derive(Debug, Clone)]
pub struct WireConfig {
    /// Base URL, e.g. `http://localhost:4000/v1`.
    pub endpoint: String,
    pub api_key: Option<String>,
    pub request_timeout: Duration,
}

impl WireConfig {
    pub fn from_env() -> Option<Self> {
        let endpoint = std::env::var(ENV_ENDPOINT).ok()?;
        Some(Self {
            endpoint,
            api_key: std::env::var(ENV_API_KEY).ok(),
            request_timeout: Duration::from_secs(600),
        })
    }
}

pub struct WireBackend {
    config: WireConfig,
    agent: ureq::Agent,
}

impl WireBackend {
    pub fn new(config: WireConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(config.request_timeout))
            .build()
            .into();
        Self { config, agent }
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.config.endpoint.trim_end_matches('/'))
    }
}

/// Serializes a request body. Tool schemas are rebuilt on every call.
pub fn encode_request(req: &ChatRequest) -> Value {
    let messages: Vec<Value> = req
        .messages
        .iter()
        .map(|m| {
            let mut obj = Map::new();
            let role = match m.role {
                Role::System => "system",
                Role::User => "user",
                Role::Assistant => "assistant",
                Role::Tool => "tool",
            };
            obj.insert("role".into(), json!(role));
            obj.insert("content".into(), json!(m.content));
            if !m.tool_calls.is_empty() {
                let calls: Vec<Value> = m
                    .tool_calls
                    .iter()
                    .map(|c| {
                        json!({
                            "id": c.id,
                            "type": "function",
                            "function": {"name": c.name, "arguments": c.arguments.to_string()},
                        })
                    })
                    .collect();
                obj.insert("tool_calls".into(), Value::Array(calls));
            }
            if let Some(id) = &m.tool_call_id {
                obj.insert("tool_call_id".into(), json!(id));
            }
            Value::Object(obj)
        })
        .collect();
    let mut body = json!({
        "model": req.model,
        "messages": messages,
        "temperature": req.temperature,
        "max_tokens": req.max_output_tokens,
    });
    if let Some(tools) = &req.tools {
        let tools: Vec<Value> = tools
            .iter()
            .map(|t| {
                json!({
                    "type": "function",
                    "function": {
                        "name": t.name,
                        "description": t.description,
                        "parameters": t.parameters,
                    }
                })
            })
            .collect();
        body["tools"] = Value::Array(tools);
    }
    body
}

/// Parses a response body. Tool calls in the answer to a tool-free request
/// are a protocol error.
pub fn decode_response(req: &ChatRequest, body: &Value) -> Result<ChatResponse, BackendError> {
    let proto = |m: &str| BackendError::Protocol(m.to_string());
    let message = body
        .pointer("/choices/0/message")
        .ok_or_else(|| proto("response has no choices[0].message"))?;
    let text = message
        .get("content")
        .and_then(Value::as_str)
        .map(str::to_string);
    let mut tool_calls = Vec::new();
    if let Some(calls) = message.get("tool_calls").and_then(Value::as_array) {
        for call in calls {
            let id = call.get("id").and_then(Value::as_str).unwrap_or_default();
            let name = call
                .pointer("/function/name")
                .and_then(Value::as_str)
                .ok_or_else(|| proto("tool call without function name"))?;
            let arguments = match call.pointer("/function/arguments") {
                Some(Value::String(s)) if s.trim().is_empty() => json!({}),
                Some(Value::String(s)) => serde_json::from_str(s)
                    .map_err(|e| proto(&format!("tool call arguments are not JSON: {e}")))?,
                Some(v) => v.clone(),
                None => json!({}),
            };
            tool_calls.push(ToolCall {
                id: id.to_string(),
                name: name.to_string(),
                arguments,
            });
        }
    }
    if !req.tools_enabled() && !tool_calls.is_empty() {
        return Err(proto("tool calls returned for a request without tool schemas"));
    }
    let tokens = |p: &str| body.pointer(p).and_then(Value::as_u64).unwrap_or(0);
    Ok(ChatResponse {
        text,
        tool_calls,
        usage: Usage {
            input_tokens: tokens("/usage/prompt_tokens"),
            output_tokens: tokens("/usage/completion_tokens"),
        },
    })
}

/// 408, 429 and 5xx are retryable; other 4xx are not.
pub fn classify_status(status: u16, body: &str) -> BackendError {
    let detail = format!("HTTP {status}: {}", body.chars().take(200).collect::<String>());
    match status {
        408 => BackendError::Timeout,
        429 => BackendError::RateLimited(detail),
        500..=599 => BackendError::Transient(detail),
        _ => BackendError::NonRetryable(detail),
    }
}

impl ModelBackend for WireBackend {
    fn send(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let mut call = self.agent.post(&self.url());
        if let Some(key) = &self.config.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        if let Some(deadline) = req.deadline {
            call = call
                .config()
                .timeout_global(Some(deadline.min(self.config.request_timeout)))
                .build();
        }
        let mut resp = match call.send_json(encode_request(req)) {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => return Err(BackendError::Timeout),
            Err(e) => return Err(BackendError::Transient(e.to_string())),
        };
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transient(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(classify_status(status, &text));
        }
        let body: Value = serde_json::from_str(&text)
            .map_err(|e| BackendError::Protocol(format!("response is not JSON: {e}")))?;
        decode_response(req, &body)
    }
}
