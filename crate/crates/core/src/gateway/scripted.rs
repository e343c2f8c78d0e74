//! Deterministic backend driven by a response script keyed by `(agent, step)`.
//!
//! Script files are plain text. Each rule starts with a header line
//! `=== <agent|*> <step|*>` followed by directives:
//!
//! ```text
//! # comments start with '#'
//! === developer 1
//! usage 1200 80
//! delay 2.5
//! when verify the diff
//! call finalize {"deliverable": "patched"}
//! text Done.
//! ```
//!
//! * `text <line>` appends one line to the response text (`text` alone adds
//!   an empty line).
//! * `call <tool> [json]` appends a tool call.
//! * `when <substring>` restricts the rule to requests whose transcript
//!   contains the substring; several `when` lines must all match.
//! * `fail <n> transient|timeout|ratelimit|fatal` makes the first `n` attempts
//!   at this key fail.
//! * `delay <seconds>` advances the clock before answering.
//! * `usage <input> <output>` sets the reported token usage.
//!
//! Lookup tries `(agent, step)`, then `(agent, *)`, `(*, step)` and `(*, *)`,
//! taking the first rule in file order whose `when` conditions hold.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde_json::Value;
use thiserror::Error;

use super::{BackendError, ChatRequest, ChatResponse, ModelBackend, ToolCall, Usage};
use crate::clock::Clock;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailKind {
    Transient,
    Timeout,
    RateLimit,
    Fatal,
}

impl FailKind {
    fn error(self) -> BackendError {
        match self {
            FailKind::Transient => BackendError::Transient("scripted failure".into()),
            FailKind::Timeout => BackendError::Timeout,
            FailKind::RateLimit => BackendError::RateLimited("scripted".into()),
            FailKind::Fatal => BackendError::NonRetryable("scripted fatal failure".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScriptRule {
    /// `None` matches any agent.
    pub agent: Option<String>,
    /// `None` matches any step.
    pub step: Option<u32>,
    pub when: Vec<String>,
    pub fail: Option<(u32, FailKind)>,
    pub delay: Option<Duration>,
    pub response: ChatResponse,
}

impl ScriptRule {
    pub fn new(agent: Option<&str>, step: Option<u32>, response: ChatResponse) -> Self {
        Self {
            agent: agent.map(str::to_string),
            step,
            when: Vec::new(),
            fail: None,
            delay: None,
            response,
        }
    }

    pub fn when(mut self, needle: impl Into<String>) -> Self {
        self.when.push(needle.into());
        self
    }

    pub fn fail_first(mut self, n: u32, kind: FailKind) -> Self {
        self.fail = Some((n, kind));
        self
    }

    pub fn delay(mut self, d: Duration) -> Self {
        self.delay = Some(d);
        self
    }

    fn matches_text(&self, transcript: &str) -> bool {
        self.when.iter().all(|w| transcript.contains(w.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("script line {line}: {message}")]
pub struct ScriptError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Script {
    rules: Vec<ScriptRule>,
}

impl Script {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, rule: ScriptRule) -> &mut Self {
        self.rules.push(rule);
        self
    }

    pub fn rule(mut self, rule: ScriptRule) -> Self {
        self.rules.push(rule);
        self
    }

    /// Convenience: `(agent, step)` answers with plain text.
    pub fn text(self, agent: &str, step: Option<u32>, text: &str) -> Self {
        self.rule(ScriptRule::new(Some(agent), step, ChatResponse::text(text)))
    }

    /// Convenience: `(agent, step)` answers with a single tool call.
    pub fn call(self, agent: &str, step: Option<u32>, tool: &str, args: Value) -> Self {
        let resp = ChatResponse {
            text: None,
            tool_calls: vec![ToolCall {
                id: String::new(),
                name: tool.to_string(),
                arguments: args,
            }],
            usage: Usage::default(),
        };
        self.rule(ScriptRule::new(Some(agent), step, resp))
    }

    pub fn rules(&self) -> &[ScriptRule] {
        &self.rules
    }

    pub fn parse(src: &str) -> Result<Self, ScriptError> {
        let mut rules = Vec::new();
        let mut current: Option<(ScriptRule, Vec<String>)> = None;
        let err = |line: usize, message: String| ScriptError { line, message };

        fn finish(rules: &mut Vec<ScriptRule>, current: Option<(ScriptRule, Vec<String>)>) {
            if let Some((mut rule, lines)) = current {
                if !lines.is_empty() {
                    rule.response.text = Some(lines.join("\n"));
                }
                rules.push(rule);
            }
        }

        for (idx, raw) in src.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            if let Some(header) = line.strip_prefix("===") {
                finish(&mut rules, current.take());
                let parts: Vec<&str> = header.split_whitespace().collect();
                if parts.len() != 2 {
                    return Err(err(line_no, "header must be `=== <agent> <step>`".into()));
                }
                let agent = (parts[0] != "*").then(|| parts[0].to_string());
                let step = if parts[1] == "*" {
                    None
                } else {
                    Some(parts[1].parse::<u32>().map_err(|_| {
                        err(line_no, format!("invalid step `{}`", parts[1]))
                    })?)
                };
                current = Some((
                    ScriptRule {
                        agent,
                        step,
                        when: Vec::new(),
                        fail: None,
                        delay: None,
                        response: ChatResponse::default(),
                    },
                    Vec::new(),
                ));
                continue;
            }
            let Some((rule, text)) = current.as_mut() else {
                return Err(err(line_no, "directive before the first `===` header".into()));
            };
            let (word, rest) = match line.split_once(' ') {
                Some((w, r)) => (w, r),
                None => (line, ""),
            };
            match word {
                "text" => text.push(rest.to_string()),
                "when" => {
                    if rest.is_empty() {
                        return Err(err(line_no, "`when` needs a substring".into()));
                    }
                    rule.when.push(rest.to_string());
                }
                "call" => {
                    let rest = rest.trim();
                    let (name, args) = match rest.split_once(char::is_whitespace) {
                        Some((n, a)) => (n, a.trim()),
                        None => (rest, ""),
                    };
                    if name.is_empty() {
                        return Err(err(line_no, "`call` needs a tool name".into()));
                    }
                    let arguments = if args.is_empty() {
                        Value::Object(Default::default())
                    } else {
                        serde_json::from_str(args)
                            .map_err(|e| err(line_no, format!("bad call arguments: {e}")))?
                    };
                    rule.response.tool_calls.push(ToolCall {
                        id: String::new(),
                        name: name.to_string(),
                        arguments,
                    });
                }
                "usage" => {
                    let nums: Vec<&str> = rest.split_whitespace().collect();
                    let parse = |s: &str| {
                        s.parse::<u64>()
                            .map_err(|_| err(line_no, format!("invalid token count `{s}`")))
                    };
                    if nums.len() != 2 {
                        return Err(err(line_no, "`usage` needs <input> <output>".into()));
                    }
                    rule.response.usage = Usage {
                        input_tokens: parse(nums[0])?,
                        output_tokens: parse(nums[1])?,
                    };
                }
                "delay" => {
                    let secs: f64 = rest
                        .trim()
                        .parse()
                        .ok()
                        .filter(|v: &f64| v.is_finite() && *v >= 0.0)
                        .ok_or_else(|| err(line_no, format!("invalid delay `{rest}`")))?;
                    rule.delay = Some(Duration::from_secs_f64(secs));
                }
                "fail" => {
                    let parts: Vec<&str> = rest.split_whitespace().collect();
                    if parts.len() != 2 {
                        return Err(err(line_no, "`fail` needs <count> <kind>".into()));
                    }
                    let n = parts[0]
                        .parse::<u32>()
                        .map_err(|_| err(line_no, format!("invalid count `{}`", parts[0])))?;
                    let kind = match parts[1] {
                        "transient" => FailKind::Transient,
                        "timeout" => FailKind::Timeout,
                        "ratelimit" => FailKind::RateLimit,
                        "fatal" => FailKind::Fatal,
                        other => {
                            return Err(err(line_no, format!("unknown failure kind `{other}`")))
                        }
                    };
                    rule.fail = Some((n, kind));
                }
                other => return Err(err(line_no, format!("unknown directive `{other}`"))),
            }
        }
        finish(&mut rules, current);
        Ok(Script { rules })
    }
}

#[derive(Default)]
struct ScriptState {
    counters: HashMap<String, u32>,
    attempts: HashMap<(usize, String, u32), u32>,
    log: Vec<ChatRequest>,
}

/// Replays a [`Script`]. Every request is logged for later inspection.
pub struct ScriptedBackend {
    script: Script,
    clock: Arc<dyn Clock>,
    state: Mutex<ScriptState>,
}

impl ScriptedBackend {
    pub fn new(script: Script, clock: Arc<dyn Clock>) -> Self {
        Self {
            script,
            clock,
            state: Mutex::new(ScriptState::default()),
        }
    }

    /// Requests received so far, in arrival order.
    pub fn requests(&self) -> Vec<ChatRequest> {
        self.state.lock().unwrap().log.clone()
    }

    fn lookup(&self, agent: &str, step: u32, transcript: &str) -> Option<(usize, &ScriptRule)> {
        let tiers: [(Option<&str>, Option<u32>); 4] = [
            (Some(agent), Some(step)),
            (Some(agent), None),
            (None, Some(step)),
            (None, None),
        ];
        tiers.iter().find_map(|(a, s)| {
            self.script.rules.iter().enumerate().find(|(_, r)| {
                r.agent.as_deref() == *a && r.step == *s && r.matches_text(transcript)
            })
        })
    }

    /// Resolves the scripted response for `(agent, step)`.
    pub fn next(
        &self,
        agent: &str,
        step: u32,
        transcript: &str,
    ) -> Result<(usize, ChatResponse), BackendError> {
        let (idx, rule) =
            self.lookup(agent, step, transcript)
                .ok_or_else(|| BackendError::ScriptExhausted {
                    agent: agent.to_string(),
                    step,
                })?;
        Ok((idx, rule.response.clone()))
    }
}

impl ModelBackend for ScriptedBackend {
    fn send(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let transcript = req.transcript();
        let step = {
            let mut st = self.state.lock().unwrap();
            st.log.push(req.clone());
            req.step
                .unwrap_or_else(|| st.counters.get(&req.agent).copied().unwrap_or(0) + 1)
        };
        let (idx, mut resp) = self.next(&req.agent, step, &transcript)?;
        let rule = &self.script.rules[idx];

        if let Some((n, kind)) = rule.fail {
            let mut st = self.state.lock().unwrap();
            let tried = st
                .attempts
                .entry((idx, req.agent.clone(), step))
                .or_insert(0);
            if *tried < n {
                *tried += 1;
                return Err(kind.error());
            }
        }
        if let Some(delay) = rule.delay {
            if let Some(deadline) = req.deadline {
                if delay > deadline {
                    self.clock.sleep(deadline);
                    return Err(BackendError::Timeout);
                }
            }
            self.clock.sleep(delay);
        }

        if req.tools_enabled() {
            for (i, call) in resp.tool_calls.iter_mut().enumerate() {
                if call.id.is_empty() {
                    call.id = format!("call-{}-{}-{}", req.agent, step, i + 1);
                }
            }
        } else {
            resp.tool_calls.clear();
        }
        if req.step.is_none() {
            let mut st = self.state.lock().unwrap();
            *st.counters.entry(req.agent.clone()).or_insert(0) += 1;
        }
        Ok(resp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::FakeClock;
    use crate::gateway::{ChatMessage, ToolSpec};
    use serde_json::json;

    fn backend(src: &str) -> (ScriptedBackend, FakeClock) {
        let clock = FakeClock::fixed();
        (
            ScriptedBackend::new(Script::parse(src).unwrap(), Arc::new(clock.clone())),
            clock,
        )
    }

    fn with_tools(agent: &str, step: u32) -> ChatRequest {
        let mut r = ChatRequest::new(agent, "scripted");
        r.step = Some(step);
        r.tools = Some(vec![ToolSpec {
            name: "finalize".into(),
            description: String::new(),
            parameters: json!({}),
        }]);
        r
    }

    #[test]
    fn key_hit_returns_scripted_text() {
        let (b, _) = backend("=== a 1\ntext hello\ntext world\nusage 10 2\n");
        let r = b.send(&with_tools("a", 1)).unwrap();
        assert_eq!(r.text.as_deref(), Some("hello\nworld"));
        assert_eq!(r.usage.input_tokens, 10);
    }

    #[test]
    fn key_miss_falls_back_to_default() {
        let (b, _) = backend("=== a 1\ntext first\n=== a *\ntext later\n");
        assert_eq!(b.send(&with_tools("a", 7)).unwrap().text.unwrap(), "later");
    }

    #[test]
    fn key_miss_without_default_is_loud() {
        let (b, _) = backend("=== a 1\ntext first\n");
        assert_eq!(
            b.send(&with_tools("b", 1)),
            Err(BackendError::ScriptExhausted {
                agent: "b".into(),
                step: 1
            })
        );
    }

    #[test]
    fn when_conditions_select_rules() {
        let (b, _) = backend("=== a 1\nwhen magic\ntext yes\n=== a 1\ntext no\n");
        let mut req = with_tools("a", 1);
        assert_eq!(b.send(&req).unwrap().text.unwrap(), "no");
        req.messages.push(ChatMessage::user("some magic here"));
        assert_eq!(b.send(&req).unwrap().text.unwrap(), "yes");
    }

    #[test]
    fn tool_calls_get_ids_and_are_stripped_without_tools() {
        let (b, _) = backend("=== a *\ncall finalize {\"deliverable\": \"x\"}\ntext fallback\n");
        let r = b.send(&with_tools("a", 3)).unwrap();
        assert_eq!(r.tool_calls[0].id, "call-a-3-1");
        assert_eq!(r.tool_calls[0].arguments, json!({"deliverable": "x"}));
        let mut plain = ChatRequest::new("a", "scripted");
        plain.step = Some(4);
        let r = b.send(&plain).unwrap();
        assert!(r.tool_calls.is_empty());
        assert_eq!(r.text.as_deref(), Some("fallback"));
    }

    #[test]
    fn failures_then_success_and_implicit_counter() {
        let (b, _) = backend("=== a 1\nfail 2 transient\ntext one\n=== a 2\ntext two\n");
        let req = ChatRequest::new("a", "scripted");
        assert!(b.send(&req).is_err());
        assert!(b.send(&req).is_err());
        assert_eq!(b.send(&req).unwrap().text.unwrap(), "one");
        assert_eq!(b.send(&req).unwrap().text.unwrap(), "two");
    }

    #[test]
    fn delay_beyond_deadline_times_out() {
        let (b, clock) = backend("=== a *\ndelay 300\ntext late\n");
        let mut req = ChatRequest::new("a", "scripted");
        req.deadline = Some(Duration::from_secs(240));
        assert_eq!(b.send(&req), Err(BackendError::Timeout));
        assert_eq!(clock.sleeps(), vec![Duration::from_secs(240)]);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let e = Script::parse("=== a 1\nbogus x\n").unwrap_err();
        assert_eq!(e.line, 2);
        let e = Script::parse("text x\n").unwrap_err();
        assert_eq!(e.line, 1);
        let e = Script::parse("=== a one\n").unwrap_err();
        assert_eq!(e.line, 1);
    }
}
