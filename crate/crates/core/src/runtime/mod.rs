//! Episode execution over the open roster.
//!
//! An [`Episode`] starts the team's entry agent with the task and lets agents
//! recruit teammates from the pool, exchange messages and call tools. Every
//! action goes through a single append-only [`Bus`]; the episode ends when an
//! agent finalizes or terminates, or when a budget limit is reached and the
//! runtime force-finalizes.

mod budget;
mod bus;
mod episode;
mod history;
mod tools;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use budget::{Budget, Exhaustion};
pub use bus::{Bus, BusEvent, EventKind, SYSTEM};
pub use episode::{run_task, Episode, EpisodeConfig, Mail, Scheduling, FORCE_FINALIZE_NOTICE};
pub use history::{trim_history, HistoryError};
pub use tools::{builtin_specs, is_builtin, FnTool, Tool, ToolRegistry, BUILTIN_TOOLS};

use crate::config::ConfigError;
use crate::evaluator::{EvaluatorError, Score};
use crate::gateway::GatewayError;
use crate::scaffold::ScaffoldError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attachment {
    pub name: String,
    pub content: String,
}

/// Task input handed to the entry agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attachments: Vec<Attachment>,
}

impl Task {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            attachments: Vec::new(),
        }
    }

    pub fn attach(mut self, name: impl Into<String>, content: impl Into<String>) -> Self {
        self.attachments.push(Attachment {
            name: name.into(),
            content: content.into(),
        });
        self
    }

    /// Text delivered as the entry agent's first message.
    pub fn render(&self) -> String {
        let mut out = format!("[task {}]\n{}", self.id, self.text);
        for a in &self.attachments {
            out.push_str(&format!("\n\n[attachment {}]\n{}", a.name, a.content));
        }
        out
    }
}

/// How the episode ended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EndReason {
    Finalized,
    /// An agent aborted the episode; no deliverable, failing score.
    Terminated { reason: String },
    /// A budget limit was reached.
    Exhausted { limit: Exhaustion },
    /// Every active agent was idle with an empty mailbox.
    Stalled,
}

impl EndReason {
    pub fn forced(&self) -> bool {
        matches!(self, EndReason::Exhausted { .. } | EndReason::Stalled)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub deliverable: String,
    pub score: Score,
    /// Agent that finalized or terminated, or `system` after force-finalize.
    pub finalized_by: String,
    pub end: EndReason,
}

/// Failure of an orchestration primitive. Reported back to the calling agent
/// as a failed tool result.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PrimitiveError {
    #[error("unknown agent `{0}`")]
    UnknownAgent(String),
    #[error("agent `{0}` is already active")]
    AlreadyActive(String),
    #[error("agent `{0}` is not active")]
    NotActive(String),
    #[error("unknown recipient `{0}`")]
    UnknownRecipient(String),
    #[error("the episode has already been finalized")]
    AlreadyFinalized,
    #[error("message budget exhausted")]
    MessageBudgetExhausted,
    #[error("agents cannot message themselves")]
    SelfMessage,
    #[error("{0}")]
    BadArguments(String),
}

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    GatewayUnavailable(#[from] GatewayError),
    #[error("evaluator failure: {0}")]
    EvaluatorFailure(#[from] EvaluatorError),
    #[error(transparent)]
    InvalidTeam(#[from] ScaffoldError),
    #[error(transparent)]
    InvalidBudget(#[from] ConfigError),
    #[error("agent `{agent}` allows unregistered tool `{tool}`")]
    UnknownTool { agent: String, tool: String },
    #[error(transparent)]
    MalformedHistory(#[from] HistoryError),
}

/// Active and stopped agents. An agent that was never started is in neither.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RosterState {
    pub active: std::collections::BTreeSet<String>,
    pub stopped: std::collections::BTreeSet<String>,
}

impl RosterState {
    pub fn is_active(&self, name: &str) -> bool {
        self.active.contains(name)
    }
}
