//! Frozen episode records and their projections.

mod annotated;
mod jsonl;
mod store;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::runtime::{BusEvent, EventKind, Task, TaskOutcome, SYSTEM};

pub use annotated::{import_annotated, parse_annotated, AnnotatedTrace, TokenBucket, SPLIT_TOKENS};
pub use jsonl::{export, from_jsonl, load, to_jsonl, FORMAT_VERSION};
pub use store::ExperienceStore;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line} ({record}): {message}")]
pub struct SchemaError {
    pub line: usize,
    /// Which record or field was being read.
    pub record: String,
    pub message: String,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("schema error: {0}")]
    Schema(#[from] SchemaError),
    #[error("agent `{0}` does not appear in the trajectory")]
    UnknownAgent(String),
    #[error("experience `{0}` is frozen and stored with different content")]
    Immutable(String),
    #[error("experience `{0}` not found")]
    NotFound(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// The seq-ordered interleaving of every agent's actions and the bus traffic
/// between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    events: Vec<BusEvent>,
    agents: Vec<String>,
}

impl Trajectory {
    pub fn new(mut events: Vec<BusEvent>) -> Self {
        events.sort_by_key(|e| e.seq);
        let agents: BTreeSet<&str> = events
            .iter()
            .map(|e| e.actor.as_str())
            .filter(|a| *a != SYSTEM)
            .collect();
        let agents = agents.into_iter().map(str::to_string).collect();
        Self { events, agents }
    }

    pub fn events(&self) -> &[BusEvent] {
        &self.events
    }

    /// Sorted names of every agent that acted.
    pub fn agents(&self) -> &[String] {
        &self.agents
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Unordered pairs of agents that exchanged at least one message.
    pub fn message_pairs(&self) -> BTreeSet<(String, String)> {
        self.events
            .iter()
            .filter(|e| e.kind == EventKind::Message)
            .filter_map(|e| {
                let to = e.recipient.clone()?;
                let from = e.actor.clone();
                Some(if from <= to { (from, to) } else { (to, from) })
            })
            .collect()
    }

    /// One record per model call, numbered globally from 1 in seq order.
    pub fn step_records(&self) -> Vec<StepRecord> {
        step_records(&self.events)
    }
}

/// One agent's projection of a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalTrace {
    pub agent: String,
    pub events: Vec<BusEvent>,
}

impl LocalTrace {
    /// One record per model call of this agent, numbered from 1.
    pub fn steps(&self) -> Vec<StepRecord> {
        step_records(&self.events)
            .into_iter()
            .filter(|s| s.agent == self.agent)
            .enumerate()
            .map(|(i, mut s)| {
                s.index = i as u32 + 1;
                s
            })
            .collect()
    }

    /// The exact message list sent to the model at each step.
    pub fn contexts(&self) -> Vec<Vec<crate::gateway::ChatMessage>> {
        self.events
            .iter()
            .filter(|e| e.kind == EventKind::ModelCall && e.actor == self.agent)
            .filter_map(|e| serde_json::from_value(e.payload.get("messages")?.clone()).ok())
            .collect()
    }
}

/// Events the agent acted in, plus messages and lifecycle events addressed
/// to it, in seq order.
pub fn local_trace(t: &Trajectory, agent: &str) -> Result<LocalTrace, TraceError> {
    if !t.agents.iter().any(|a| a == agent) {
        return Err(TraceError::UnknownAgent(agent.to_string()));
    }
    Ok(LocalTrace {
        agent: agent.to_string(),
        events: t.events.iter().filter(|e| e.involves(agent)).cloned().collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based position within the list the record belongs to.
    pub index: u32,
    pub agent: String,
    pub input: String,
    pub output: String,
}

fn render_messages(messages: &Value) -> String {
    let Some(list) = messages.as_array() else {
        return String::new();
    };
    let mut out = Vec::with_capacity(list.len());
    for m in list {
        let role = m.get("role").and_then(Value::as_str).unwrap_or("?");
        let content = m.get("content").and_then(Value::as_str).unwrap_or("");
        let mut line = format!("[{role}] {content}");
        if let Some(calls) = m.get("tool_calls").and_then(Value::as_array) {
            for c in calls {
                line.push_str(&format!(
                    "\n  -> {}({})",
                    c.get("name").and_then(Value::as_str).unwrap_or("?"),
                    c.get("arguments").cloned().unwrap_or(Value::Null)
                ));
            }
        }
        out.push(line);
    }
    out.join("\n")
}

fn step_records(events: &[BusEvent]) -> Vec<StepRecord> {
    let mut records: Vec<StepRecord> = Vec::new();
    let mut open: BTreeMap<&str, usize> = BTreeMap::new();
    for e in events {
        match e.kind {
            EventKind::ModelCall => {
                open.insert(e.actor.as_str(), records.len());
                records.push(StepRecord {
                    index: records.len() as u32 + 1,
                    agent: e.actor.clone(),
                    input: render_messages(e.payload.get("messages").unwrap_or(&Value::Null)),
                    output: String::new(),
                });
            }
            EventKind::ModelResult => {
                if let Some(&i) = open.get(e.actor.as_str()) {
                    let out = &mut records[i].output;
                    out.push_str(e.payload_str("text").unwrap_or(""));
                    if let Some(calls) = e.payload.get("tool_calls").and_then(Value::as_array) {
                        for c in calls {
                            out.push_str(&format!(
                                "\n-> {}({})",
                                c.get("name").and_then(Value::as_str).unwrap_or("?"),
                                c.get("arguments").cloned().unwrap_or(Value::Null)
                            ));
                        }
                    }
                }
            }
            EventKind::ToolResult => {
                if let Some(&i) = open.get(e.actor.as_str()) {
                    records[i].output.push_str(&format!(
                        "\n<- {}: {}",
                        e.payload_str("name").unwrap_or("?"),
                        e.payload_str("content").unwrap_or("")
                    ));
                }
            }
            _ => {}
        }
    }
    records
}

/// A finished episode: task, trajectory and outcome. There are no mutating
/// methods; the store refuses to overwrite a stored experience.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experience {
    episode_id: String,
    team_version: u64,
    task: Task,
    trajectory: Trajectory,
    outcome: TaskOutcome,
}

impl Experience {
    pub fn freeze(
        episode_id: impl Into<String>,
        team_version: u64,
        task: Task,
        events: Vec<BusEvent>,
        outcome: TaskOutcome,
    ) -> Self {
        Self {
            episode_id: episode_id.into(),
            team_version,
            task,
            trajectory: Trajectory::new(events),
            outcome,
        }
    }

    pub fn episode_id(&self) -> &str {
        &self.episode_id
    }

    pub fn team_version(&self) -> u64 {
        self.team_version
    }

    pub fn task(&self) -> &Task {
        &self.task
    }

    pub fn trajectory(&self) -> &Trajectory {
        &self.trajectory
    }

    pub fn outcome(&self) -> &TaskOutcome {
        &self.outcome
    }

    /// Sum of event costs.
    pub fn total_cost(&self) -> crate::gateway::Cost {
        self.trajectory.events.iter().map(|e| e.cost).sum()
    }

    pub fn local_trace(&self, agent: &str) -> Result<LocalTrace, TraceError> {
        local_trace(&self.trajectory, agent)
    }
}
