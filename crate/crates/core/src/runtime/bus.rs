use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::gateway::Cost;

/// Actor name used for events emitted by the runtime itself.
pub const SYSTEM: &str = "system";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Message,
    ToolCall,
    ToolResult,
    Lifecycle,
    ModelCall,
    ModelResult,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Message => "message",
            EventKind::ToolCall => "tool_call",
            EventKind::ToolResult => "tool_result",
            EventKind::Lifecycle => "lifecycle",
            EventKind::ModelCall => "model_call",
            EventKind::ModelResult => "model_result",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusEvent {
    pub seq: u64,
    /// Milliseconds since the unix epoch.
    pub ts: u64,
    pub kind: EventKind,
    pub actor: String,
    /// Message target, or the agent a lifecycle event is about.
    #[serde(default)]
    pub recipient: Option<String>,
    pub payload: Value,
    #[serde(default)]
    pub cost: Cost,
}

impl BusEvent {
    /// True if `agent` acted in this event or was the target of a message or
    /// lifecycle event.
    pub fn involves(&self, agent: &str) -> bool {
        self.actor == agent
            || (matches!(self.kind, EventKind::Message | EventKind::Lifecycle)
                && self.recipient.as_deref() == Some(agent))
    }

    pub fn payload_str(&self, key: &str) -> Option<&str> {
        self.payload.get(key).and_then(Value::as_str)
    }
}

/// Append-only event log. Sequence numbers are assigned here and nowhere
/// else, so they are gap-free by construction.
#[derive(Debug, Clone, Default)]
pub struct Bus {
    events: Vec<BusEvent>,
}

impl Bus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(
        &mut self,
        ts: u64,
        kind: EventKind,
        actor: &str,
        recipient: Option<&str>,
        payload: Value,
        cost: Cost,
    ) -> &BusEvent {
        let seq = self.events.len() as u64;
        self.events.push(BusEvent {
            seq,
            ts,
            kind,
            actor: actor.to_string(),
            recipient: recipient.map(str::to_string),
            payload,
            cost,
        });
        self.events.last().unwrap()
    }

    pub fn events(&self) -> &[BusEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn into_events(self) -> Vec<BusEvent> {
        self.events
    }
}
