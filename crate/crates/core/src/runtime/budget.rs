use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::bus::{BusEvent, EventKind};
use crate::config::BudgetLimits;
use crate::gateway::Cost;

/// Which limit ended the episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exhaustion {
    Seconds,
    Messages,
    Cost,
}

impl fmt::Display for Exhaustion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Exhaustion::Seconds => "max_seconds",
            Exhaustion::Messages => "max_messages",
            Exhaustion::Cost => "max_cost",
        })
    }
}

/// Running totals against the episode limits.
///
/// Totals only grow. The first limit to be reached is remembered in
/// `exhausted` and never cleared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub max_seconds: Duration,
    pub max_messages: u64,
    pub max_cost: Cost,
    pub spent_seconds: Duration,
    pub spent_messages: u64,
    pub spent_cost: Cost,
    pub exhausted: Option<Exhaustion>,
}

impl Budget {
    pub fn new(limits: &BudgetLimits) -> Self {
        Self {
            max_seconds: limits.max_duration(),
            max_messages: limits.max_messages,
            max_cost: limits.max_cost(),
            spent_seconds: Duration::ZERO,
            spent_messages: 0,
            spent_cost: Cost::ZERO,
            exhausted: None,
        }
    }

    /// Adds an event's cost and, for messages, one to the message count.
    pub fn charge(&mut self, event: &BusEvent) -> Option<Exhaustion> {
        self.spent_cost += event.cost;
        if event.kind == EventKind::Message {
            self.spent_messages += 1;
        }
        self.check()
    }

    /// Moves the elapsed time forward; an earlier reading is ignored.
    pub fn tick(&mut self, elapsed: Duration) -> Option<Exhaustion> {
        if elapsed > self.spent_seconds {
            self.spent_seconds = elapsed;
        }
        self.check()
    }

    pub fn messages_exhausted(&self) -> bool {
        self.spent_messages >= self.max_messages
    }

    fn check(&mut self) -> Option<Exhaustion> {
        if self.exhausted.is_none() {
            self.exhausted = if self.spent_seconds >= self.max_seconds {
                Some(Exhaustion::Seconds)
            } else if self.messages_exhausted() {
                Some(Exhaustion::Messages)
            } else if self.spent_cost >= self.max_cost {
                Some(Exhaustion::Cost)
            } else {
                None
            };
        }
        self.exhausted
    }
}
