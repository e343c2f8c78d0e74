use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::gateway::Cost;
use crate::scaffold::AgentConfig;

/// Agent-level revision produced by one reflection.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentRevision {
    /// New behavioral directives, appended in order.
    #[serde(default)]
    pub patches: Vec<String>,
    #[serde(default)]
    pub skills: Vec<SkillEdit>,
    /// Short report forwarded to the team-level revision.
    #[serde(default)]
    pub summary: String,
}

impl AgentRevision {
    pub fn changes_scaffold(&self) -> bool {
        !self.patches.is_empty() || !self.skills.is_empty()
    }
}

/// New or replacement skill, as the full `SKILL.md` text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillEdit {
    pub name: String,
    pub content: String,
}

/// One directed edit: `owner`'s view of `subject`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationEdit {
    pub owner: String,
    pub subject: String,
    pub text: String,
}

/// Interaction-level revision for one interacting pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRevision {
    pub pair: (String, String),
    #[serde(default)]
    pub profiles: Vec<RelationEdit>,
    #[serde(default)]
    pub notes: Vec<RelationEdit>,
}

impl PairRevision {
    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty() && self.notes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewAgent {
    pub name: String,
    pub role_prompt: String,
    pub config: AgentConfig,
}

/// Team-level revision.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TeamRevision {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constitution: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub organization: Option<String>,
    #[serde(default)]
    pub add: Vec<NewAgent>,
    #[serde(default)]
    pub remove: Vec<String>,
    /// The team asks to re-run the task with the updated scaffold.
    #[serde(default)]
    pub retry: bool,
}

impl TeamRevision {
    pub fn changes_scaffold(&self) -> bool {
        self.constitution.is_some()
            || self.organization.is_some()
            || !self.add.is_empty()
            || !self.remove.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpendKind {
    Reflection,
    Evidence,
    Retry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpendEntry {
    pub label: String,
    pub kind: SpendKind,
    pub cost: Cost,
}

/// Model spend attributed to evolution, never to the episode record.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvolutionSpend {
    pub entries: Vec<SpendEntry>,
}

impl EvolutionSpend {
    pub fn record(&mut self, label: impl Into<String>, kind: SpendKind, cost: Cost) {
        self.entries.push(SpendEntry {
            label: label.into(),
            kind,
            cost,
        });
    }

    pub fn total(&self) -> Cost {
        self.entries.iter().map(|e| e.cost).sum()
    }

    /// Cost per reflection label (a reflection's own calls plus the evidence
    /// it requested).
    pub fn per_reflection(&self) -> BTreeMap<String, Cost> {
        let mut out: BTreeMap<String, Cost> = BTreeMap::new();
        for e in &self.entries {
            if e.kind != SpendKind::Retry {
                *out.entry(e.label.clone()).or_default() += e.cost;
            }
        }
        out
    }
}

/// Everything one episode's reflection wants to change.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvolutionUpdate {
    pub episode_id: String,
    #[serde(default)]
    pub agents: BTreeMap<String, AgentRevision>,
    #[serde(default)]
    pub pairs: Vec<PairRevision>,
    #[serde(default)]
    pub team: TeamRevision,
    #[serde(default)]
    pub spend: EvolutionSpend,
}

impl EvolutionUpdate {
    pub fn new(episode_id: impl Into<String>) -> Self {
        Self {
            episode_id: episode_id.into(),
            ..Default::default()
        }
    }

    /// True when committing would not change any scaffold file besides the
    /// version counter.
    pub fn is_empty(&self) -> bool {
        !self.agents.values().any(AgentRevision::changes_scaffold)
            && self.pairs.iter().all(PairRevision::is_empty)
            && !self.team.changes_scaffold()
    }
}
