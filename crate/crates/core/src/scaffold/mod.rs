//! The team scaffold: candidate pool, constitution and every evolvable
//! per-agent artifact, persisted as a plain-text directory tree.
//!
//! ```text
//! <root>/
//!   team.yaml                 version, entry agent, pool listing, organization
//!   constitution.md
//!   agents/<name>/
//!     prompt.md               role prompt; first `# ` line is the role header
//!     config.yaml             backbone, allowed_tools, temperature, max_output_tokens
//!     evolution/patches.md
//!     evolution/profiles/<teammate>.md
//!     evolution/notes/<teammate>.md
//!     skills/<skill>/SKILL.md
//!   retired/<name>-v<N>/      agents removed from the pool at version N
//! ```

mod apply;
mod format;
mod render;
mod store;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use apply::{apply_update, ApplyLog};
pub use format::{parse_skill_file, render_skill_file, FormatError};
pub(crate) use format::patch_text_is_valid;
pub use render::{load_skill, render_system_prompt, ORCHESTRATION_GUIDE};
pub use store::{load_team, save_team, save_team_with, FaultPlan, ScaffoldStore, StoreOptions};

#[derive(Debug, Error)]
pub enum ScaffoldError {
    #[error("missing team manifest: {0}")]
    MissingManifest(String),
    #[error("malformed team manifest: {0}")]
    MalformedManifest(String),
    #[error("malformed agent directory `{name}`: {reason}")]
    MalformedAgentDir { name: String, reason: String },
    #[error("duplicate agent name `{0}`")]
    DuplicateAgentName(String),
    #[error("unknown skill `{0}`")]
    UnknownSkill(String),
    #[error("unknown agent `{0}`")]
    UnknownAgent(String),
    #[error("persist failure: {0}")]
    PersistFailure(String),
}

impl ScaffoldError {
    fn agent(name: &str, reason: impl Into<String>) -> Self {
        ScaffoldError::MalformedAgentDir {
            name: name.to_string(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub backbone: String,
    #[serde(default)]
    pub allowed_tools: Vec<String>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_output_tokens")]
    pub max_output_tokens: u32,
}

fn default_temperature() -> f64 {
    crate::config::DEFAULT_TEMPERATURE
}

fn default_max_output_tokens() -> u32 {
    crate::config::DEFAULT_MAX_OUTPUT_TOKENS
}

impl AgentConfig {
    pub fn new(backbone: impl Into<String>) -> Self {
        Self {
            backbone: backbone.into(),
            allowed_tools: Vec::new(),
            temperature: default_temperature(),
            max_output_tokens: default_max_output_tokens(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.backbone.trim().is_empty() {
            return Err("backbone is empty".into());
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(format!("temperature {} outside [0, 2]", self.temperature));
        }
        if self.max_output_tokens == 0 {
            return Err("max_output_tokens must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skill {
    pub name: String,
    pub description: String,
    pub body: String,
    /// Extra front-matter lines, kept verbatim and in order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub metadata: Vec<(String, String)>,
}

pub const MAX_SKILL_DESCRIPTION: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehavioralPatch {
    pub id: String,
    pub text: String,
    /// Episode that produced the patch.
    pub provenance: String,
}

/// A teammate profile or a pairwise collaboration note.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationText {
    pub subject: String,
    pub text: String,
    pub last_updated: String,
}

pub type TeammateProfile = RelationText;
pub type CollaborationNote = RelationText;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentScaffold {
    pub name: String,
    pub role_prompt: String,
    pub patches: Vec<BehavioralPatch>,
    pub skills: Vec<Skill>,
    pub profiles: BTreeMap<String, TeammateProfile>,
    pub notes: BTreeMap<String, CollaborationNote>,
    pub config: AgentConfig,
}

impl AgentScaffold {
    pub fn new(name: impl Into<String>, role_prompt: impl Into<String>, config: AgentConfig) -> Self {
        Self {
            name: name.into(),
            role_prompt: role_prompt.into(),
            patches: Vec::new(),
            skills: Vec::new(),
            profiles: BTreeMap::new(),
            notes: BTreeMap::new(),
            config,
        }
    }

    /// Title from the role header (`# Title` on the first non-blank line).
    pub fn role_title(&self) -> Option<&str> {
        role_title(&self.role_prompt)
    }

    /// One-line summary for roster listings.
    pub fn summary(&self) -> String {
        self.role_title()
            .map(str::to_string)
            .or_else(|| {
                self.role_prompt
                    .lines()
                    .map(str::trim)
                    .find(|l| !l.is_empty())
                    .map(|l| l.chars().take(80).collect())
            })
            .unwrap_or_default()
    }

    pub fn skill(&self, name: &str) -> Option<&Skill> {
        self.skills.iter().find(|s| s.name == name)
    }
}

pub fn role_title(prompt: &str) -> Option<&str> {
    let first = prompt.lines().map(str::trim).find(|l| !l.is_empty())?;
    let title = first.strip_prefix("# ")?.trim();
    (!title.is_empty()).then_some(title)
}

/// Names usable as directory names on every platform we care about.
pub fn is_safe_name(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphanumeric() => {}
        _ => return false,
    }
    name.len() <= 64
        && chars.all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && !name.contains("..")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeamScaffold {
    /// Commit counter; bumped by exactly one per committed update.
    pub version: u64,
    /// Agent that receives the task and is started first.
    pub entry: String,
    pub constitution: String,
    pub organization: String,
    /// The candidate pool, in manifest order.
    pub pool: Vec<AgentScaffold>,
}

impl TeamScaffold {
    pub fn agent(&self, name: &str) -> Option<&AgentScaffold> {
        self.pool.iter().find(|a| a.name == name)
    }

    pub fn agent_mut(&mut self, name: &str) -> Option<&mut AgentScaffold> {
        self.pool.iter_mut().find(|a| a.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.pool.iter().map(|a| a.name.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.agent(name).is_some()
    }

    /// Structural invariants shared by the loader and the commit path.
    pub fn check(&self) -> Result<(), ScaffoldError> {
        if self.constitution.trim().is_empty() {
            return Err(ScaffoldError::MalformedManifest("constitution is empty".into()));
        }
        if self.pool.is_empty() {
            return Err(ScaffoldError::MalformedManifest("agent pool is empty".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for a in &self.pool {
            if !is_safe_name(&a.name) {
                return Err(ScaffoldError::agent(&a.name, "name is not filesystem-safe"));
            }
            if !seen.insert(a.name.as_str()) {
                return Err(ScaffoldError::DuplicateAgentName(a.name.clone()));
            }
        }
        if !self.contains(&self.entry) {
            return Err(ScaffoldError::MalformedManifest(format!(
                "entry agent `{}` is not in the pool",
                self.entry
            )));
        }
        for a in &self.pool {
            a.config
                .validate()
                .map_err(|e| ScaffoldError::agent(&a.name, e))?;
            let mut skill_names = std::collections::BTreeSet::new();
            for s in &a.skills {
                if !skill_names.insert(s.name.as_str()) {
                    return Err(ScaffoldError::agent(
                        &a.name,
                        format!("duplicate skill `{}`", s.name),
                    ));
                }
            }
            let mut ids = std::collections::BTreeSet::new();
            for p in &a.patches {
                if p.text.trim().is_empty() || !ids.insert(p.id.as_str()) {
                    return Err(ScaffoldError::agent(
                        &a.name,
                        format!("empty or duplicate patch `{}`", p.id),
                    ));
                }
            }
            for subject in a.profiles.keys().chain(a.notes.keys()) {
                if subject == &a.name {
                    return Err(ScaffoldError::agent(&a.name, "profile or note about itself"));
                }
            }
        }
        Ok(())
    }
}
