//! Runtime defaults and budget profiles.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::Cost;

pub const DEFAULT_TEMPERATURE: f64 = 0.2;
pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 32768;
pub const DEFAULT_HISTORY_CAP: usize = 150;
pub const DEFAULT_STEP_BUDGET: u32 = 50;
pub const DEFAULT_PHASE_TIMEOUT: Duration = Duration::from_secs(600);
pub const FORCE_FINALIZE_TIMEOUT: Duration = Duration::from_secs(240);
pub const DEFAULT_POLL_INTERVAL: Duration = Duration::from_secs(1);
pub const DEFAULT_REFLECTION_COST_CAP: Cost = Cost::from_micros(50_000_000);
pub const DEFAULT_MAX_PATCHES: usize = 32;

/// Shipped budget profiles, keyed by benchmark-style name.
pub const BUILTIN_BUDGETS: &str = include_str!("../config/budgets.yaml");

/// Episode-loop knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct RuntimeSettings {
    pub history_cap: usize,
    /// Model calls an agent may make before it is parked until new mail.
    pub step_budget: u32,
    pub poll_interval: Duration,
    pub force_finalize_timeout: Duration,
}

impl Default for RuntimeSettings {
    fn default() -> Self {
        Self {
            history_cap: DEFAULT_HISTORY_CAP,
            step_budget: DEFAULT_STEP_BUDGET,
            poll_interval: DEFAULT_POLL_INTERVAL,
            force_finalize_timeout: FORCE_FINALIZE_TIMEOUT,
        }
    }
}

/// Limits for one episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetLimits {
    pub max_seconds: f64,
    pub max_messages: u64,
    /// Dollars.
    pub max_cost: f64,
}

impl BudgetLimits {
    pub fn max_cost(&self) -> Cost {
        Cost::from_dollars(self.max_cost)
    }

    pub fn max_duration(&self) -> Duration {
        Duration::from_secs_f64(self.max_seconds.max(0.0))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.max_seconds > 0.0 && self.max_messages > 0 && self.max_cost > 0.0) {
            return Err(ConfigError::NonPositiveBudget);
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown budget profile `{0}`")]
    UnknownProfile(String),
    #[error("budget limits must all be positive")]
    NonPositiveBudget,
    #[error("invalid budget file: {0}")]
    Parse(#[from] serde_yaml::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetProfiles {
    profiles: BTreeMap<String, BudgetLimits>,
}

impl BudgetProfiles {
    pub fn builtin() -> Self {
        Self::from_yaml(BUILTIN_BUDGETS).expect("shipped budget profiles parse")
    }

    pub fn from_yaml(text: &str) -> Result<Self, ConfigError> {
        let profiles: BTreeMap<String, BudgetLimits> = serde_yaml::from_str(text)?;
        for limits in profiles.values() {
            limits.validate()?;
        }
        Ok(Self { profiles })
    }

    pub fn get(&self, name: &str) -> Result<BudgetLimits, ConfigError> {
        self.profiles
            .get(name)
            .copied()
            .ok_or_else(|| ConfigError::UnknownProfile(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.profiles.keys().map(String::as_str)
    }
}
