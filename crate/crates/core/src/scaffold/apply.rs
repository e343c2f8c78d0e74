use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::format::parse_skill_file;
use super::store::StoreOptions;
use super::{AgentScaffold, BehavioralPatch, RelationText, ScaffoldError, TeamScaffold};
use crate::evolution::EvolutionUpdate;

/// What a commit did besides the requested edits.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ApplyLog {
    /// `(agent, patch id)` pairs dropped by the patch cap.
    pub evicted: Vec<(String, String)>,
    pub notes: Vec<String>,
}

/// Applies a validated update, returning the next version of the team.
///
/// Agent- and pair-level edits run first; team-level removals win over
/// edits to the same agent. The result has `version + 1`.
pub fn apply_update(
    team: &TeamScaffold,
    update: &EvolutionUpdate,
    opts: &StoreOptions,
) -> Result<(TeamScaffold, ApplyLog), ScaffoldError> {
    let mut next = team.clone();
    let mut log = ApplyLog::default();
    let episode = &update.episode_id;
    let removed: BTreeSet<&str> = update.team.remove.iter().map(String::as_str).collect();

    for (name, rev) in &update.agents {
        if removed.contains(name.as_str()) {
            if rev.changes_scaffold() {
                log.notes.push(format!(
                    "agent-level edits to `{name}` dropped: agent removed by team revision"
                ));
            }
            continue;
        }
        let agent = next
            .agent_mut(name)
            .ok_or_else(|| ScaffoldError::UnknownAgent(name.clone()))?;
        append_patches(agent, &rev.patches, episode, opts.max_patches, &mut log);
        for edit in &rev.skills {
            let skill = parse_skill_file(&edit.content).map_err(|e| {
                ScaffoldError::agent(name, format!("skills/{}/SKILL.md:{e}", edit.name))
            })?;
            match agent.skills.iter_mut().find(|s| s.name == skill.name) {
                Some(existing) => *existing = skill,
                None => {
                    agent.skills.push(skill);
                    agent.skills.sort_by(|a, b| a.name.cmp(&b.name));
                }
            }
        }
    }

    for pair in &update.pairs {
        for (edits, is_profile) in [(&pair.profiles, true), (&pair.notes, false)] {
            for edit in edits {
                if removed.contains(edit.owner.as_str()) || removed.contains(edit.subject.as_str())
                {
                    log.notes.push(format!(
                        "pair edit {} -> {} dropped: agent removed by team revision",
                        edit.owner, edit.subject
                    ));
                    continue;
                }
                let owner = next
                    .agent_mut(&edit.owner)
                    .ok_or_else(|| ScaffoldError::UnknownAgent(edit.owner.clone()))?;
                let entry = RelationText {
                    subject: edit.subject.clone(),
                    text: edit.text.trim().to_string(),
                    last_updated: episode.clone(),
                };
                let map = if is_profile {
                    &mut owner.profiles
                } else {
                    &mut owner.notes
                };
                map.insert(edit.subject.clone(), entry);
            }
        }
    }

    let rev = &update.team;
    if let Some(c) = &rev.constitution {
        next.constitution = c.clone();
    }
    if let Some(o) = &rev.organization {
        next.organization = o.clone();
    }
    for name in &rev.remove {
        if !next.contains(name) {
            return Err(ScaffoldError::UnknownAgent(name.clone()));
        }
        next.pool.retain(|a| &a.name != name);
        for a in &mut next.pool {
            if a.profiles.remove(name).is_some() | a.notes.remove(name).is_some() {
                log.notes
                    .push(format!("dropped {}'s profile/notes about removed `{name}`", a.name));
            }
        }
    }
    for new in &rev.add {
        if next.contains(&new.name) {
            return Err(ScaffoldError::DuplicateAgentName(new.name.clone()));
        }
        next.pool.push(AgentScaffold::new(
            new.name.clone(),
            new.role_prompt.clone(),
            new.config.clone(),
        ));
    }

    next.version = team.version + 1;
    next.check()?;
    Ok((next, log))
}

fn append_patches(
    agent: &mut AgentScaffold,
    texts: &[String],
    episode: &str,
    cap: usize,
    log: &mut ApplyLog,
) {
    let mut ids: BTreeSet<String> = agent.patches.iter().map(|p| p.id.clone()).collect();
    for (i, text) in texts.iter().enumerate() {
        let mut id = format!("{episode}.{}", i + 1);
        let mut bump = 1;
        while ids.contains(&id) {
            bump += 1;
            id = format!("{episode}.{}-{bump}", i + 1);
        }
        ids.insert(id.clone());
        agent.patches.push(BehavioralPatch {
            id,
            text: text.trim().to_string(),
            provenance: episode.to_string(),
        });
    }
    while agent.patches.len() > cap.max(1) {
        let old = agent.patches.remove(0);
        log::info!("evicting patch {} from {} (cap {cap})", old.id, agent.name);
        log.evicted.push((agent.name.clone(), old.id));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evolution::{AgentRevision, NewAgent, PairRevision, RelationEdit, SkillEdit};
    use crate::scaffold::AgentConfig;

    fn team() -> TeamScaffold {
        TeamScaffold {
            version: 4,
            entry: "lead".into(),
            constitution: "Be good.".into(),
            organization: String::new(),
            pool: vec![
                AgentScaffold::new("lead", "# Lead\n", AgentConfig::new("m")),
                AgentScaffold::new("developer", "# Developer\n", AgentConfig::new("m")),
            ],
        }
    }

    #[test]
    fn empty_update_only_bumps_version() {
        let t = team();
        let (next, log) = apply_update(&t, &EvolutionUpdate::new("ep"), &StoreOptions::default()).unwrap();
        assert_eq!(next.version, 5);
        assert_eq!(TeamScaffold { version: 4, ..next }, t);
        assert_eq!(log, ApplyLog::default());
    }

    #[test]
    fn patches_append_and_evict_oldest() {
        let mut u = EvolutionUpdate::new("ep-1");
        u.agents.insert(
            "developer".into(),
            AgentRevision {
                patches: vec!["a".into(), "b".into(), "c".into()],
                ..Default::default()
            },
        );
        let (next, log) = apply_update(&team(), &u, &StoreOptions { max_patches: 2 }).unwrap();
        let texts: Vec<_> = next.agent("developer").unwrap().patches.iter().map(|p| p.text.as_str()).collect();
        assert_eq!(texts, vec!["b", "c"]);
        assert_eq!(log.evicted, vec![("developer".into(), "ep-1.1".into())]);
    }

    #[test]
    fn skills_upsert_by_name() {
        let mut u = EvolutionUpdate::new("ep");
        u.agents.insert(
            "lead".into(),
            AgentRevision {
                skills: vec![SkillEdit {
                    name: "plan".into(),
                    content: "---\nname: plan\ndescription: Plan work\n---\nSteps.\n".into(),
                }],
                ..Default::default()
            },
        );
        let (next, _) = apply_update(&team(), &u, &StoreOptions::default()).unwrap();
        assert_eq!(next.agent("lead").unwrap().skill("plan").unwrap().body, "Steps.\n");
    }

    #[test]
    fn removal_wins_over_agent_edits_and_drops_relations() {
        let mut t = team();
        t.agent_mut("lead").unwrap().profiles.insert(
            "developer".into(),
            RelationText {
                subject: "developer".into(),
                text: "x".into(),
                last_updated: "ep-0".into(),
            },
        );
        let mut u = EvolutionUpdate::new("ep");
        u.agents.insert(
            "developer".into(),
            AgentRevision {
                patches: vec!["p".into()],
                ..Default::default()
            },
        );
        u.pairs.push(PairRevision {
            pair: ("developer".into(), "lead".into()),
            profiles: vec![RelationEdit {
                owner: "developer".into(),
                subject: "lead".into(),
                text: "t".into(),
            }],
            notes: vec![],
        });
        u.team.remove.push("developer".into());
        u.team.add.push(NewAgent {
            name: "worker".into(),
            role_prompt: "# Worker\n".into(),
            config: AgentConfig::new("m"),
        });
        let (next, log) = apply_update(&t, &u, &StoreOptions::default()).unwrap();
        assert_eq!(next.names().collect::<Vec<_>>(), vec!["lead", "worker"]);
        assert!(next.agent("lead").unwrap().profiles.is_empty());
        assert_eq!(log.notes.len(), 3);
    }
}
