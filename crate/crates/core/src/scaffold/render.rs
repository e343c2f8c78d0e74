use super::{AgentScaffold, ScaffoldError, TeamScaffold};

/// Appended to every system prompt.
pub const ORCHESTRATION_GUIDE: &str = "\
# Orchestration primitives
- `list_pool`: show every agent in the candidate pool with its role and status.
- `start_agent(name, brief)`: recruit an inactive pool agent; the brief is its first message.
- `stop_agent(name)`: release an active agent once its work is done.
- `send_message(to, body)`: send a message to a teammate's mailbox.
- `load_skill(name)`: read the full instructions of one of your skills.
- `finalize(deliverable)`: submit the team's final deliverable and end the episode.
- `terminate(reason)`: abort the episode without a deliverable.
Reply without tool calls to wait for new messages.";

/// Builds an agent's system prompt.
///
/// Sections, in order: constitution (plus organization), role prompt,
/// patches, profiles and notes about currently active teammates, skill index
/// and the orchestration guide. Empty sections are left out. Skill bodies are
/// never included; agents fetch them with `load_skill`.
pub fn render_system_prompt(agent: &AgentScaffold, team: &TeamScaffold, roster: &[&str]) -> String {
    let mut sections: Vec<String> = Vec::new();
    sections.push(format!("# Team constitution\n{}", team.constitution.trim_end()));
    if !team.organization.trim().is_empty() {
        sections.push(format!("# Team organization\n{}", team.organization.trim_end()));
    }
    sections.push(agent.role_prompt.trim_end().to_string());

    if !agent.patches.is_empty() {
        let mut s = String::from("# Behavioral patches");
        for p in &agent.patches {
            s.push_str("\n- ");
            s.push_str(&p.text.replace('\n', "\n  "));
        }
        sections.push(s);
    }

    let relevant = |subject: &str| subject != agent.name && roster.contains(&subject);
    for (title, map) in [
        ("# Teammate profiles", &agent.profiles),
        ("# Collaboration notes", &agent.notes),
    ] {
        let items: Vec<_> = map.values().filter(|r| relevant(&r.subject)).collect();
        if !items.is_empty() {
            let mut s = String::from(title);
            for r in items {
                s.push_str(&format!("\n## {}\n{}", r.subject, r.text.trim_end()));
            }
            sections.push(s);
        }
    }

    if !agent.skills.is_empty() {
        let mut s = String::from("# Skills\nCall `load_skill` with a skill name to read it in full.");
        for skill in &agent.skills {
            s.push_str(&format!("\n- {}: {}", skill.name, skill.description));
        }
        sections.push(s);
    }

    sections.push(ORCHESTRATION_GUIDE.to_string());
    sections.join("\n\n")
}

pub fn load_skill(agent: &AgentScaffold, skill_name: &str) -> Result<String, ScaffoldError> {
    agent
        .skill(skill_name)
        .map(|s| s.body.clone())
        .ok_or_else(|| ScaffoldError::UnknownSkill(skill_name.to_string()))
}
