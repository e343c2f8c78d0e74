//! Acceptance checks run on an update before it may touch the store.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::update::EvolutionUpdate;
use crate::gateway::Cost;
use crate::scaffold::{
    apply_update, is_safe_name, load_team, parse_skill_file, patch_text_is_valid, role_title, ScaffoldError, Skill,
    StoreOptions, TeamScaffold,
};

pub const CHECK_NAMES: [&str; 4] = ["role_consistency", "tool_availability", "formatting", "budget"];

#[derive(Debug, Clone)]
pub struct GateContext {
    /// Every tool the runtime can dispatch.
    pub tools: Vec<String>,
    /// Evolution spend allowed for the episode.
    pub budget: Cost,
    pub reflection_cap: Cost,
    pub store: StoreOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateCheck {
    pub name: String,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub problems: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub accepted: bool,
    pub checks: Vec<GateCheck>,
}

impl GateReport {
    pub fn failed(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect()
    }

    pub fn problems(&self) -> Vec<String> {
        self.checks
            .iter()
            .flat_map(|c| c.problems.iter().map(move |p| format!("{}: {p}", c.name)))
            .collect()
    }
}

/// Runs every check; the update is accepted only if all pass.
pub fn commit_gate(update: &EvolutionUpdate, team: &TeamScaffold, ctx: &GateContext) -> GateReport {
    let checks: Vec<GateCheck> = [
        role_consistency(update, team),
        tool_availability(update, team, ctx),
        formatting(update, team, ctx),
        budget(update, ctx),
    ]
    .into_iter()
    .zip(CHECK_NAMES)
    .map(|(problems, name)| GateCheck {
        name: name.to_string(),
        passed: problems.is_empty(),
        problems,
    })
    .collect();
    GateReport {
        accepted: checks.iter().all(|c| c.passed),
        checks,
    }
}

fn regex(cell: &'static OnceLock<Regex>, pattern: &str) -> &'static Regex {
    cell.get_or_init(|| Regex::new(pattern).expect("valid pattern"))
}

fn role_claim(text: &str) -> Vec<String> {
    static CLAIM: OnceLock<Regex> = OnceLock::new();
    let re = regex(
        &CLAIM,
        r"(?im)(?:^#[ \t]+(.+?)[ \t]*$)|(?:\byour role is (?:now )?(?:an? |the )?([^.\n;,]+))",
    );
    re.captures_iter(text)
        .filter_map(|c| c.get(1).or_else(|| c.get(2)))
        .map(|m| m.as_str().trim().to_string())
        .collect()
}

fn mentions(text: &str) -> Vec<String> {
    static MENTION: OnceLock<Regex> = OnceLock::new();
    regex(&MENTION, r"(?:^|[^\w@])@([A-Za-z0-9][A-Za-z0-9_.-]*)")
        .captures_iter(text)
        .map(|c| c[1].trim_end_matches('.').to_string())
        .collect()
}

/// Identifiers written the way a tool would be referenced: a call, a
/// backticked snake_case name, or a name next to the word "tool".
pub fn tool_references(text: &str) -> BTreeSet<String> {
    static CALL: OnceLock<Regex> = OnceLock::new();
    static TICKED: OnceLock<Regex> = OnceLock::new();
    static NEAR: OnceLock<Regex> = OnceLock::new();
    let mut out = BTreeSet::new();
    for c in regex(&CALL, r"\b([a-z][a-z0-9]*(?:_[a-z0-9]+)+)\s*\(").captures_iter(text) {
        out.insert(c[1].to_string());
    }
    for c in regex(&TICKED, r"`([a-z][a-z0-9]*(?:_[a-z0-9]+)+)(?:\(\))?`").captures_iter(text) {
        out.insert(c[1].to_string());
    }
    static AFTER: OnceLock<Regex> = OnceLock::new();
    let before = regex(&NEAR, r"(?i)\btools?[ \t]+`?([a-z][a-z0-9_]*)");
    let after = regex(&AFTER, r"(?i)\b([a-z][a-z0-9_]*)`?[ \t]+tools?\b");
    for re in [before, after] {
        for c in re.captures_iter(text) {
            if c[1].contains('_') {
                out.insert(c[1].to_string());
            }
        }
    }
    out
}

fn final_pool(update: &EvolutionUpdate, team: &TeamScaffold) -> BTreeSet<String> {
    let removed: BTreeSet<&str> = update.team.remove.iter().map(String::as_str).collect();
    team.pool
        .iter()
        .map(|a| a.name.clone())
        .filter(|n| !removed.contains(n.as_str()))
        .chain(update.team.add.iter().map(|a| a.name.clone()))
        .collect()
}

fn role_consistency(update: &EvolutionUpdate, team: &TeamScaffold) -> Vec<String> {
    let mut problems = Vec::new();
    let added: BTreeSet<&str> = update.team.add.iter().map(|a| a.name.as_str()).collect();
    let known = |n: &str| team.contains(n) || added.contains(n);
    let pool = final_pool(update, team);

    for name in &update.team.remove {
        if !team.contains(name) {
            problems.push(format!("cannot remove unknown agent `{name}`"));
        }
        if *name == team.entry {
            problems.push(format!("cannot remove the entry agent `{name}`"));
        }
    }
    for a in &update.team.add {
        if team.contains(&a.name) {
            problems.push(format!("agent `{}` already exists", a.name));
        }
    }
    if added.len() != update.team.add.len() {
        problems.push("an added agent name repeats".into());
    }
    if pool.is_empty() {
        problems.push("the pool would be empty".into());
    }

    let mut texts: Vec<(String, &str)> = Vec::new();
    for (name, rev) in &update.agents {
        let Some(agent) = team.agent(name) else {
            if rev.changes_scaffold() {
                problems.push(format!("revision for unknown agent `{name}`"));
            }
            continue;
        };
        let title = agent.role_title();
        for patch in &rev.patches {
            for claim in role_claim(patch) {
                if title.is_some_and(|t| !t.eq_ignore_ascii_case(&claim)) {
                    problems.push(format!(
                        "patch for `{name}` declares role `{claim}` but the role is `{}`",
                        title.unwrap()
                    ));
                }
            }
            texts.push((format!("patch for `{name}`"), patch));
        }
        for skill in &rev.skills {
            texts.push((format!("skill `{}` of `{name}`", skill.name), &skill.content));
        }
    }
    for pair in &update.pairs {
        for edit in pair.profiles.iter().chain(&pair.notes) {
            for n in [&edit.owner, &edit.subject] {
                if !known(n) {
                    problems.push(format!("relation edit names unknown agent `{n}`"));
                }
            }
            texts.push((format!("relation `{}` on `{}`", edit.owner, edit.subject), &edit.text));
        }
    }
    if let Some(c) = &update.team.constitution {
        texts.push(("constitution".into(), c));
    }
    if let Some(o) = &update.team.organization {
        texts.push(("organization".into(), o));
    }
    for a in &update.team.add {
        texts.push((format!("role prompt of `{}`", a.name), &a.role_prompt));
    }
    for (what, text) in texts {
        for m in mentions(text) {
            if !pool.contains(&m) {
                problems.push(format!("{what} mentions `@{m}`, who is not in the pool"));
            }
        }
    }
    problems
}

fn tool_availability(update: &EvolutionUpdate, team: &TeamScaffold, ctx: &GateContext) -> Vec<String> {
    let mut problems = Vec::new();
    let registered = |t: &str| ctx.tools.iter().any(|r| r == t);
    let exempt: BTreeSet<String> = final_pool(update, team)
        .into_iter()
        .chain(team.pool.iter().flat_map(|a| a.skills.iter().map(|s| s.name.clone())))
        .chain(update.agents.values().flat_map(|r| r.skills.iter().map(|s| s.name.clone())))
        .collect();
    let mut scan = |what: String, text: &str| {
        for t in tool_references(text) {
            if !registered(&t) && !exempt.contains(&t) {
                problems.push(format!("{what} references unregistered tool `{t}`"));
            }
        }
    };
    for (name, rev) in &update.agents {
        for patch in &rev.patches {
            scan(format!("patch for `{name}`"), patch);
        }
        for skill in &rev.skills {
            scan(format!("skill `{}` of `{name}`", skill.name), &skill.content);
        }
    }
    for pair in &update.pairs {
        for edit in pair.profiles.iter().chain(&pair.notes) {
            scan(format!("relation `{}` on `{}`", edit.owner, edit.subject), &edit.text);
        }
    }
    if let Some(c) = &update.team.constitution {
        scan("constitution".into(), c);
    }
    if let Some(o) = &update.team.organization {
        scan("organization".into(), o);
    }
    for a in &update.team.add {
        scan(format!("role prompt of `{}`", a.name), &a.role_prompt);
    }
    for a in &update.team.add {
        for t in &a.config.allowed_tools {
            if !registered(t) {
                problems.push(format!("new agent `{}` allows unregistered tool `{t}`", a.name));
            }
        }
    }
    for (name, rev) in &update.agents {
        for edit in &rev.skills {
            let Ok(skill) = parse_skill_file(&edit.content) else { continue };
            for t in tools_in_metadata(&skill) {
                if !registered(&t) {
                    problems.push(format!("skill `{}` of `{name}` needs unregistered tool `{t}`", edit.name));
                }
            }
        }
    }
    problems
}

fn formatting(update: &EvolutionUpdate, team: &TeamScaffold, ctx: &GateContext) -> Vec<String> {
    let mut problems = Vec::new();
    for (name, rev) in &update.agents {
        for (i, patch) in rev.patches.iter().enumerate() {
            if !patch_text_is_valid(patch) {
                problems.push(format!("patch {} for `{name}` is malformed", i + 1));
            }
        }
        for edit in &rev.skills {
            match parse_skill_file(&edit.content) {
                Ok(skill) if skill.name != edit.name => problems.push(format!(
                    "skills/{}/SKILL.md declares name `{}`",
                    edit.name, skill.name
                )),
                Ok(_) => {}
                Err(e) => problems.push(format!("skills/{}/SKILL.md:{e}", edit.name)),
            }
        }
    }
    for pair in &update.pairs {
        for edit in pair.profiles.iter().chain(&pair.notes) {
            if edit.text.trim().is_empty() {
                problems.push(format!("empty relation text from `{}` on `{}`", edit.owner, edit.subject));
            }
        }
    }
    if update.team.constitution.as_deref().is_some_and(|c| c.trim().is_empty()) {
        problems.push("constitution would be empty".into());
    }
    for a in &update.team.add {
        if !is_safe_name(&a.name) {
            problems.push(format!("new agent name `{}` is not filesystem-safe", a.name));
        }
        if role_title(&a.role_prompt).is_none() {
            problems.push(format!("role prompt of `{}` lacks a `# ` title line", a.name));
        }
        if let Err(e) = a.config.validate() {
            problems.push(format!("config of `{}`: {e}", a.name));
        }
    }
    if problems.is_empty() {
        if let Err(e) = apply_update(team, update, &ctx.store) {
            problems.push(format!("dry run failed: {e}"));
        }
    }
    problems
}

/// Labels of reflections whose output is part of the update.
fn content_labels(update: &EvolutionUpdate) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for (name, rev) in &update.agents {
        if rev.changes_scaffold() {
            out.insert(format!("{name}#l1"));
        }
    }
    for p in &update.pairs {
        if !p.is_empty() {
            out.insert(format!("{}+{}#l2", p.pair.0, p.pair.1));
        }
    }
    if update.team.changes_scaffold() || update.team.retry {
        out.insert("team#l3".into());
    }
    out
}

fn budget(update: &EvolutionUpdate, ctx: &GateContext) -> Vec<String> {
    let mut problems = Vec::new();
    let total = update.spend.total();
    if total > ctx.budget {
        problems.push(format!("evolution spend {total} exceeds the budget {}", ctx.budget));
    }
    let content = content_labels(update);
    for (label, cost) in update.spend.per_reflection() {
        if cost > ctx.reflection_cap && content.contains(&label) {
            problems.push(format!(
                "reflection `{label}` cost {cost}, above the cap {}",
                ctx.reflection_cap
            ));
        }
    }
    problems
}

fn tools_in_metadata(skill: &Skill) -> Vec<String> {
    skill
        .metadata
        .iter()
        .filter(|(k, _)| k == "tools" || k == "allowed-tools")
        .flat_map(|(_, v)| {
            v.split([',', ' '])
                .map(|t| t.trim_matches(['[', ']', '"', '\'']).to_string())
                .filter(|t| !t.is_empty())
                .collect::<Vec<_>>()
        })
        .collect()
}

fn report(checks: Vec<(&str, Vec<String>)>) -> GateReport {
    let checks: Vec<GateCheck> = checks
        .into_iter()
        .map(|(name, problems)| GateCheck {
            name: name.to_string(),
            passed: problems.is_empty(),
            problems,
        })
        .collect();
    GateReport {
        accepted: checks.iter().all(|c| c.passed),
        checks,
    }
}

/// Gate checks applied to a scaffold on disk rather than to an update.
///
/// A tree that does not load fails `formatting`, or `role_consistency` for a
/// repeated agent name. The budget check does not apply to a static tree.
pub fn validate_scaffold(root: &Path, tools: &[String]) -> Result<GateReport, ScaffoldError> {
    let team = match load_team(root) {
        Ok(team) => team,
        Err(e @ ScaffoldError::MissingManifest(_)) => return Err(e),
        Err(e @ ScaffoldError::DuplicateAgentName(_)) => {
            return Ok(report(vec![("role_consistency", vec![e.to_string()])]))
        }
        Err(e) => return Ok(report(vec![("formatting", vec![e.to_string()])])),
    };
    Ok(validate_team(&team, tools))
}

pub fn validate_team(team: &TeamScaffold, tools: &[String]) -> GateReport {
    let pool: BTreeSet<String> = team.names().map(str::to_string).collect();
    let exempt: BTreeSet<String> = pool
        .iter()
        .cloned()
        .chain(team.pool.iter().flat_map(|a| a.skills.iter().map(|s| s.name.clone())))
        .collect();
    let registered = |t: &str| tools.iter().any(|r| r == t);
    let (mut roles, mut tooling, mut format) = (Vec::new(), Vec::new(), Vec::new());

    let mut texts: Vec<(String, &str)> = vec![
        ("constitution".into(), team.constitution.as_str()),
        ("organization".into(), team.organization.as_str()),
    ];
    for a in &team.pool {
        let title = a.role_title();
        if title.is_none() {
            format.push(format!("role prompt of `{}` lacks a `# ` title line", a.name));
        }
        texts.push((format!("role prompt of `{}`", a.name), &a.role_prompt));
        for p in &a.patches {
            for claim in role_claim(&p.text) {
                if let Some(t) = title.filter(|t| !t.eq_ignore_ascii_case(&claim)) {
                    roles.push(format!("patch {} of `{}` declares role `{claim}` but the role is `{t}`", p.id, a.name));
                }
            }
            if !patch_text_is_valid(&p.text) {
                format.push(format!("patch {} of `{}` is malformed", p.id, a.name));
            }
            texts.push((format!("patch {} of `{}`", p.id, a.name), &p.text));
        }
        for s in &a.skills {
            texts.push((format!("skill `{}` of `{}`", s.name, a.name), &s.body));
            for t in tools_in_metadata(s) {
                if !registered(&t) {
                    tooling.push(format!("skill `{}` of `{}` needs unregistered tool `{t}`", s.name, a.name));
                }
            }
        }
        for r in a.profiles.values().chain(a.notes.values()) {
            texts.push((format!("relation `{}` on `{}`", a.name, r.subject), &r.text));
        }
        for t in &a.config.allowed_tools {
            if !registered(t) {
                tooling.push(format!("`{}` allows unregistered tool `{t}`", a.name));
            }
        }
    }
    for (what, text) in texts {
        for m in mentions(text) {
            if !pool.contains(&m) {
                roles.push(format!("{what} mentions `@{m}`, who is not in the pool"));
            }
        }
        for t in tool_references(text) {
            if !registered(&t) && !exempt.contains(&t) {
                tooling.push(format!("{what} references unregistered tool `{t}`"));
            }
        }
    }
    report(vec![("role_consistency", roles), ("tool_availability", tooling), ("formatting", format)])
}
