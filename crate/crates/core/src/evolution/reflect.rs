//! Reflection operators at agent, pair and team scope.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::update::{
    AgentRevision, EvolutionUpdate, NewAgent, PairRevision, RelationEdit, SkillEdit, SpendEntry, SpendKind,
    TeamRevision,
};
use crate::attribution::extract_json;
use crate::clock::Clock;
use crate::config::{DEFAULT_PHASE_TIMEOUT, DEFAULT_REFLECTION_COST_CAP};
use crate::gateway::{ChatMessage, ChatRequest, Cost, GatewayError, ModelGateway};
use crate::runtime::{BusEvent, EventKind};
use crate::scaffold::{AgentConfig, TeamScaffold};
use crate::trace::Experience;

pub const DEFAULT_MAX_QUESTIONS: usize = 3;
pub const DEFAULT_SUMMARY_CHARS: usize = 600;
pub const DEFAULT_PATCHES_PER_REFLECTION: usize = 3;
pub const DEFAULT_MAX_FLAGGED: usize = 3;
/// Flagged event text is cut to this many characters in the team prompt.
pub const FLAGGED_EVENT_CHARS: usize = 400;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionConfig {
    /// Model for pair and team reflection; the entry agent's backbone if unset.
    pub model: Option<String>,
    pub patches_per_reflection: usize,
    pub max_questions: usize,
    pub summary_chars: usize,
    pub max_flagged: usize,
    pub reflection_cost_cap: Cost,
    pub phase_timeout: Duration,
    /// Evolution spend allowed per episode; the task's cost limit if unset.
    pub budget: Option<Cost>,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        Self {
            model: None,
            patches_per_reflection: DEFAULT_PATCHES_PER_REFLECTION,
            max_questions: DEFAULT_MAX_QUESTIONS,
            summary_chars: DEFAULT_SUMMARY_CHARS,
            max_flagged: DEFAULT_MAX_FLAGGED,
            reflection_cost_cap: DEFAULT_REFLECTION_COST_CAP,
            phase_timeout: DEFAULT_PHASE_TIMEOUT,
            budget: None,
        }
    }
}

impl EvolutionConfig {
    pub fn validate(&self) -> Result<(), String> {
        let t = self.phase_timeout.as_secs_f64();
        if !(300.0..=900.0).contains(&t) {
            return Err(format!("phase timeout {t} s outside 300..=900 s"));
        }
        if self.summary_chars == 0 {
            return Err("summary_chars must be positive".into());
        }
        Ok(())
    }
}

/// One answered evidence request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceReply {
    pub asker: String,
    pub target: String,
    pub question: String,
    pub answer: String,
    pub cost: Cost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentReflection {
    pub agent: String,
    pub revision: AgentRevision,
    pub evidence: Vec<EvidenceReply>,
    /// Seqs of the agent's own events it wants the team to see.
    pub flagged: Vec<u64>,
    pub spend: Vec<SpendEntry>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReflection {
    pub revision: PairRevision,
    pub spend: Vec<SpendEntry>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeamReflection {
    pub revision: TeamRevision,
    /// The exact user prompt sent for the team revision.
    pub prompt: String,
    pub spend: Vec<SpendEntry>,
    pub notes: Vec<String>,
}

/// Output of all three reflection levels for one experience.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reflection {
    pub update: EvolutionUpdate,
    pub agents: Vec<AgentReflection>,
    pub pairs: Vec<PairReflection>,
    pub team: TeamReflection,
}

impl Reflection {
    pub fn notes(&self) -> Vec<String> {
        self.agents
            .iter()
            .flat_map(|a| a.notes.iter())
            .chain(self.pairs.iter().flat_map(|p| p.notes.iter()))
            .chain(self.team.notes.iter())
            .cloned()
            .collect()
    }
}

/// Wall-clock window shared by every call of one reflection phase.
#[derive(Clone)]
pub struct Phase {
    clock: Arc<dyn Clock>,
    start: Duration,
    limit: Duration,
}

impl Phase {
    pub fn start(clock: Arc<dyn Clock>, limit: Duration) -> Self {
        let start = clock.now();
        Self { clock, start, limit }
    }

    fn remaining(&self) -> Option<Duration> {
        let elapsed = self.clock.now().saturating_sub(self.start);
        self.limit.checked_sub(elapsed).filter(|d| !d.is_zero())
    }
}

#[derive(Debug)]
enum CallError {
    Timeout,
    CostCap(Cost),
    Gateway(GatewayError),
}

impl std::fmt::Display for CallError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CallError::Timeout => write!(f, "reflection phase timed out"),
            CallError::CostCap(c) => write!(f, "reflection cost {c} crossed the per-reflection cap"),
            CallError::Gateway(e) => write!(f, "model call failed: {e}"),
        }
    }
}

/// Calls made on behalf of one reflection label, with its spend.
struct Meter<'a> {
    gateway: &'a ModelGateway,
    phase: &'a Phase,
    label: String,
    cap: Cost,
    spent: Cost,
    spend: Vec<SpendEntry>,
}

impl<'a> Meter<'a> {
    fn new(gateway: &'a ModelGateway, phase: &'a Phase, label: String, cap: Cost) -> Self {
        Self {
            gateway,
            phase,
            label,
            cap,
            spent: Cost::ZERO,
            spend: Vec::new(),
        }
    }

    fn call(
        &mut self,
        tag: &str,
        step: u32,
        model: &str,
        messages: &[ChatMessage],
        kind: SpendKind,
    ) -> Result<(String, Cost), CallError> {
        let remaining = self.phase.remaining().ok_or(CallError::Timeout)?;
        let mut req = ChatRequest::new(tag, model);
        req.step = Some(step);
        req.messages = messages.to_vec();
        req.deadline = Some(remaining);
        let done = match self.gateway.complete(&req) {
            Ok(done) => done,
            Err(_) if self.phase.remaining().is_none() => return Err(CallError::Timeout),
            Err(e) => return Err(CallError::Gateway(e)),
        };
        self.spent += done.cost;
        self.spend.push(SpendEntry {
            label: self.label.clone(),
            kind,
            cost: done.cost,
        });
        if self.spent > self.cap {
            return Err(CallError::CostCap(self.spent));
        }
        if self.phase.remaining().is_none() {
            return Err(CallError::Timeout);
        }
        Ok((done.response.text_or_empty().to_string(), done.cost))
    }
}

fn clip(text: &str, max: usize) -> String {
    text.chars().take(max).collect()
}

/// Compact, model-free rendering of bus events.
pub fn render_events(events: &[BusEvent]) -> String {
    events.iter().filter_map(render_event).collect::<Vec<_>>().join("\n")
}

fn render_event(e: &BusEvent) -> Option<String> {
    let p = &e.payload;
    let s = |k: &str| p.get(k).and_then(Value::as_str).unwrap_or("");
    let line = match e.kind {
        EventKind::ModelCall => return None,
        EventKind::ModelResult => {
            let mut out = format!("{} said: {}", e.actor, s("text"));
            if let Some(calls) = p.get("tool_calls").and_then(Value::as_array) {
                for c in calls {
                    out.push_str(&format!(
                        " | calls {}({})",
                        c.get("name").and_then(Value::as_str).unwrap_or("?"),
                        c.get("arguments").cloned().unwrap_or(Value::Null)
                    ));
                }
            }
            out
        }
        EventKind::ToolCall => return None,
        EventKind::ToolResult => format!("{} got {} result: {}", e.actor, s("name"), s("content")),
        EventKind::Message => format!(
            "{} -> {}: {}",
            e.actor,
            e.recipient.as_deref().unwrap_or("?"),
            s("body")
        ),
        EventKind::Lifecycle => {
            let mut out = format!("{} {}", e.actor, s("action"));
            if let Some(r) = &e.recipient {
                out.push_str(&format!(" {r}"));
            }
            out
        }
    };
    Some(format!("[seq {}] {line}", e.seq))
}

fn outcome_line(e: &Experience) -> String {
    let o = e.outcome();
    format!(
        "Score {} ({}), ended by {} ({}).",
        o.score.value,
        if o.score.passed { "passed" } else { "failed" },
        o.finalized_by,
        end_label(e)
    )
}

fn end_label(e: &Experience) -> String {
    serde_json::to_value(&e.outcome().end)
        .ok()
        .and_then(|v| v.get("kind").and_then(Value::as_str).map(str::to_string))
        .unwrap_or_default()
}

fn l1_prompt(agent: &str, cfg: &EvolutionConfig) -> String {
    format!(
        "You are `{agent}`, reflecting on your own behavior in a finished episode. \
Reply with one JSON object. To ask teammates for evidence first, reply \
{{\"questions\": [{{\"to\": <teammate>, \"question\": <text>}}]}} with at most {q} questions. \
Otherwise reply {{\"patches\": [<behavioral directive>], \"skills\": [{{\"name\": <name>, \"content\": <SKILL.md text>}}], \
\"summary\": <findings for the team, at most {s} characters>, \"flag\": [<seq of your events worth showing the team>]}}. \
Propose at most {p} patches.",
        q = cfg.max_questions,
        s = cfg.summary_chars,
        p = cfg.patches_per_reflection,
    )
}

const EVIDENCE_PROMPT: &str = "A teammate is reflecting on a finished episode and asks you a question. \
Answer briefly and only from your own steps below.";

const L2_PROMPT: &str = "You review how two agents worked together in a finished episode. \
Reply with one JSON object {\"profiles\": [{\"owner\": <agent>, \"subject\": <agent>, \"text\": <how owner should understand subject>}], \
\"notes\": [{\"owner\": <agent>, \"subject\": <agent>, \"text\": <how owner should collaborate with subject>}]}. \
Leave a list empty when nothing should change.";

const L3_PROMPT: &str = "You revise a team of agents after a finished episode, using only the member summaries \
and selected evidence below. Reply with one JSON object {\"constitution\": <new text or null>, \
\"organization\": <new text or null>, \"add\": [{\"name\": <name>, \"role_prompt\": <text>, \"allowed_tools\": [<tool>]}], \
\"remove\": [<name>], \"retry\": <true to re-run the task with the revised team>}.";

fn default_summary(agent: &str, e: &Experience) -> String {
    format!(
        "{agent}: no reflection findings; episode {}.",
        if e.outcome().score.passed { "passed" } else { "failed" }
    )
}

fn strings(v: Option<&Value>) -> Vec<String> {
    v.and_then(Value::as_array)
        .map(|a| {
            a.iter()
                .filter_map(Value::as_str)
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect()
        })
        .unwrap_or_default()
}

/// Agent-level reflection with up to `max_questions` evidence requests.
pub fn evolve_l1(
    agent: &str,
    e: &Experience,
    team: &TeamScaffold,
    gateway: &ModelGateway,
    cfg: &EvolutionConfig,
    phase: &Phase,
) -> AgentReflection {
    let label = format!("{agent}#l1");
    let mut meter = Meter::new(gateway, phase, label.clone(), cfg.reflection_cost_cap);
    let mut out = AgentReflection {
        agent: agent.to_string(),
        revision: AgentRevision::default(),
        evidence: Vec::new(),
        flagged: Vec::new(),
        spend: Vec::new(),
        notes: Vec::new(),
    };
    let local = match e.local_trace(agent) {
        Ok(l) => l,
        Err(err) => {
            out.notes.push(format!("{label}: {err}"));
            out.revision.summary = default_summary(agent, e);
            return out;
        }
    };
    let model = team
        .agent(agent)
        .map(|a| a.config.backbone.clone())
        .or_else(|| cfg.model.clone())
        .unwrap_or_default();
    let task = e.task();
    let mut messages = vec![
        ChatMessage::system(l1_prompt(agent, cfg)),
        ChatMessage::user(format!(
            "Task {}:\n{}\n\nDeliverable:\n{}\n\n{}\n\nYour trace:\n{}",
            task.id,
            task.text,
            e.outcome().deliverable,
            outcome_line(e),
            render_events(&local.events)
        )),
    ];

    let result = (|| -> Result<Option<Value>, CallError> {
        let (first, _) = meter.call(&label, 1, &model, &messages, SpendKind::Reflection)?;
        let parsed = extract_json(&first);
        let questions = parsed
            .as_ref()
            .and_then(|v| v.get("questions"))
            .and_then(Value::as_array)
            .filter(|q| !q.is_empty())
            .cloned();
        let Some(questions) = questions else {
            return Ok(parsed);
        };
        let mut replies = Vec::new();
        for q in questions.iter() {
            if out.evidence.len() + replies.len() >= cfg.max_questions {
                out.notes.push(format!("{label}: questions beyond {} ignored", cfg.max_questions));
                break;
            }
            let to = q.get("to").and_then(Value::as_str).unwrap_or("");
            let question = q.get("question").and_then(Value::as_str).unwrap_or("").trim();
            if to == agent || question.is_empty() || !e.trajectory().agents().iter().any(|a| a == to) {
                out.notes.push(format!("{label}: skipped evidence request to `{to}`"));
                continue;
            }
            let target_trace = e.local_trace(to).expect("participant has a local trace");
            let target_model = team.agent(to).map_or(model.clone(), |a| a.config.backbone.clone());
            let ask = [
                ChatMessage::system(EVIDENCE_PROMPT),
                ChatMessage::user(format!(
                    "Your trace:\n{}\n\nQuestion from {agent}: {question}",
                    render_events(&target_trace.events)
                )),
            ];
            let step = replies.len() as u32 + 1;
            let (answer, cost) =
                meter.call(&format!("{to}#evidence:{agent}"), step, &target_model, &ask, SpendKind::Evidence)?;
            replies.push(EvidenceReply {
                asker: agent.to_string(),
                target: to.to_string(),
                question: question.to_string(),
                answer: answer.trim().to_string(),
                cost,
            });
        }
        let listing = if replies.is_empty() {
            "(no usable evidence)".to_string()
        } else {
            replies
                .iter()
                .map(|r| format!("- {} answered \"{}\": {}", r.target, r.question, r.answer))
                .collect::<Vec<_>>()
                .join("\n")
        };
        out.evidence = replies;
        messages.push(ChatMessage::assistant(first));
        messages.push(ChatMessage::user(format!(
            "Evidence from teammates:\n{listing}\n\nNow reply with your revision JSON object."
        )));
        let (second, _) = meter.call(&label, 2, &model, &messages, SpendKind::Reflection)?;
        Ok(extract_json(&second))
    })();
    out.spend = std::mem::take(&mut meter.spend);

    match result {
        Ok(Some(v)) => {
            let mut patches = strings(v.get("patches"));
            if patches.len() > cfg.patches_per_reflection {
                out.notes.push(format!(
                    "{label}: kept the first {} of {} patches",
                    cfg.patches_per_reflection,
                    patches.len()
                ));
                patches.truncate(cfg.patches_per_reflection);
            }
            let skills = v
                .get("skills")
                .and_then(Value::as_array)
                .map(|a| {
                    a.iter()
                        .filter_map(|s| {
                            Some(SkillEdit {
                                name: s.get("name")?.as_str()?.to_string(),
                                content: s.get("content")?.as_str()?.to_string(),
                            })
                        })
                        .collect()
                })
                .unwrap_or_default();
            let own: Vec<u64> = local.events.iter().filter(|ev| ev.actor == agent).map(|ev| ev.seq).collect();
            out.flagged = v
                .get("flag")
                .and_then(Value::as_array)
                .map(|a| a.iter().filter_map(Value::as_u64).filter(|s| own.contains(s)).collect())
                .unwrap_or_default();
            out.flagged.dedup();
            out.flagged.truncate(cfg.max_flagged);
            let summary = v.get("summary").and_then(Value::as_str).unwrap_or("").trim();
            out.revision = AgentRevision {
                patches,
                skills,
                summary: summary.to_string(),
            };
        }
        Ok(None) => out.notes.push(format!("{label}: unreadable reflection; no changes")),
        Err(err) => {
            out.evidence.clear();
            out.notes.push(format!("{label}: {err}; output discarded"));
        }
    }
    if out.revision.summary.is_empty() {
        out.revision.summary = default_summary(agent, e);
    }
    if out.revision.summary.chars().count() > cfg.summary_chars {
        out.notes.push(format!("{label}: summary cut to {} characters", cfg.summary_chars));
        out.revision.summary = clip(&out.revision.summary, cfg.summary_chars);
    }
    out
}

fn relation_edits(v: Option<&Value>, pair: &(String, String)) -> (Vec<RelationEdit>, usize) {
    let mut dropped = 0;
    let edits = v
        .and_then(Value::as_array)
        .map(|a| {
            a.iter()
                .filter_map(|x| {
                    let owner = x.get("owner").and_then(Value::as_str)?;
                    let subject = x.get("subject").and_then(Value::as_str)?;
                    let text = x.get("text").and_then(Value::as_str)?.trim();
                    let ok = owner != subject
                        && [owner, subject].iter().all(|n| *n == pair.0 || *n == pair.1)
                        && !text.is_empty();
                    if !ok {
                        dropped += 1;
                    }
                    ok.then(|| RelationEdit {
                        owner: owner.into(),
                        subject: subject.into(),
                        text: text.into(),
                    })
                })
                .collect()
        })
        .unwrap_or_default();
    (edits, dropped)
}

/// Interaction-level reflection for a pair that exchanged messages.
pub fn evolve_l2(
    pair: (&str, &str),
    e: &Experience,
    team: &TeamScaffold,
    gateway: &ModelGateway,
    model: &str,
    cfg: &EvolutionConfig,
    phase: &Phase,
) -> PairReflection {
    let (a, b) = pair;
    let label = format!("{a}+{b}#l2");
    let owned = (a.to_string(), b.to_string());
    let mut out = PairReflection {
        revision: PairRevision {
            pair: owned.clone(),
            profiles: Vec::new(),
            notes: Vec::new(),
        },
        spend: Vec::new(),
        notes: Vec::new(),
    };
    let exchanged: Vec<BusEvent> = e
        .trajectory()
        .events()
        .iter()
        .filter(|ev| {
            ev.kind == EventKind::Message
                && matches!(
                    (ev.actor.as_str(), ev.recipient.as_deref()),
                    (x, Some(y)) if (x == a && y == b) || (x == b && y == a)
                )
        })
        .cloned()
        .collect();
    let current = |owner: &str, subject: &str| {
        let agent = team.agent(owner);
        let profile = agent.and_then(|x| x.profiles.get(subject)).map_or("(none)", |r| r.text.as_str());
        let note = agent.and_then(|x| x.notes.get(subject)).map_or("(none)", |r| r.text.as_str());
        format!("{owner} on {subject}: profile: {profile}; note: {note}")
    };
    let messages = [
        ChatMessage::system(L2_PROMPT),
        ChatMessage::user(format!(
            "Agents: {a} and {b}.\n{}\n\nMessages between them:\n{}\n\nCurrent views:\n{}\n{}",
            outcome_line(e),
            render_events(&exchanged),
            current(a, b),
            current(b, a)
        )),
    ];
    let mut meter = Meter::new(gateway, phase, label.clone(), cfg.reflection_cost_cap);
    let result = meter.call(&label, 1, model, &messages, SpendKind::Reflection);
    out.spend = meter.spend;
    match result {
        Ok((text, _)) => match extract_json(&text) {
            Some(v) => {
                let (profiles, d1) = relation_edits(v.get("profiles"), &owned);
                let (notes, d2) = relation_edits(v.get("notes"), &owned);
                if d1 + d2 > 0 {
                    out.notes.push(format!("{label}: dropped {} edits outside the pair", d1 + d2));
                }
                out.revision.profiles = profiles;
                out.revision.notes = notes;
            }
            None => out.notes.push(format!("{label}: unreadable reflection; no changes")),
        },
        Err(err) => out.notes.push(format!("{label}: {err}; output discarded")),
    }
    out
}

/// The team-revision prompt: member summaries, evidence replies and flagged
/// events, with no other trace content.
pub fn l3_prompt(team: &TeamScaffold, e: &Experience, agents: &[AgentReflection]) -> String {
    let pool = team
        .pool
        .iter()
        .map(|a| format!("- {}: {}", a.name, a.summary()))
        .collect::<Vec<_>>()
        .join("\n");
    let summaries = agents
        .iter()
        .map(|a| format!("- {}: {}", a.agent, a.revision.summary))
        .collect::<Vec<_>>()
        .join("\n");
    let mut evidence = Vec::new();
    for a in agents {
        for r in &a.evidence {
            evidence.push(format!(
                "- {} asked {}: {}\n  answer: {}",
                r.asker, r.target, r.question, r.answer
            ));
        }
        for seq in &a.flagged {
            if let Some(line) = e.trajectory().events().get(*seq as usize).and_then(render_event) {
                evidence.push(format!("- flagged by {}: {}", a.agent, clip(&line, FLAGGED_EVENT_CHARS)));
            }
        }
    }
    let evidence = if evidence.is_empty() {
        "(none)".to_string()
    } else {
        evidence.join("\n")
    };
    let organization = if team.organization.trim().is_empty() {
        "(none)"
    } else {
        team.organization.as_str()
    };
    format!(
        "Constitution:\n{}\n\nOrganization:\n{}\n\nPool:\n{}\n\nEpisode {} on task {}. {}\n\nMember summaries:\n{}\n\nSelected evidence:\n{}",
        team.constitution,
        organization,
        pool,
        e.episode_id(),
        e.task().id,
        outcome_line(e),
        summaries,
        evidence
    )
}

fn title_case(name: &str) -> String {
    name.split(['-', '_', '.'])
        .filter(|w| !w.is_empty())
        .map(|w| {
            let mut c = w.chars();
            c.next()
                .map(|f| f.to_uppercase().collect::<String>() + c.as_str())
                .unwrap_or_default()
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Prompt for an agent added without one.
pub fn template_role_prompt(name: &str) -> String {
    format!(
        "# {}\nYou are `{name}`, a member of this team. Follow the constitution, \
report progress to the agent that started you, and ask before acting outside your role.",
        title_case(name)
    )
}

fn team_revision(v: &Value, team: &TeamScaffold) -> TeamRevision {
    let text = |k: &str| v.get(k).and_then(Value::as_str).map(|s| s.trim().to_string());
    let default_backbone = team
        .agent(&team.entry)
        .map(|a| a.config.backbone.clone())
        .unwrap_or_default();
    let add = v
        .get("add")
        .and_then(Value::as_array)
        .map(|a| {
            a.iter()
                .filter_map(|x| {
                    let name = x.get("name")?.as_str()?.trim().to_string();
                    let role = x.get("role_prompt").and_then(Value::as_str).unwrap_or("").trim();
                    let mut config = AgentConfig::new(
                        x.get("backbone").and_then(Value::as_str).unwrap_or(&default_backbone),
                    );
                    config.allowed_tools = strings(x.get("allowed_tools"));
                    Some(NewAgent {
                        role_prompt: if role.is_empty() {
                            template_role_prompt(&name)
                        } else {
                            role.to_string()
                        },
                        name,
                        config,
                    })
                })
                .collect()
        })
        .unwrap_or_default();
    TeamRevision {
        constitution: text("constitution").filter(|s| !s.is_empty()),
        organization: text("organization"),
        add,
        remove: strings(v.get("remove")),
        retry: v.get("retry").and_then(Value::as_bool).unwrap_or(false),
    }
}

/// Team-level revision from summaries and selected evidence.
pub fn evolve_l3(
    team: &TeamScaffold,
    e: &Experience,
    agents: &[AgentReflection],
    gateway: &ModelGateway,
    model: &str,
    cfg: &EvolutionConfig,
    phase: &Phase,
) -> TeamReflection {
    let label = "team#l3".to_string();
    let prompt = l3_prompt(team, e, agents);
    let messages = [ChatMessage::system(L3_PROMPT), ChatMessage::user(prompt.clone())];
    let mut meter = Meter::new(gateway, phase, label.clone(), cfg.reflection_cost_cap);
    let result = meter.call(&label, 1, model, &messages, SpendKind::Reflection);
    let mut out = TeamReflection {
        revision: TeamRevision::default(),
        prompt,
        spend: meter.spend,
        notes: Vec::new(),
    };
    match result {
        Ok((text, _)) => match extract_json(&text) {
            Some(v) => out.revision = team_revision(&v, team),
            None => out.notes.push(format!("{label}: unreadable reflection; no changes")),
        },
        Err(err) => out.notes.push(format!("{label}: {err}; output discarded")),
    }
    out
}

/// Runs agent reflections in parallel, then pair reflections over every
/// pair that exchanged a message, then the team revision, and assembles the
/// update.
pub fn reflect(team: &TeamScaffold, e: &Experience, gateway: &ModelGateway, cfg: &EvolutionConfig) -> Reflection {
    let model = cfg.model.clone().unwrap_or_else(|| {
        team.agent(&team.entry)
            .map(|a| a.config.backbone.clone())
            .unwrap_or_default()
    });
    let participants = e.trajectory().agents().to_vec();

    let phase = Phase::start(gateway.clock().clone(), cfg.phase_timeout);
    let agents: Vec<AgentReflection> = std::thread::scope(|s| {
        let handles: Vec<_> = participants
            .iter()
            .map(|a| {
                let phase = &phase;
                s.spawn(move || evolve_l1(a, e, team, gateway, cfg, phase))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("reflection thread panicked")).collect()
    });

    let phase = Phase::start(gateway.clock().clone(), cfg.phase_timeout);
    let pairs: Vec<(String, String)> = e.trajectory().message_pairs().into_iter().collect();
    let pair_results: Vec<PairReflection> = std::thread::scope(|s| {
        let handles: Vec<_> = pairs
            .iter()
            .map(|(a, b)| {
                let (phase, model) = (&phase, &model);
                s.spawn(move || evolve_l2((a, b), e, team, gateway, model, cfg, phase))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("reflection thread panicked")).collect()
    });

    let phase = Phase::start(gateway.clock().clone(), cfg.phase_timeout);
    let team_result = evolve_l3(team, e, &agents, gateway, &model, cfg, &phase);

    let mut update = EvolutionUpdate::new(e.episode_id());
    let mut by_agent: BTreeMap<String, AgentRevision> = BTreeMap::new();
    for a in &agents {
        by_agent.insert(a.agent.clone(), a.revision.clone());
        for s in &a.spend {
            update.spend.record(s.label.clone(), s.kind, s.cost);
        }
    }
    update.agents = by_agent;
    for p in &pair_results {
        update.pairs.push(p.revision.clone());
        for s in &p.spend {
            update.spend.record(s.label.clone(), s.kind, s.cost);
        }
    }
    update.team = team_result.revision.clone();
    for s in &team_result.spend {
        update.spend.record(s.label.clone(), s.kind, s.cost);
    }
    Reflection {
        update,
        agents,
        pairs: pair_results,
        team: team_result,
    }
}
