use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::parse::{parse_submission, parse_summary, parse_verdict};
use super::vote::aggregate_votes;
use super::{Attribution, AttributionError, ProvisionalSource, SchemeConfig, StepIndex, Submission, Verdict};
use crate::gateway::{ChatMessage, ChatRequest, Cost, GatewayError, ModelGateway};
use crate::trace::StepRecord;

const GLOBAL_PROMPT: &str = "You audit the complete trace of a failed multi-agent run. \
Find the decisive mistake: the earliest step whose error made the run fail. \
Reply with a JSON object {\"agent\": <agent name>, \"step\": <step number>}.";

const LOCAL_PROMPT: &str = "You review your own steps from a failed multi-agent run. \
Decide whether you made the decisive mistake. Reply with a JSON object \
{\"i_erred\": true|false, \"my_step\": <your local step number, if you erred>, \
\"confidence\": <number between 0 and 1>}.";

const COLLAB_PROMPT: &str = "You review your own steps from a failed multi-agent run \
together with analyzers of the other agents. You will post summaries of your findings, \
read theirs, and finally submit a self-assessment.";

const SUMMARY_ASK: &str = "Post a short summary of your findings as a JSON object \
{\"summary\": <text>, \"suspect_agent\": <name or null>, \"suspect_step\": <global step or null>}.";

const SUBMIT_ASK: &str = "Re-audit your steps and submit a JSON object \
{\"i_erred\": true|false, \"my_step\": <your local step number, if you erred>, \
\"confidence\": <number between 0 and 1>, \"disagree\": true|false}. \
Set disagree only if you reject the provisional verdict and can cite counter-evidence \
from your own steps.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Global,
    Local,
    Collaborative,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Global => "global",
            Scheme::Local => "local",
            Scheme::Collaborative => "collab",
        }
    }
}

impl FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "global" => Ok(Scheme::Global),
            "local" => Ok(Scheme::Local),
            "collab" | "collaborative" => Ok(Scheme::Collaborative),
            other => Err(format!("unknown scheme `{other}` (expected global, local or collab)")),
        }
    }
}

pub fn attribute(
    scheme: Scheme,
    steps: &[StepRecord],
    gateway: &ModelGateway,
    cfg: &SchemeConfig,
) -> Result<Attribution, AttributionError> {
    match scheme {
        Scheme::Global => attribute_global(steps, gateway, cfg),
        Scheme::Local => attribute_local(steps, gateway, cfg),
        Scheme::Collaborative => attribute_collaborative(steps, gateway, cfg),
    }
}

fn render_step(s: &StepRecord, label: &str) -> String {
    format!(
        "[{label}] {}\n--- input ---\n{}\n--- output ---\n{}",
        s.agent, s.input, s.output
    )
}

fn flatten(steps: &[StepRecord]) -> String {
    steps
        .iter()
        .map(|s| render_step(s, &format!("step {}", s.index)))
        .collect::<Vec<_>>()
        .join("\n\n")
}

fn sub_trace(steps: &[StepRecord], agent: &str) -> String {
    let body = steps
        .iter()
        .filter(|s| s.agent == agent)
        .enumerate()
        .map(|(i, s)| render_step(s, &format!("local step {} = global step {}", i + 1, s.index)))
        .collect::<Vec<_>>()
        .join("\n\n");
    format!("You are analyzing agent `{agent}`. Its steps:\n\n{body}")
}

#[derive(Debug, Default)]
struct Meter {
    calls: u32,
    cost: Cost,
}

impl Meter {
    fn call(
        &mut self,
        gateway: &ModelGateway,
        tag: &str,
        step: u32,
        cfg: &SchemeConfig,
        messages: &[ChatMessage],
    ) -> Result<String, GatewayError> {
        let mut req = ChatRequest::new(tag, cfg.model.clone());
        req.step = Some(step);
        req.messages = messages.to_vec();
        let done = gateway.complete(&req)?;
        self.calls += 1;
        self.cost = self.cost + done.cost;
        Ok(done.response.text_or_empty().to_string())
    }

    fn absorb(&mut self, other: Meter) {
        self.calls += other.calls;
        self.cost = self.cost + other.cost;
    }
}

/// Runs `f` for every agent on its own thread; results keep agent order.
fn per_agent<T: Send>(
    agents: &[String],
    f: impl Fn(usize, &str) -> T + Sync,
) -> Vec<T> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = agents
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let f = &f;
                scope.spawn(move || f(i, a))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("analyzer thread panicked"))
            .collect()
    })
}

fn base(scheme: Scheme, index: &StepIndex) -> Attribution {
    Attribution {
        scheme,
        verdict: Verdict::new(index.agents()[0].clone(), 1),
        fallback: None,
        submissions: Vec::new(),
        tally: Vec::new(),
        provisional: None,
        summaries: BTreeMap::new(),
        step_map: index.table().clone(),
        warnings: Vec::new(),
        calls: 0,
        cost: Cost::ZERO,
    }
}

struct GlobalPass {
    verdict: Verdict,
    fallback: Option<String>,
    warnings: Vec<String>,
}

fn global_pass(
    steps: &[StepRecord],
    index: &StepIndex,
    gateway: &ModelGateway,
    cfg: &SchemeConfig,
    meter: &mut Meter,
) -> Result<GlobalPass, AttributionError> {
    let mut messages = vec![
        ChatMessage::system(GLOBAL_PROMPT),
        ChatMessage::user(format!(
            "Agents: {}\n\n{}",
            index.agents().join(", "),
            flatten(steps)
        )),
    ];
    let reply = meter.call(gateway, "global", 1, cfg, &messages)?;
    let first_err = match parse_verdict(&reply, index) {
        Ok(verdict) => {
            return Ok(GlobalPass {
                verdict,
                fallback: None,
                warnings: Vec::new(),
            })
        }
        Err(e) => e,
    };
    messages.push(ChatMessage::assistant(reply));
    messages.push(ChatMessage::user(format!(
        "Your reply could not be read ({first_err}). Reply with only the JSON object."
    )));
    let repair = meter.call(gateway, "global#repair", 1, cfg, &messages)?;
    let mut warnings = vec![format!("global: {first_err}")];
    match parse_verdict(&repair, index) {
        Ok(verdict) => Ok(GlobalPass {
            verdict,
            fallback: None,
            warnings,
        }),
        Err(e) => {
            warnings.push(format!("global repair: {e}"));
            Ok(GlobalPass {
                verdict: Verdict::new(index.agents()[0].clone(), 1),
                fallback: Some("undecided verdict; charged the first step".into()),
                warnings,
            })
        }
    }
}

/// One model call over the whole flattened trace, with one repair attempt.
pub fn attribute_global(
    steps: &[StepRecord],
    gateway: &ModelGateway,
    cfg: &SchemeConfig,
) -> Result<Attribution, AttributionError> {
    cfg.validate()?;
    let index = StepIndex::new(steps)?;
    let mut meter = Meter::default();
    let pass = global_pass(steps, &index, gateway, cfg, &mut meter)?;
    let mut out = base(Scheme::Global, &index);
    out.verdict = pass.verdict;
    out.fallback = pass.fallback;
    out.warnings = pass.warnings;
    out.calls = meter.calls;
    out.cost = meter.cost;
    Ok(out)
}

type Analyzed = Result<(Submission, Vec<String>, Meter), GatewayError>;

fn read_submission(analyzer: &str, reply: &str, local_len: u32, keep_disagree: bool) -> (Submission, Vec<String>) {
    match parse_submission(analyzer, reply, local_len) {
        Ok((mut s, w)) => {
            if !keep_disagree {
                s.disagree = false;
            }
            (s, w)
        }
        Err(e) => (
            Submission::deny(analyzer, 0.0),
            vec![format!("{analyzer}: unreadable submission ({e}); counted as denial")],
        ),
    }
}

fn finish(
    mut out: Attribution,
    results: Vec<Analyzed>,
    alpha: f64,
    index: &StepIndex,
    mut meter: Meter,
) -> Result<Attribution, AttributionError> {
    for r in results {
        let (s, w, m) = r?;
        out.submissions.push(s);
        out.warnings.extend(w);
        meter.absorb(m);
    }
    let tally = aggregate_votes(&out.submissions, alpha, index);
    out.verdict = tally.verdict;
    out.tally = tally.totals;
    out.fallback = tally.fallback;
    out.calls = meter.calls;
    out.cost = meter.cost;
    Ok(out)
}

/// One isolated analyzer per agent; the most confident self-accusation wins.
pub fn attribute_local(
    steps: &[StepRecord],
    gateway: &ModelGateway,
    cfg: &SchemeConfig,
) -> Result<Attribution, AttributionError> {
    cfg.validate()?;
    let index = StepIndex::new(steps)?;
    let results = per_agent(index.agents(), |_, agent| -> Analyzed {
        let mut meter = Meter::default();
        let messages = [ChatMessage::system(LOCAL_PROMPT), ChatMessage::user(sub_trace(steps, agent))];
        let reply = meter.call(gateway, &format!("analyzer:{agent}"), 1, cfg, &messages)?;
        let (s, w) = read_submission(agent, &reply, index.local_len(agent), false);
        Ok((s, w, meter))
    });
    // Accusations name distinct pairs, so weights reduce to raw confidence.
    finish(base(Scheme::Local, &index), results, 0.0, &index, Meter::default())
}

fn others(summaries: &[String], agents: &[String], me: usize) -> String {
    let lines: Vec<String> = agents
        .iter()
        .zip(summaries)
        .enumerate()
        .filter(|(i, _)| *i != me)
        .map(|(_, (a, s))| format!("- {a}: {s}"))
        .collect();
    if lines.is_empty() {
        "(no other analyzers)".into()
    } else {
        lines.join("\n")
    }
}

/// Most frequently named suspect; ties go to the earlier step, then name.
fn consensus(suspects: &[Option<Verdict>]) -> Option<Verdict> {
    let mut counts: BTreeMap<(u32, &str), usize> = BTreeMap::new();
    for v in suspects.iter().flatten() {
        *counts.entry((v.mistake_step, v.mistake_agent.as_str())).or_default() += 1;
    }
    let max = counts.values().copied().max()?;
    counts
        .into_iter()
        .find(|(_, n)| *n == max)
        .map(|((step, agent), _)| Verdict::new(agent, step))
}

/// Per-agent analyzers exchange summaries for `cfg.rounds` rounds, then
/// submit self-assessments that are combined by [`aggregate_votes`].
pub fn attribute_collaborative(
    steps: &[StepRecord],
    gateway: &ModelGateway,
    cfg: &SchemeConfig,
) -> Result<Attribution, AttributionError> {
    cfg.validate()?;
    let index = StepIndex::new(steps)?;
    let agents = index.agents().to_vec();
    let mut out = base(Scheme::Collaborative, &index);
    let mut meter = Meter::default();

    let mut threads: Vec<Vec<ChatMessage>> = agents
        .iter()
        .map(|a| vec![ChatMessage::system(COLLAB_PROMPT), ChatMessage::user(format!("{}\n\n{SUMMARY_ASK}", sub_trace(steps, a)))])
        .collect();
    let mut summaries: Vec<String> = vec![String::new(); agents.len()];
    let mut suspects: Vec<Option<Verdict>> = vec![None; agents.len()];
    for round in 1..=cfg.rounds {
        if round > 1 {
            for (i, thread) in threads.iter_mut().enumerate() {
                thread.push(ChatMessage::user(format!(
                    "Summaries posted by the other analyzers:\n{}\n\n{SUMMARY_ASK}",
                    others(&summaries, &agents, i)
                )));
            }
        }
        let replies = per_agent(&agents, |i, agent| {
            let mut m = Meter::default();
            m.call(gateway, &format!("analyzer:{agent}"), round, cfg, &threads[i])
                .map(|r| (r, m))
        });
        for (i, r) in replies.into_iter().enumerate() {
            let (reply, m) = r?;
            meter.absorb(m);
            let post = parse_summary(&reply, &index);
            summaries[i] = post.summary;
            suspects[i] = post.suspect;
            threads[i].push(ChatMessage::assistant(reply));
        }
    }

    out.provisional = match cfg.provisional {
        ProvisionalSource::Consensus => consensus(&suspects),
        ProvisionalSource::GlobalPass => {
            let pass = global_pass(steps, &index, gateway, cfg, &mut meter)?;
            out.warnings.extend(pass.warnings);
            Some(pass.verdict)
        }
    };
    let provisional = out
        .provisional
        .as_ref()
        .map_or("none".to_string(), |v| format!("agent {} at global step {}", v.mistake_agent, v.mistake_step));

    let final_step = cfg.rounds + 1;
    let results = per_agent(&agents, |i, agent| -> Analyzed {
        let mut m = Meter::default();
        let mut thread = threads[i].clone();
        thread.push(ChatMessage::user(format!(
            "Summaries posted by the other analyzers:\n{}\n\nProvisional verdict: {provisional}\n\n{SUBMIT_ASK}",
            others(&summaries, &agents, i)
        )));
        let reply = m.call(gateway, &format!("analyzer:{agent}"), final_step, cfg, &thread)?;
        let (s, w) = read_submission(agent, &reply, index.local_len(agent), true);
        Ok((s, w, m))
    });
    out.summaries = agents.iter().cloned().zip(summaries).collect();
    finish(out, results, cfg.alpha, &index, meter)
}
