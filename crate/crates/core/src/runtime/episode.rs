use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::budget::Budget;
use super::bus::{Bus, BusEvent, EventKind, SYSTEM};
use super::history::trim_history;
use super::tools::ToolRegistry;
use super::{EndReason, PrimitiveError, RosterState, RuntimeError, Task, TaskOutcome};
use crate::config::{BudgetLimits, RuntimeSettings};
use crate::evaluator::{Evaluator, Score};
use crate::gateway::{ChatMessage, ChatRequest, Cost, ModelGateway, Role, ToolCall};
use crate::scaffold::{load_skill, render_system_prompt, TeamScaffold};
use crate::trace::Experience;

/// User message appended to each active agent's context when the runtime
/// force-finalizes.
pub const FORCE_FINALIZE_NOTICE: &str = "FORCE-FINALIZE: the episode budget is exhausted and tools are disabled. \
Reply with your best-effort final deliverable as plain text.";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Scheduling {
    /// One thread, one step per active agent per round, in start order.
    /// Reproducible given a deterministic backend.
    #[default]
    Deterministic,
    /// One thread per active agent.
    Concurrent,
}

#[derive(Debug, Clone, Default)]
pub struct EpisodeConfig {
    pub settings: RuntimeSettings,
    pub scheduling: Scheduling,
    /// Defaults to `<task id>.v<team version>`.
    pub episode_id: Option<String>,
    pub tools: ToolRegistry,
}

/// One mailbox entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mail {
    /// Seq of the bus event that produced it.
    pub seq: u64,
    pub from: String,
    pub body: String,
    /// Start brief rather than a message.
    pub brief: bool,
}

impl Mail {
    fn render(&self) -> String {
        if self.brief {
            format!("[brief from {}]\n{}", self.from, self.body)
        } else {
            format!("[message from {}, seq {}]\n{}", self.from, self.seq, self.body)
        }
    }
}

#[derive(Debug, Clone)]
struct AgentLoop {
    name: String,
    history: Vec<ChatMessage>,
    steps: u32,
    phase_steps: u32,
    idle: bool,
}

impl AgentLoop {
    fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            history: Vec::new(),
            steps: 0,
            phase_steps: 0,
            idle: true,
        }
    }

    fn set_system(&mut self, prompt: String) {
        match self.history.first_mut() {
            Some(m) if m.role == Role::System => m.content = prompt,
            _ => self.history.insert(0, ChatMessage::system(prompt)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StepStatus {
    Progress,
    Idle,
    Halted,
}

struct State {
    bus: Bus,
    budget: Budget,
    started: Duration,
    roster: RosterState,
    start_order: Vec<String>,
    mailboxes: BTreeMap<String, VecDeque<Mail>>,
    end: Option<EndReason>,
    finalized_by: Option<String>,
    deliverable: String,
    forced: Option<EndReason>,
    failure: Option<RuntimeError>,
    busy: BTreeSet<String>,
    running: BTreeSet<String>,
    loops: BTreeMap<String, AgentLoop>,
}

impl State {
    fn halted(&self) -> bool {
        self.end.is_some() || self.forced.is_some() || self.failure.is_some()
    }

    fn active_in_order(&self) -> Vec<String> {
        self.start_order
            .iter()
            .filter(|n| self.roster.is_active(n))
            .cloned()
            .collect()
    }

    fn has_mail(&self, agent: &str) -> bool {
        self.mailboxes.get(agent).is_some_and(|q| !q.is_empty())
    }
}

/// A single running episode.
pub struct Episode {
    id: String,
    team: Arc<TeamScaffold>,
    task: Task,
    gateway: ModelGateway,
    cfg: EpisodeConfig,
    state: Mutex<State>,
    wake: Condvar,
}

/// Runs one episode with default settings.
pub fn run_task(
    team: &TeamScaffold,
    task: &Task,
    limits: &BudgetLimits,
    gateway: &ModelGateway,
    evaluator: &dyn Evaluator,
) -> Result<Experience, RuntimeError> {
    Episode::new(
        Arc::new(team.clone()),
        task.clone(),
        limits,
        gateway.clone(),
        EpisodeConfig::default(),
    )?
    .run(evaluator)
}

impl Episode {
    /// Validates the inputs and starts the entry agent with the task.
    pub fn new(
        team: Arc<TeamScaffold>,
        task: Task,
        limits: &BudgetLimits,
        gateway: ModelGateway,
        cfg: EpisodeConfig,
    ) -> Result<Self, RuntimeError> {
        team.check()?;
        limits.validate()?;
        for agent in &team.pool {
            if let Some(tool) = agent
                .config
                .allowed_tools
                .iter()
                .find(|t| !cfg.tools.is_registered(t))
            {
                return Err(RuntimeError::UnknownTool {
                    agent: agent.name.clone(),
                    tool: tool.clone(),
                });
            }
        }
        let id = cfg
            .episode_id
            .clone()
            .unwrap_or_else(|| format!("{}.v{}", task.id, team.version));
        let started = gateway.clock().now();
        let state = State {
            bus: Bus::new(),
            budget: Budget::new(limits),
            started,
            roster: RosterState::default(),
            start_order: Vec::new(),
            mailboxes: team.names().map(|n| (n.to_string(), VecDeque::new())).collect(),
            end: None,
            finalized_by: None,
            deliverable: String::new(),
            forced: None,
            failure: None,
            busy: BTreeSet::new(),
            running: BTreeSet::new(),
            loops: BTreeMap::new(),
        };
        let episode = Self {
            id,
            team,
            task,
            gateway,
            cfg,
            state: Mutex::new(state),
            wake: Condvar::new(),
        };
        {
            let mut st = episode.lock();
            let entry = episode.team.entry.clone();
            let brief = episode.task.render();
            episode.activate(&mut st, SYSTEM, &entry, brief);
        }
        Ok(episode)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn team(&self) -> &TeamScaffold {
        &self.team
    }

    pub fn roster(&self) -> RosterState {
        self.lock().roster.clone()
    }

    pub fn events(&self) -> Vec<BusEvent> {
        self.lock().bus.events().to_vec()
    }

    pub fn budget(&self) -> Budget {
        self.lock().budget.clone()
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn record(
        &self,
        st: &mut State,
        kind: EventKind,
        actor: &str,
        recipient: Option<&str>,
        payload: Value,
        cost: Cost,
    ) -> u64 {
        let now = self.gateway.clock().now();
        let State { bus, budget, .. } = st;
        let event = bus.append(now.as_millis() as u64, kind, actor, recipient, payload, cost);
        let seq = event.seq;
        budget.charge(event);
        budget.tick(now.saturating_sub(st.started));
        if let Some(limit) = st.budget.exhausted {
            if st.forced.is_none() && st.end.is_none() {
                log::info!("episode {}: {limit} reached at seq {seq}", self.id);
                st.forced = Some(EndReason::Exhausted { limit });
                self.wake.notify_all();
            }
        }
        seq
    }

    fn tick(&self, st: &mut State) {
        let elapsed = self.gateway.clock().now().saturating_sub(st.started);
        if let Some(limit) = st.budget.tick(elapsed) {
            if st.forced.is_none() && st.end.is_none() {
                log::info!("episode {}: {limit} reached", self.id);
                st.forced = Some(EndReason::Exhausted { limit });
                self.wake.notify_all();
            }
        }
    }

    fn require_active(st: &State, caller: &str) -> Result<(), PrimitiveError> {
        if caller == SYSTEM || st.roster.is_active(caller) {
            Ok(())
        } else {
            Err(PrimitiveError::NotActive(caller.to_string()))
        }
    }

    fn activate(&self, st: &mut State, caller: &str, name: &str, brief: String) -> u64 {
        st.roster.stopped.remove(name);
        st.roster.active.insert(name.to_string());
        if !st.start_order.iter().any(|n| n == name) {
            st.start_order.push(name.to_string());
        }
        let seq = self.record(
            st,
            EventKind::Lifecycle,
            caller,
            Some(name),
            json!({"action": "start", "agent": name, "brief": brief}),
            Cost::ZERO,
        );
        st.mailboxes.entry(name.to_string()).or_default().push_front(Mail {
            seq,
            from: caller.to_string(),
            body: brief,
            brief: true,
        });
        self.wake.notify_all();
        seq
    }

    /// Pool listing with one line per agent.
    pub fn list_pool(&self, caller: &str) -> Result<String, PrimitiveError> {
        let mut st = self.lock();
        Self::require_active(&st, caller)?;
        let listing = self
            .team
            .pool
            .iter()
            .map(|a| {
                let status = if st.roster.is_active(&a.name) { "active" } else { "inactive" };
                format!("- {} [{status}]: {}", a.name, a.summary())
            })
            .collect::<Vec<_>>()
            .join("\n");
        self.record(
            &mut st,
            EventKind::Lifecycle,
            caller,
            None,
            json!({"action": "list_pool", "listing": listing}),
            Cost::ZERO,
        );
        Ok(listing)
    }

    pub fn start_agent(&self, caller: &str, name: &str, brief: &str) -> Result<String, PrimitiveError> {
        let mut st = self.lock();
        Self::require_active(&st, caller)?;
        if !self.team.contains(name) {
            return Err(PrimitiveError::UnknownAgent(name.to_string()));
        }
        if st.roster.is_active(name) {
            return Err(PrimitiveError::AlreadyActive(name.to_string()));
        }
        self.activate(&mut st, caller, name, brief.to_string());
        Ok(format!("started {name}"))
    }

    pub fn stop_agent(&self, caller: &str, name: &str) -> Result<String, PrimitiveError> {
        let mut st = self.lock();
        Self::require_active(&st, caller)?;
        if !self.team.contains(name) {
            return Err(PrimitiveError::UnknownAgent(name.to_string()));
        }
        if !st.roster.active.remove(name) {
            return Err(PrimitiveError::NotActive(name.to_string()));
        }
        st.roster.stopped.insert(name.to_string());
        let pending = st.mailboxes.get(name).map_or(0, VecDeque::len);
        self.record(
            &mut st,
            EventKind::Lifecycle,
            caller,
            Some(name),
            json!({"action": "stop", "agent": name, "undelivered": pending}),
            Cost::ZERO,
        );
        self.wake.notify_all();
        Ok(format!("stopped {name}"))
    }

    /// Appends a message and queues it in the recipient's mailbox. Returns
    /// its seq.
    pub fn send_message(&self, sender: &str, recipient: &str, body: &str) -> Result<u64, PrimitiveError> {
        let mut st = self.lock();
        Self::require_active(&st, sender)?;
        if sender == recipient {
            return Err(PrimitiveError::SelfMessage);
        }
        if !self.team.contains(recipient) {
            return Err(PrimitiveError::UnknownRecipient(recipient.to_string()));
        }
        if st.budget.messages_exhausted() {
            return Err(PrimitiveError::MessageBudgetExhausted);
        }
        let seq = self.record(
            &mut st,
            EventKind::Message,
            sender,
            Some(recipient),
            json!({"body": body}),
            Cost::ZERO,
        );
        st.mailboxes
            .entry(recipient.to_string())
            .or_default()
            .push_back(Mail {
                seq,
                from: sender.to_string(),
                body: body.to_string(),
                brief: false,
            });
        self.wake.notify_all();
        Ok(seq)
    }

    pub fn finalize(&self, caller: &str, deliverable: &str) -> Result<String, PrimitiveError> {
        let mut st = self.lock();
        Self::require_active(&st, caller)?;
        if st.end.is_some() {
            return Err(PrimitiveError::AlreadyFinalized);
        }
        st.end = Some(EndReason::Finalized);
        st.finalized_by = Some(caller.to_string());
        st.deliverable = deliverable.to_string();
        self.record(
            &mut st,
            EventKind::Lifecycle,
            caller,
            None,
            json!({"action": "finalize", "deliverable": deliverable}),
            Cost::ZERO,
        );
        self.wake.notify_all();
        Ok("finalized".into())
    }

    pub fn terminate(&self, caller: &str, reason: &str) -> Result<String, PrimitiveError> {
        let mut st = self.lock();
        Self::require_active(&st, caller)?;
        if st.end.is_some() {
            return Err(PrimitiveError::AlreadyFinalized);
        }
        st.end = Some(EndReason::Terminated {
            reason: reason.to_string(),
        });
        st.finalized_by = Some(caller.to_string());
        self.record(
            &mut st,
            EventKind::Lifecycle,
            caller,
            None,
            json!({"action": "terminate", "reason": reason}),
            Cost::ZERO,
        );
        self.wake.notify_all();
        Ok("terminated".into())
    }

    /// Drains `agent`'s mailbox.
    pub fn poll(&self, agent: &str) -> Vec<Mail> {
        self.lock()
            .mailboxes
            .get_mut(agent)
            .map(|q| q.drain(..).collect())
            .unwrap_or_default()
    }

    fn dispatch(&self, agent: &str, call: &ToolCall) -> Result<String, String> {
        let args = &call.arguments;
        let arg = |key: &str| -> Result<&str, PrimitiveError> {
            args.get(key)
                .and_then(Value::as_str)
                .ok_or_else(|| PrimitiveError::BadArguments(format!("missing string argument `{key}`")))
        };
        let opt = |key: &str| args.get(key).and_then(Value::as_str).unwrap_or("");
        let res = match call.name.as_str() {
            "send_message" => arg("to").and_then(|to| {
                let seq = self.send_message(agent, to, arg("body")?)?;
                Ok(format!("delivered to {to} as seq {seq}"))
            }),
            "list_pool" => self.list_pool(agent),
            "start_agent" => arg("name").and_then(|n| self.start_agent(agent, n, opt("brief"))),
            "stop_agent" => arg("name").and_then(|n| self.stop_agent(agent, n)),
            "finalize" => arg("deliverable").and_then(|d| self.finalize(agent, d)),
            "terminate" => self.terminate(agent, opt("reason")),
            "load_skill" => {
                let scaffold = self.team.agent(agent).expect("agent in pool");
                return arg("name")
                    .map_err(|e| e.to_string())
                    .and_then(|n| load_skill(scaffold, n).map_err(|e| e.to_string()));
            }
            other => {
                let scaffold = self.team.agent(agent).expect("agent in pool");
                let allowed = scaffold.config.allowed_tools.iter().any(|t| t == other);
                return match self.cfg.tools.get(other) {
                    Some(tool) if allowed => tool.call(agent, args),
                    _ => Err(format!("unknown tool `{other}`")),
                };
            }
        };
        res.map_err(|e| e.to_string())
    }

    fn step(&self, al: &mut AgentLoop) -> StepStatus {
        let scaffold = self.team.agent(&al.name).expect("agent in pool");
        let (roster, delivered) = {
            let mut st = self.lock();
            if st.halted() || !st.roster.is_active(&al.name) {
                st.busy.remove(&al.name);
                return StepStatus::Halted;
            }
            let mail: Vec<Mail> = st
                .mailboxes
                .get_mut(&al.name)
                .map(|q| q.drain(..).collect())
                .unwrap_or_default();
            if !mail.is_empty() {
                al.idle = false;
                al.phase_steps = 0;
            }
            if !al.idle && al.phase_steps >= self.cfg.settings.step_budget {
                al.idle = true;
                self.record(
                    &mut st,
                    EventKind::Lifecycle,
                    SYSTEM,
                    Some(&al.name),
                    json!({"action": "park", "agent": al.name, "steps": al.phase_steps}),
                    Cost::ZERO,
                );
            }
            if al.idle {
                st.busy.remove(&al.name);
                self.wake.notify_all();
                return StepStatus::Idle;
            }
            st.busy.insert(al.name.clone());
            for m in &mail {
                al.history.push(ChatMessage::user(m.render()));
            }
            let delivered: Vec<u64> = mail.iter().map(|m| m.seq).collect();
            (st.active_in_order(), delivered)
        };

        al.steps += 1;
        al.phase_steps += 1;
        let roster_refs: Vec<&str> = roster.iter().map(String::as_str).collect();
        al.set_system(render_system_prompt(scaffold, &self.team, &roster_refs));
        if let Err(e) = self.trim(al) {
            return self.fail(e);
        }

        let tools = self.cfg.tools.specs_for(&scaffold.config.allowed_tools);
        let tool_names: Vec<&str> = tools.iter().map(|t| t.name.as_str()).collect();
        let mut req = ChatRequest::new(al.name.clone(), scaffold.config.backbone.clone());
        req.step = Some(al.steps);
        req.temperature = scaffold.config.temperature;
        req.max_output_tokens = scaffold.config.max_output_tokens;
        req.messages = al.history.clone();
        {
            let mut st = self.lock();
            self.record(
                &mut st,
                EventKind::ModelCall,
                &al.name,
                None,
                json!({
                    "step": al.steps,
                    "messages": &req.messages,
                    "tools": tool_names,
                    "delivered": delivered,
                }),
                Cost::ZERO,
            );
        }
        req.tools = Some(tools);

        let completion = match self.gateway.complete(&req) {
            Ok(c) => c,
            Err(e) => {
                let mut st = self.lock();
                self.record(
                    &mut st,
                    EventKind::Lifecycle,
                    SYSTEM,
                    Some(&al.name),
                    json!({"action": "model_error", "agent": al.name, "error": e.to_string()}),
                    Cost::ZERO,
                );
                drop(st);
                return self.fail(e.into());
            }
        };
        let resp = completion.response;
        let text = resp.text.clone().unwrap_or_default();
        {
            let mut st = self.lock();
            self.record(
                &mut st,
                EventKind::ModelResult,
                &al.name,
                None,
                json!({
                    "step": al.steps,
                    "text": text,
                    "tool_calls": &resp.tool_calls,
                    "usage": resp.usage,
                    "attempts": completion.attempts,
                }),
                completion.cost,
            );
        }

        if resp.tool_calls.is_empty() {
            al.history.push(ChatMessage::assistant(text));
            al.idle = true;
        } else {
            al.history
                .push(ChatMessage::assistant_calls(text, resp.tool_calls.clone()));
            for call in &resp.tool_calls {
                {
                    let mut st = self.lock();
                    self.record(
                        &mut st,
                        EventKind::ToolCall,
                        &al.name,
                        None,
                        json!({"id": call.id, "name": call.name, "arguments": call.arguments}),
                        Cost::ZERO,
                    );
                }
                let result = self.dispatch(&al.name, call);
                let (ok, content) = match result {
                    Ok(c) => (true, c),
                    Err(e) => (false, format!("error: {e}")),
                };
                {
                    let mut st = self.lock();
                    self.record(
                        &mut st,
                        EventKind::ToolResult,
                        &al.name,
                        None,
                        json!({"id": call.id, "name": call.name, "ok": ok, "content": content}),
                        Cost::ZERO,
                    );
                }
                al.history.push(ChatMessage::tool_result(call.id.clone(), content));
            }
        }

        let mut st = self.lock();
        if al.idle && !st.has_mail(&al.name) {
            st.busy.remove(&al.name);
        }
        self.wake.notify_all();
        StepStatus::Progress
    }

    fn trim(&self, al: &mut AgentLoop) -> Result<(), RuntimeError> {
        al.history = trim_history(&al.history, self.cfg.settings.history_cap)?;
        Ok(())
    }

    fn fail(&self, err: RuntimeError) -> StepStatus {
        let mut st = self.lock();
        if st.failure.is_none() {
            log::error!("episode {} failed: {err}", self.id);
            st.failure = Some(err);
        }
        self.wake.notify_all();
        StepStatus::Halted
    }

    fn run_deterministic(&self) -> BTreeMap<String, AgentLoop> {
        let mut loops: BTreeMap<String, AgentLoop> = BTreeMap::new();
        loop {
            let order = {
                let mut st = self.lock();
                self.tick(&mut st);
                if st.halted() {
                    break;
                }
                st.start_order.clone()
            };
            let mut progressed = false;
            for name in &order {
                let al = loops
                    .entry(name.clone())
                    .or_insert_with(|| AgentLoop::new(name));
                if self.step(al) == StepStatus::Progress {
                    progressed = true;
                }
            }
            if !progressed {
                let mut st = self.lock();
                if !st.halted() && !st.roster.active.iter().any(|a| st.has_mail(a)) {
                    self.mark_stalled(&mut st);
                }
            }
        }
        loops
    }

    fn mark_stalled(&self, st: &mut State) {
        log::info!("episode {}: all active agents idle", self.id);
        st.forced = Some(EndReason::Stalled);
        self.record(
            st,
            EventKind::Lifecycle,
            SYSTEM,
            None,
            json!({"action": "stalled"}),
            Cost::ZERO,
        );
        self.wake.notify_all();
    }

    fn run_concurrent(&self) -> BTreeMap<String, AgentLoop> {
        let poll = self.cfg.settings.poll_interval;
        std::thread::scope(|scope| {
            let mut st = self.lock();
            loop {
                self.tick(&mut st);
                if st.halted() {
                    break;
                }
                let to_spawn: Vec<String> = st
                    .active_in_order()
                    .into_iter()
                    .filter(|n| !st.running.contains(n))
                    .collect();
                for name in &to_spawn {
                    st.running.insert(name.clone());
                    st.busy.insert(name.clone());
                    let al = st
                        .loops
                        .remove(name)
                        .unwrap_or_else(|| AgentLoop::new(name));
                    scope.spawn(move || self.agent_thread(al));
                }
                let stalled = to_spawn.is_empty()
                    && st
                        .roster
                        .active
                        .iter()
                        .all(|a| !st.busy.contains(a) && !st.has_mail(a));
                if stalled {
                    self.mark_stalled(&mut st);
                    break;
                }
                st = self
                    .wake
                    .wait_timeout(st, poll)
                    .unwrap_or_else(|p| p.into_inner())
                    .0;
            }
            self.wake.notify_all();
        });
        std::mem::take(&mut self.lock().loops)
    }

    fn agent_thread(&self, mut al: AgentLoop) {
        let poll = self.cfg.settings.poll_interval;
        loop {
            match self.step(&mut al) {
                StepStatus::Progress => continue,
                StepStatus::Halted => break,
                StepStatus::Idle => {
                    let mut st = self.lock();
                    while !st.halted() && st.roster.is_active(&al.name) && !st.has_mail(&al.name) {
                        st = self
                            .wake
                            .wait_timeout(st, poll)
                            .unwrap_or_else(|p| p.into_inner())
                            .0;
                    }
                }
            }
        }
        let mut st = self.lock();
        st.running.remove(&al.name);
        st.busy.remove(&al.name);
        st.loops.insert(al.name.clone(), al);
        self.wake.notify_all();
    }

    /// One tool-free call per active agent; the entry agent's reply (or the
    /// first active agent's, if the entry agent is not active) becomes the
    /// deliverable.
    fn force_finalize(&self, reason: &EndReason, loops: &mut BTreeMap<String, AgentLoop>) -> String {
        let active = {
            let mut st = self.lock();
            let active = st.active_in_order();
            self.record(
                &mut st,
                EventKind::Lifecycle,
                SYSTEM,
                None,
                json!({"action": "force_finalize", "reason": reason, "active": active}),
                Cost::ZERO,
            );
            active
        };
        let mut outputs: BTreeMap<String, String> = BTreeMap::new();
        for name in &active {
            let scaffold = self.team.agent(name).expect("agent in pool");
            let al = loops.entry(name.clone()).or_insert_with(|| AgentLoop::new(name));
            let mail = self.poll(name);
            for m in &mail {
                al.history.push(ChatMessage::user(m.render()));
            }
            let roster_refs: Vec<&str> = active.iter().map(String::as_str).collect();
            al.set_system(render_system_prompt(scaffold, &self.team, &roster_refs));
            al.history.push(ChatMessage::user(FORCE_FINALIZE_NOTICE));
            if let Err(e) = self.trim(al) {
                log::error!("force-finalize history for {name}: {e}");
                continue;
            }
            al.steps += 1;
            let mut req = ChatRequest::new(name.clone(), scaffold.config.backbone.clone());
            req.step = Some(al.steps);
            req.temperature = scaffold.config.temperature;
            req.max_output_tokens = scaffold.config.max_output_tokens;
            req.messages = al.history.clone();
            req.tools = None;
            req.deadline = Some(self.cfg.settings.force_finalize_timeout);
            {
                let mut st = self.lock();
                self.record(
                    &mut st,
                    EventKind::ModelCall,
                    name,
                    None,
                    json!({
                        "step": al.steps,
                        "messages": &req.messages,
                        "tools": null,
                        "delivered": mail.iter().map(|m| m.seq).collect::<Vec<_>>(),
                        "forced": true,
                    }),
                    Cost::ZERO,
                );
            }
            let mut st;
            match self.gateway.complete(&req) {
                Ok(c) => {
                    let text = c.response.text.clone().unwrap_or_default();
                    st = self.lock();
                    self.record(
                        &mut st,
                        EventKind::ModelResult,
                        name,
                        None,
                        json!({
                            "step": al.steps,
                            "text": text,
                            "tool_calls": [],
                            "usage": c.response.usage,
                            "attempts": c.attempts,
                            "forced": true,
                        }),
                        c.cost,
                    );
                    al.history.push(ChatMessage::assistant(text.clone()));
                    outputs.insert(name.clone(), text);
                }
                Err(e) => {
                    st = self.lock();
                    self.record(
                        &mut st,
                        EventKind::Lifecycle,
                        SYSTEM,
                        Some(name),
                        json!({"action": "force_finalize_failed", "agent": name, "error": e.to_string()}),
                        Cost::ZERO,
                    );
                }
            }
        }
        let selected = if active.contains(&self.team.entry) {
            Some(self.team.entry.clone())
        } else {
            active.first().cloned()
        };
        let deliverable = selected
            .as_ref()
            .and_then(|n| outputs.get(n).cloned())
            .unwrap_or_default();
        let mut st = self.lock();
        self.record(
            &mut st,
            EventKind::Lifecycle,
            SYSTEM,
            selected.as_deref(),
            json!({"action": "force_finalized", "selected": selected, "deliverable": deliverable}),
            Cost::ZERO,
        );
        deliverable
    }

    /// Runs the episode to completion, evaluates the deliverable and freezes
    /// the result.
    pub fn run(self, evaluator: &dyn Evaluator) -> Result<Experience, RuntimeError> {
        let mut loops = match self.cfg.scheduling {
            Scheduling::Deterministic => self.run_deterministic(),
            Scheduling::Concurrent => self.run_concurrent(),
        };
        let (end, deliverable, finalized_by) = {
            let mut st = self.lock();
            if let Some(err) = st.failure.take() {
                return Err(err);
            }
            match st.end.clone() {
                Some(end) => (
                    end,
                    std::mem::take(&mut st.deliverable),
                    st.finalized_by.clone().unwrap_or_else(|| SYSTEM.to_string()),
                ),
                None => {
                    let reason = st.forced.clone().unwrap_or(EndReason::Stalled);
                    drop(st);
                    let d = self.force_finalize(&reason, &mut loops);
                    (reason, d, SYSTEM.to_string())
                }
            }
        };
        let score = match end {
            EndReason::Terminated { .. } => Score::fail(),
            _ => evaluator.evaluate(&self.task, &deliverable)?,
        };
        let outcome = TaskOutcome {
            deliverable,
            score,
            finalized_by,
            end,
        };
        let state = self.state.into_inner().unwrap_or_else(|p| p.into_inner());
        Ok(Experience::freeze(
            self.id,
            self.team.version,
            self.task,
            state.bus.into_events(),
            outcome,
        ))
    }
}
