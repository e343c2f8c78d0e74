use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde_json::{json, Value};

use crate::gateway::ToolSpec;

/// Orchestration primitives every agent can call.
pub const BUILTIN_TOOLS: [&str; 7] = [
    "send_message",
    "list_pool",
    "start_agent",
    "stop_agent",
    "finalize",
    "terminate",
    "load_skill",
];

/// A caller-supplied tool. Side effects are the implementor's business.
pub trait Tool: Send + Sync {
    fn spec(&self) -> ToolSpec;
    /// Runs the tool for `agent`. `Err` text is returned to the model as a
    /// failed tool result.
    fn call(&self, agent: &str, args: &Value) -> Result<String, String>;
}

/// Wraps a closure as a [`Tool`].
pub struct FnTool<F> {
    spec: ToolSpec,
    f: F,
}

impl<F> FnTool<F>
where
    F: Fn(&str, &Value) -> Result<String, String> + Send + Sync,
{
    pub fn new(name: &str, description: &str, parameters: Value, f: F) -> Self {
        Self {
            spec: ToolSpec {
                name: name.to_string(),
                description: description.to_string(),
                parameters,
            },
            f,
        }
    }
}

impl<F> Tool for FnTool<F>
where
    F: Fn(&str, &Value) -> Result<String, String> + Send + Sync,
{
    fn spec(&self) -> ToolSpec {
        self.spec.clone()
    }

    fn call(&self, agent: &str, args: &Value) -> Result<String, String> {
        (self.f)(agent, args)
    }
}

#[derive(Clone, Default)]
pub struct ToolRegistry {
    tools: BTreeMap<String, Arc<dyn Tool>>,
}

impl fmt::Debug for ToolRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.tools.keys()).finish()
    }
}

impl ToolRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a custom tool. Built-in names cannot be shadowed.
    pub fn register(&mut self, tool: Arc<dyn Tool>) -> Result<(), String> {
        let name = tool.spec().name;
        if is_builtin(&name) {
            return Err(format!("`{name}` is a built-in tool"));
        }
        self.tools.insert(name, tool);
        Ok(())
    }

    pub fn with(mut self, tool: Arc<dyn Tool>) -> Self {
        if let Err(e) = self.register(tool) {
            panic!("{e}");
        }
        self
    }

    pub fn get(&self, name: &str) -> Option<&Arc<dyn Tool>> {
        self.tools.get(name)
    }

    pub fn is_registered(&self, name: &str) -> bool {
        is_builtin(name) || self.tools.contains_key(name)
    }

    /// Built-ins followed by custom tools, sorted.
    pub fn names(&self) -> Vec<String> {
        BUILTIN_TOOLS
            .iter()
            .map(|s| s.to_string())
            .chain(self.tools.keys().cloned())
            .collect()
    }

    /// Schemas offered to an agent: every built-in plus the custom tools it
    /// is allowed to use. Rebuilt on every call.
    pub fn specs_for(&self, allowed: &[String]) -> Vec<ToolSpec> {
        let mut specs = builtin_specs();
        for name in allowed {
            if let Some(t) = self.tools.get(name) {
                specs.push(t.spec());
            }
        }
        specs
    }
}

pub fn is_builtin(name: &str) -> bool {
    BUILTIN_TOOLS.contains(&name)
}

fn spec(name: &str, description: &str, props: Value, required: &[&str]) -> ToolSpec {
    ToolSpec {
        name: name.to_string(),
        description: description.to_string(),
        parameters: json!({
            "type": "object",
            "properties": props,
            "required": required,
        }),
    }
}

pub fn builtin_specs() -> Vec<ToolSpec> {
    let s = json!({"type": "string"});
    vec![
        spec(
            "send_message",
            "Send a message to a teammate's mailbox.",
            json!({"to": s, "body": s}),
            &["to", "body"],
        ),
        spec(
            "list_pool",
            "List every pool agent with its role and status.",
            json!({}),
            &[],
        ),
        spec(
            "start_agent",
            "Recruit an inactive pool agent with a brief.",
            json!({"name": s, "brief": s}),
            &["name", "brief"],
        ),
        spec(
            "stop_agent",
            "Release an active agent.",
            json!({"name": s}),
            &["name"],
        ),
        spec(
            "finalize",
            "Submit the final deliverable and end the episode.",
            json!({"deliverable": s}),
            &["deliverable"],
        ),
        spec(
            "terminate",
            "Abort the episode without a deliverable.",
            json!({"reason": s}),
            &[],
        ),
        spec(
            "load_skill",
            "Read the full body of one of your skills.",
            json!({"name": s}),
            &["name"],
        ),
    ]
}
