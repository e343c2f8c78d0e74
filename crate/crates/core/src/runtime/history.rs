use std::collections::HashMap;

use thiserror::Error;

use crate::gateway::{ChatMessage, Role};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HistoryError {
    #[error("malformed history: tool result at position {position} has no preceding call `{call_id}`")]
    OrphanToolResult { position: usize, call_id: String },
    #[error("malformed history: tool message at position {0} has no call id")]
    MissingCallId(usize),
}

/// Drops the oldest entries until at most `cap` remain.
///
/// A leading system message is always kept. The retained tail is the
/// shortest-dropping suffix in which every tool result still has the
/// assistant message that issued its call, so call/result pairs are kept or
/// dropped together.
pub fn trim_history(messages: &[ChatMessage], cap: usize) -> Result<Vec<ChatMessage>, HistoryError> {
    let has_system = messages.first().is_some_and(|m| m.role == Role::System);
    let body_start = usize::from(has_system);

    // Position of the assistant message that issued each call id.
    let mut issued_at: HashMap<&str, usize> = HashMap::new();
    // For each position, the earliest call position any result at or after it
    // depends on.
    let mut needs = vec![usize::MAX; messages.len()];
    for (i, m) in messages.iter().enumerate().skip(body_start) {
        for call in &m.tool_calls {
            issued_at.insert(call.id.as_str(), i);
        }
        if m.role == Role::Tool {
            let id = m.tool_call_id.as_deref().ok_or(HistoryError::MissingCallId(i))?;
            let at = *issued_at.get(id).ok_or_else(|| HistoryError::OrphanToolResult {
                position: i,
                call_id: id.to_string(),
            })?;
            needs[i] = at;
        }
    }

    let body_cap = cap.saturating_sub(body_start);
    let body_len = messages.len() - body_start;
    if body_len <= body_cap {
        return Ok(messages.to_vec());
    }

    // suffix_min[i] = min over positions >= i of needs; a cut at k is valid
    // when no retained result depends on a dropped call.
    let mut suffix_min = vec![usize::MAX; messages.len() + 1];
    for i in (body_start..messages.len()).rev() {
        suffix_min[i] = needs[i].min(suffix_min[i + 1]);
    }
    let mut cut = messages.len() - body_cap;
    while cut < messages.len() && suffix_min[cut] < cut {
        cut += 1;
    }

    let mut out = Vec::with_capacity(body_cap + body_start);
    if has_system {
        out.push(messages[0].clone());
    }
    out.extend_from_slice(&messages[cut..]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ToolCall;
    use proptest::prelude::*;
    use serde_json::json;

    fn call(id: &str) -> ChatMessage {
        ChatMessage::assistant_calls(
            "",
            vec![ToolCall {
                id: id.into(),
                name: "t".into(),
                arguments: json!({}),
            }],
        )
    }

    #[test]
    fn short_history_unchanged() {
        let h: Vec<_> = (0..10).map(|i| ChatMessage::user(format!("{i}"))).collect();
        assert_eq!(trim_history(&h, 150).unwrap(), h);
    }

    #[test]
    fn alternating_keeps_suffix_of_cap() {
        let h: Vec<_> = (0..200)
            .map(|i| {
                if i % 2 == 0 {
                    ChatMessage::user(format!("{i}"))
                } else {
                    ChatMessage::assistant(format!("{i}"))
                }
            })
            .collect();
        let out = trim_history(&h, 150).unwrap();
        assert_eq!(out, h[50..].to_vec());
    }

    #[test]
    fn pair_straddling_the_cut_is_dropped_together() {
        let h = vec![
            ChatMessage::system("s"),
            ChatMessage::user("u"),
            call("c1"),
            ChatMessage::tool_result("c1", "r1"),
            ChatMessage::assistant("done"),
        ];
        let out = trim_history(&h, 3).unwrap();
        assert_eq!(out, vec![h[0].clone(), h[4].clone()]);
    }

    #[test]
    fn orphan_result_is_malformed() {
        let h = vec![ChatMessage::user("u"), ChatMessage::tool_result("x", "r")];
        assert!(matches!(
            trim_history(&h, 150),
            Err(HistoryError::OrphanToolResult { position: 1, .. })
        ));
    }

    proptest! {
        #[test]
        fn random_histories_keep_invariants(ops in proptest::collection::vec(0u8..4, 1..300), cap in 1usize..60) {
            let mut h = vec![ChatMessage::system("sys")];
            let mut open: Vec<String> = Vec::new();
            for (i, op) in ops.iter().enumerate() {
                match op {
                    0 => h.push(ChatMessage::user(format!("u{i}"))),
                    1 => {
                        let id = format!("c{i}");
                        h.push(call(&id));
                        open.push(id);
                    }
                    2 if !open.is_empty() => {
                        let id = open.remove(0);
                        h.push(ChatMessage::tool_result(id, "r"));
                    }
                    _ => h.push(ChatMessage::assistant(format!("a{i}"))),
                }
            }
            let out = trim_history(&h, cap).unwrap();
            prop_assert!(out.len() <= cap.max(1));
            prop_assert_eq!(&out[0], &h[0]);
            let tail = &out[1..];
            prop_assert_eq!(tail, &h[h.len() - tail.len()..]);
            prop_assert!(trim_history(&out, cap).is_ok());
        }
    }
}
