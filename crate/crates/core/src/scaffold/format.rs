//! Text formats of the scaffold files.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{is_safe_name, BehavioralPatch, RelationText, Skill, MAX_SKILL_DESCRIPTION};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct FormatError {
    pub line: usize,
    pub message: String,
}

fn ferr(line: usize, message: impl Into<String>) -> FormatError {
    FormatError {
        line,
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct TeamManifest {
    pub version: u64,
    pub entry: String,
    pub pool: Vec<String>,
    #[serde(default)]
    pub organization: String,
}

/// Splits `---\nkey: value\n...\n---\n<body>` into key/value pairs and body.
/// Returns the line number on which the body starts.
fn split_front_matter(text: &str) -> Result<(Vec<(String, String)>, &str, usize), FormatError> {
    let rest = text
        .strip_prefix("---\n")
        .ok_or_else(|| ferr(1, "expected `---` front matter opener"))?;
    let mut pairs = Vec::new();
    let mut offset = 0;
    for (i, line) in rest.split_inclusive('\n').enumerate() {
        let line_no = i + 2;
        offset += line.len();
        let content = line.strip_suffix('\n').unwrap_or(line);
        if content == "---" {
            if !line.ends_with('\n') {
                return Ok((pairs, "", line_no + 1));
            }
            return Ok((pairs, &rest[offset..], line_no + 1));
        }
        let (k, v) = content
            .split_once(": ")
            .or_else(|| content.strip_suffix(':').map(|k| (k, "")))
            .ok_or_else(|| ferr(line_no, format!("expected `key: value`, found `{content}`")))?;
        if k.is_empty() || k.contains(char::is_whitespace) {
            return Err(ferr(line_no, format!("invalid key `{k}`")));
        }
        pairs.push((k.to_string(), v.to_string()));
    }
    Err(ferr(
        text.lines().count().max(1),
        "unterminated front matter (missing closing `---`)",
    ))
}

pub fn parse_skill_file(text: &str) -> Result<Skill, FormatError> {
    let (pairs, body, body_line) = split_front_matter(text)?;
    let mut name = None;
    let mut description = None;
    let mut metadata = Vec::new();
    for (i, (k, v)) in pairs.into_iter().enumerate() {
        let line = i + 2;
        match k.as_str() {
            "name" if name.is_none() => name = Some((v, line)),
            "description" if description.is_none() => description = Some((v, line)),
            "name" | "description" => return Err(ferr(line, format!("duplicate key `{k}`"))),
            _ => metadata.push((k, v)),
        }
    }
    let (name, name_line) = name.ok_or_else(|| ferr(1, "missing `name`"))?;
    if !is_safe_name(&name) {
        return Err(ferr(name_line, format!("skill name `{name}` is not filesystem-safe")));
    }
    let (description, desc_line) = description.ok_or_else(|| ferr(1, "missing `description`"))?;
    if description.trim().is_empty() {
        return Err(ferr(desc_line, "description is empty"));
    }
    if description.chars().count() > MAX_SKILL_DESCRIPTION {
        return Err(ferr(
            desc_line,
            format!("description longer than {MAX_SKILL_DESCRIPTION} characters"),
        ));
    }
    if body.trim().is_empty() {
        return Err(ferr(body_line, "skill body is empty"));
    }
    Ok(Skill {
        name,
        description,
        body: body.to_string(),
        metadata,
    })
}

pub fn render_skill_file(skill: &Skill) -> String {
    let mut out = format!("---\nname: {}\ndescription: {}\n", skill.name, skill.description);
    for (k, v) in &skill.metadata {
        out.push_str(&format!("{k}: {v}\n"));
    }
    out.push_str("---\n");
    out.push_str(&skill.body);
    out
}

pub(crate) fn parse_relation_file(subject: &str, text: &str) -> Result<RelationText, FormatError> {
    let (pairs, body, body_line) = split_front_matter(text)?;
    let mut last_updated = None;
    for (i, (k, v)) in pairs.into_iter().enumerate() {
        match k.as_str() {
            "last_updated" => last_updated = Some(v),
            other => return Err(ferr(i + 2, format!("unknown key `{other}`"))),
        }
    }
    let text = body.strip_suffix('\n').unwrap_or(body);
    if text.trim().is_empty() {
        return Err(ferr(body_line, "empty text"));
    }
    Ok(RelationText {
        subject: subject.to_string(),
        text: text.to_string(),
        last_updated: last_updated.ok_or_else(|| ferr(1, "missing `last_updated`"))?,
    })
}

pub(crate) fn render_relation_file(r: &RelationText) -> String {
    format!("---\nlast_updated: {}\n---\n{}\n", r.last_updated, r.text)
}

const PATCH_MARKER: &str = "<!-- patch ";

pub(crate) fn patch_text_is_valid(text: &str) -> bool {
    !text.trim().is_empty()
        && text == text.trim()
        && !text.lines().any(|l| l.starts_with(PATCH_MARKER))
}

pub(crate) fn parse_patches(text: &str) -> Result<Vec<BehavioralPatch>, FormatError> {
    let mut patches = Vec::new();
    let mut current: Option<(BehavioralPatch, Vec<&str>, usize)> = None;

    fn close(
        patches: &mut Vec<BehavioralPatch>,
        current: Option<(BehavioralPatch, Vec<&str>, usize)>,
    ) -> Result<(), FormatError> {
        if let Some((mut p, lines, line)) = current {
            let joined = lines.join("\n");
            p.text = joined.trim_end_matches('\n').to_string();
            if p.text.trim().is_empty() {
                return Err(ferr(line, format!("patch `{}` has no text", p.id)));
            }
            patches.push(p);
        }
        Ok(())
    }

    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if let Some(rest) = line.strip_prefix(PATCH_MARKER) {
            close(&mut patches, current.take())?;
            let inner = rest
                .strip_suffix(" -->")
                .ok_or_else(|| ferr(line_no, "patch header must end with ` -->`"))?;
            let mut id = None;
            let mut provenance = None;
            for field in inner.split_whitespace() {
                match field.split_once('=') {
                    Some(("id", v)) if !v.is_empty() => id = Some(v.to_string()),
                    Some(("provenance", v)) if !v.is_empty() => provenance = Some(v.to_string()),
                    _ => return Err(ferr(line_no, format!("bad patch header field `{field}`"))),
                }
            }
            let patch = BehavioralPatch {
                id: id.ok_or_else(|| ferr(line_no, "patch header without id"))?,
                text: String::new(),
                provenance: provenance
                    .ok_or_else(|| ferr(line_no, "patch header without provenance"))?,
            };
            current = Some((patch, Vec::new(), line_no));
        } else if let Some((_, lines, _)) = current.as_mut() {
            lines.push(line);
        } else if !line.trim().is_empty() {
            return Err(ferr(line_no, "text before the first patch header"));
        }
    }
    close(&mut patches, current)?;
    Ok(patches)
}

pub(crate) fn render_patches(patches: &[BehavioralPatch]) -> String {
    patches
        .iter()
        .map(|p| {
            format!(
                "{PATCH_MARKER}id={} provenance={} -->\n{}\n",
                p.id, p.provenance, p.text
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skill_round_trip_keeps_body_bytes() {
        let text = "---\nname: csv-audit\ndescription: Audit CSV files\nlicense: MIT\n---\n# Steps\n---\nname: fake\n";
        let skill = parse_skill_file(text).unwrap();
        assert_eq!(skill.body, "# Steps\n---\nname: fake\n");
        assert_eq!(skill.metadata, vec![("license".into(), "MIT".into())]);
        assert_eq!(render_skill_file(&skill), text);
    }

    #[test]
    fn skill_errors_point_at_lines() {
        let e = parse_skill_file("---\nname: a\ndescription x\n---\nbody").unwrap_err();
        assert_eq!(e.line, 3);
        let long = "d".repeat(201);
        let e = parse_skill_file(&format!("---\nname: a\ndescription: {long}\n---\nbody")).unwrap_err();
        assert_eq!(e.line, 3);
        let e = parse_skill_file("---\nname: a\ndescription: x\n---\n  \n").unwrap_err();
        assert_eq!(e.line, 5);
        assert!(parse_skill_file("name: a\n").is_err());
        assert!(parse_skill_file("---\nname: a\ndescription: b\n").is_err());
    }

    #[test]
    fn patches_round_trip() {
        let patches = vec![
            BehavioralPatch {
                id: "ep-1.1".into(),
                text: "Verify the diff before submitting.".into(),
                provenance: "ep-1".into(),
            },
            BehavioralPatch {
                id: "ep-2.1".into(),
                text: "Ask the reviewer early.\n\nKeep messages short.".into(),
                provenance: "ep-2".into(),
            },
        ];
        let text = render_patches(&patches);
        assert_eq!(parse_patches(&text).unwrap(), patches);
        assert_eq!(render_patches(&parse_patches(&text).unwrap()), text);
        assert!(parse_patches("").unwrap().is_empty());
    }

    #[test]
    fn malformed_patch_header() {
        let e = parse_patches("<!-- patch id=a -->\ntext\n").unwrap_err();
        assert_eq!(e.line, 1);
        let e = parse_patches("stray\n").unwrap_err();
        assert_eq!(e.line, 1);
    }

    #[test]
    fn relation_round_trip() {
        let r = RelationText {
            subject: "reviewer".into(),
            text: "Strict about tests.".into(),
            last_updated: "ep-3".into(),
        };
        let text = render_relation_file(&r);
        assert_eq!(parse_relation_file("reviewer", &text).unwrap(), r);
    }
}
