use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use super::apply::{apply_update, ApplyLog};
use super::format::{
    parse_patches, parse_relation_file, parse_skill_file, render_patches, render_relation_file,
    render_skill_file, TeamManifest,
};
use super::{is_safe_name, AgentConfig, AgentScaffold, ScaffoldError, TeamScaffold};
use crate::config::DEFAULT_MAX_PATCHES;
use crate::evolution::EvolutionUpdate;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreOptions {
    /// Patches kept per agent; the oldest are evicted beyond this.
    pub max_patches: usize,
}

impl Default for StoreOptions {
    fn default() -> Self {
        Self {
            max_patches: DEFAULT_MAX_PATCHES,
        }
    }
}

/// Crash injection for the write path. Each file write and directory step is
/// a numbered point; `crash_at(n)` aborts at the n-th point (0-based) and
/// leaves whatever was written so far on disk.
#[derive(Debug, Default, Clone)]
pub struct FaultPlan {
    crash_at: Option<usize>,
    seen: usize,
}

impl FaultPlan {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn crash_at(point: usize) -> Self {
        Self {
            crash_at: Some(point),
            seen: 0,
        }
    }

    /// Fault points passed so far.
    pub fn points_seen(&self) -> usize {
        self.seen
    }

    fn point(&mut self, label: &str) -> Result<(), ScaffoldError> {
        let n = self.seen;
        self.seen += 1;
        if self.crash_at == Some(n) {
            return Err(ScaffoldError::PersistFailure(format!(
                "injected crash at point {n} ({label})"
            )));
        }
        Ok(())
    }
}

fn io_err(path: &Path, e: io::Error) -> ScaffoldError {
    ScaffoldError::PersistFailure(format!("{}: {e}", path.display()))
}

fn read_optional(path: &Path) -> Result<Option<String>, ScaffoldError> {
    match fs::read_to_string(path) {
        Ok(s) => Ok(Some(s)),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(io_err(path, e)),
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<fs::DirEntry>, ScaffoldError> {
    let mut entries = match fs::read_dir(dir) {
        Ok(rd) => rd
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| io_err(dir, e))?,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(dir, e)),
    };
    entries.sort_by_key(|e| e.file_name());
    Ok(entries)
}

fn sibling(root: &Path, tag: &str) -> PathBuf {
    let name = root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "team".into());
    root.with_file_name(format!(".{name}.{tag}"))
}

/// Finishes a two-step swap interrupted between its renames.
fn recover_interrupted_swap(root: &Path) -> Result<(), ScaffoldError> {
    let backup = sibling(root, "bak");
    if !root.exists() && backup.is_dir() {
        log::warn!("restoring {} from interrupted commit", root.display());
        fs::rename(&backup, root).map_err(|e| io_err(root, e))?;
    }
    Ok(())
}

pub fn load_team(root: &Path) -> Result<TeamScaffold, ScaffoldError> {
    recover_interrupted_swap(root)?;
    let manifest_path = root.join("team.yaml");
    let manifest_text = read_optional(&manifest_path)?
        .ok_or_else(|| ScaffoldError::MissingManifest(manifest_path.display().to_string()))?;
    let constitution_path = root.join("constitution.md");
    let constitution = read_optional(&constitution_path)?
        .ok_or_else(|| ScaffoldError::MissingManifest(constitution_path.display().to_string()))?;
    let manifest: TeamManifest = serde_yaml::from_str(&manifest_text)
        .map_err(|e| ScaffoldError::MalformedManifest(format!("team.yaml: {e}")))?;

    let mut seen = BTreeSet::new();
    let mut pool = Vec::with_capacity(manifest.pool.len());
    for name in &manifest.pool {
        if !seen.insert(name.as_str()) {
            return Err(ScaffoldError::DuplicateAgentName(name.clone()));
        }
        if !is_safe_name(name) {
            return Err(ScaffoldError::agent(name, "name is not filesystem-safe"));
        }
        pool.push(load_agent(&root.join("agents").join(name), name, &manifest.pool)?);
    }
    let team = TeamScaffold {
        version: manifest.version,
        entry: manifest.entry,
        constitution,
        organization: manifest.organization,
        pool,
    };
    team.check()?;
    Ok(team)
}

fn load_agent(dir: &Path, name: &str, pool: &[String]) -> Result<AgentScaffold, ScaffoldError> {
    let bad = |reason: String| ScaffoldError::agent(name, reason);
    if !dir.is_dir() {
        return Err(bad("directory is missing".into()));
    }
    let role_prompt = read_optional(&dir.join("prompt.md"))?
        .ok_or_else(|| bad("missing prompt.md".into()))?;
    let config_text = read_optional(&dir.join("config.yaml"))?
        .ok_or_else(|| bad("missing config.yaml".into()))?;
    let config: AgentConfig =
        serde_yaml::from_str(&config_text).map_err(|e| bad(format!("config.yaml: {e}")))?;

    let patches = match read_optional(&dir.join("evolution/patches.md"))? {
        Some(text) => {
            parse_patches(&text).map_err(|e| bad(format!("evolution/patches.md:{e}")))?
        }
        None => Vec::new(),
    };

    let relations = |sub: &str| -> Result<BTreeMap<_, _>, ScaffoldError> {
        let mut out = BTreeMap::new();
        for entry in sorted_entries(&dir.join("evolution").join(sub))? {
            let file_name = entry.file_name().to_string_lossy().into_owned();
            let Some(subject) = file_name.strip_suffix(".md") else {
                continue;
            };
            if !entry.path().is_file() {
                continue;
            }
            if subject == name || !pool.iter().any(|p| p == subject) {
                return Err(bad(format!(
                    "evolution/{sub}/{file_name}: subject is not a teammate"
                )));
            }
            let text = fs::read_to_string(entry.path()).map_err(|e| io_err(&entry.path(), e))?;
            let rel = parse_relation_file(subject, &text)
                .map_err(|e| bad(format!("evolution/{sub}/{file_name}:{e}")))?;
            out.insert(subject.to_string(), rel);
        }
        Ok(out)
    };
    let profiles = relations("profiles")?;
    let notes = relations("notes")?;

    let mut skills = Vec::new();
    for entry in sorted_entries(&dir.join("skills"))? {
        let skill_file = entry.path().join("SKILL.md");
        let Some(text) = read_optional(&skill_file)? else {
            continue;
        };
        let dir_name = entry.file_name().to_string_lossy().into_owned();
        let skill = parse_skill_file(&text)
            .map_err(|e| bad(format!("skills/{dir_name}/SKILL.md:{e}")))?;
        if skill.name != dir_name {
            return Err(bad(format!(
                "skills/{dir_name}/SKILL.md: name `{}` does not match its directory",
                skill.name
            )));
        }
        skills.push(skill);
    }

    Ok(AgentScaffold {
        name: name.to_string(),
        role_prompt,
        patches,
        skills,
        profiles,
        notes,
        config,
    })
}

/// Paths inside an agent directory that the scaffold model owns.
fn is_managed_agent_file(rel: &[String]) -> bool {
    let parts: Vec<&str> = rel.iter().map(String::as_str).collect();
    match parts.as_slice() {
        ["prompt.md"] | ["config.yaml"] | ["evolution", "patches.md"] => true,
        ["evolution", "profiles" | "notes", f] => f.ends_with(".md"),
        ["skills", _, "SKILL.md"] => true,
        _ => false,
    }
}

fn walk(dir: &Path, prefix: &mut Vec<String>, out: &mut Vec<Vec<String>>) -> Result<(), ScaffoldError> {
    for entry in sorted_entries(dir)? {
        let name = entry.file_name().to_string_lossy().into_owned();
        prefix.push(name);
        let ty = entry.file_type().map_err(|e| io_err(&entry.path(), e))?;
        if ty.is_dir() {
            walk(&entry.path(), prefix, out)?;
        } else {
            out.push(prefix.clone());
        }
        prefix.pop();
    }
    Ok(())
}

struct Writer<'a> {
    base: PathBuf,
    faults: &'a mut FaultPlan,
}

impl Writer<'_> {
    fn write(&mut self, rel: &Path, bytes: &[u8]) -> Result<(), ScaffoldError> {
        let path = self.base.join(rel);
        let label = rel.display().to_string();
        self.faults.point(&label)?;
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        let mut f = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
        let half = bytes.len() / 2;
        f.write_all(&bytes[..half]).map_err(|e| io_err(&path, e))?;
        self.faults.point(&format!("{label} (partial)"))?;
        f.write_all(&bytes[half..]).map_err(|e| io_err(&path, e))?;
        f.sync_all().map_err(|e| io_err(&path, e))?;
        Ok(())
    }
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

pub fn save_team(team: &TeamScaffold, root: &Path) -> Result<(), ScaffoldError> {
    save_team_with(team, root, &mut FaultPlan::none())
}

/// Writes the whole tree into a temporary sibling, then swaps it into place.
///
/// Files under `root` that the scaffold does not own are carried over
/// unchanged. Directories of agents that left the pool move to
/// `retired/<name>-v<old version>/`.
pub fn save_team_with(
    team: &TeamScaffold,
    root: &Path,
    faults: &mut FaultPlan,
) -> Result<(), ScaffoldError> {
    team.check()?;
    recover_interrupted_swap(root)?;
    clean_stale_siblings(root)?;

    let tmp = sibling(
        root,
        &format!(
            "tmp-{}-{}",
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ),
    );
    faults.point("create temp dir")?;
    fs::create_dir_all(&tmp).map_err(|e| io_err(&tmp, e))?;
    let mut w = Writer {
        base: tmp.clone(),
        faults,
    };

    let old: Option<TeamManifest> = read_optional(&root.join("team.yaml"))?
        .and_then(|t| serde_yaml::from_str(&t).ok());
    if let Some(old) = &old {
        let new_names: BTreeSet<&str> = team.names().collect();
        let mut files = Vec::new();
        walk(root, &mut Vec::new(), &mut files)?;
        for rel in files {
            let src = rel.iter().fold(root.to_path_buf(), |p, s| p.join(s));
            let dest: Option<PathBuf> = match rel.first().map(String::as_str) {
                Some("team.yaml" | "constitution.md") if rel.len() == 1 => None,
                Some("agents") if rel.len() > 2 && old.pool.contains(&rel[1]) => {
                    let agent = &rel[1];
                    if new_names.contains(agent.as_str()) {
                        (!is_managed_agent_file(&rel[2..])).then(|| rel.iter().collect())
                    } else {
                        let mut p = PathBuf::from("retired");
                        p.push(format!("{agent}-v{}", old.version));
                        p.extend(&rel[2..]);
                        Some(p)
                    }
                }
                _ => Some(rel.iter().collect()),
            };
            if let Some(dest) = dest {
                let bytes = fs::read(&src).map_err(|e| io_err(&src, e))?;
                w.write(&dest, &bytes)?;
            }
        }
    }

    let manifest = TeamManifest {
        version: team.version,
        entry: team.entry.clone(),
        pool: team.names().map(str::to_string).collect(),
        organization: team.organization.clone(),
    };
    w.write(Path::new("team.yaml"), to_yaml(&manifest)?.as_bytes())?;
    w.write(Path::new("constitution.md"), team.constitution.as_bytes())?;
    for agent in &team.pool {
        let dir = PathBuf::from("agents").join(&agent.name);
        w.write(&dir.join("prompt.md"), agent.role_prompt.as_bytes())?;
        w.write(&dir.join("config.yaml"), to_yaml(&agent.config)?.as_bytes())?;
        w.write(
            &dir.join("evolution/patches.md"),
            render_patches(&agent.patches).as_bytes(),
        )?;
        for (sub, map) in [("profiles", &agent.profiles), ("notes", &agent.notes)] {
            for rel in map.values() {
                w.write(
                    &dir.join("evolution").join(sub).join(format!("{}.md", rel.subject)),
                    render_relation_file(rel).as_bytes(),
                )?;
            }
        }
        for skill in &agent.skills {
            w.write(
                &dir.join("skills").join(&skill.name).join("SKILL.md"),
                render_skill_file(skill).as_bytes(),
            )?;
        }
    }

    w.faults.point("swap")?;
    if root.exists() {
        swap_dirs(&tmp, root)?;
        w.faults.point("cleanup")?;
        fs::remove_dir_all(&tmp).map_err(|e| io_err(&tmp, e))?;
    } else {
        fs::rename(&tmp, root).map_err(|e| io_err(root, e))?;
    }
    Ok(())
}

fn to_yaml<T: serde::Serialize>(value: &T) -> Result<String, ScaffoldError> {
    serde_yaml::to_string(value).map_err(|e| ScaffoldError::PersistFailure(e.to_string()))
}

fn clean_stale_siblings(root: &Path) -> Result<(), ScaffoldError> {
    let Some(parent) = root.parent() else {
        return Ok(());
    };
    let Some(name) = root.file_name().map(|n| n.to_string_lossy().into_owned()) else {
        return Ok(());
    };
    let prefix = format!(".{name}.tmp-");
    for entry in sorted_entries(parent)? {
        if entry.file_name().to_string_lossy().starts_with(&prefix) {
            fs::remove_dir_all(entry.path()).map_err(|e| io_err(&entry.path(), e))?;
        }
    }
    Ok(())
}

/// Atomically exchanges `tmp` and `root`; afterwards `tmp` holds the old tree.
fn swap_dirs(tmp: &Path, root: &Path) -> Result<(), ScaffoldError> {
    #[cfg(target_os = "linux")]
    {
        use std::ffi::CString;
        use std::os::unix::ffi::OsStrExt;
        let a = CString::new(tmp.as_os_str().as_bytes())
            .map_err(|e| ScaffoldError::PersistFailure(e.to_string()))?;
        let b = CString::new(root.as_os_str().as_bytes())
            .map_err(|e| ScaffoldError::PersistFailure(e.to_string()))?;
        // SAFETY: both pointers are valid NUL-terminated paths for the duration of the call.
        let rc = unsafe {
            libc::renameat2(
                libc::AT_FDCWD,
                a.as_ptr(),
                libc::AT_FDCWD,
                b.as_ptr(),
                libc::RENAME_EXCHANGE,
            )
        };
        if rc == 0 {
            return Ok(());
        }
        let err = io::Error::last_os_error();
        if !matches!(err.raw_os_error(), Some(libc::EINVAL) | Some(libc::ENOSYS)) {
            return Err(io_err(root, err));
        }
    }
    // Two-step fallback; `recover_interrupted_swap` repairs a crash in between.
    let backup = sibling(root, "bak");
    fs::rename(root, &backup).map_err(|e| io_err(root, e))?;
    fs::rename(tmp, root).map_err(|e| io_err(root, e))?;
    fs::rename(&backup, tmp).map_err(|e| io_err(tmp, e))?;
    Ok(())
}

/// Serialized access to a team directory.
///
/// Readers take cheap snapshots; commits are exclusive and atomic on disk.
pub struct ScaffoldStore {
    root: PathBuf,
    opts: StoreOptions,
    current: RwLock<Arc<TeamScaffold>>,
    commit_lock: Mutex<()>,
}

impl ScaffoldStore {
    pub fn open(root: impl Into<PathBuf>, opts: StoreOptions) -> Result<Self, ScaffoldError> {
        let root = root.into();
        let team = load_team(&root)?;
        Ok(Self {
            root,
            opts,
            current: RwLock::new(Arc::new(team)),
            commit_lock: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn options(&self) -> StoreOptions {
        self.opts
    }

    /// The version episodes should run against.
    pub fn snapshot(&self) -> Arc<TeamScaffold> {
        self.current.read().unwrap().clone()
    }

    pub fn commit(
        &self,
        update: &EvolutionUpdate,
    ) -> Result<(Arc<TeamScaffold>, ApplyLog), ScaffoldError> {
        self.commit_with(update, &mut FaultPlan::none())
    }

    pub fn commit_with(
        &self,
        update: &EvolutionUpdate,
        faults: &mut FaultPlan,
    ) -> Result<(Arc<TeamScaffold>, ApplyLog), ScaffoldError> {
        let _guard = self.commit_lock.lock().unwrap();
        let base = self.snapshot();
        let (next, log) = apply_update(&base, update, &self.opts)?;
        save_team_with(&next, &self.root, faults)?;
        let next = Arc::new(next);
        *self.current.write().unwrap() = next.clone();
        Ok((next, log))
    }
}
