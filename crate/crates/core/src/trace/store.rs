use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::jsonl::{from_jsonl, to_jsonl};
use super::{Experience, TraceError};

/// Directory of frozen experiences, one `<episode id>.jsonl` file each.
///
/// Storing the same experience twice is a no-op; storing different content
/// under an existing id is refused and leaves the file untouched.
#[derive(Debug, Clone)]
pub struct ExperienceStore {
    dir: PathBuf,
}

impl ExperienceStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, TraceError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_of(&self, episode_id: &str) -> PathBuf {
        self.dir.join(format!("{episode_id}.jsonl"))
    }

    pub fn put(&self, e: &Experience) -> Result<PathBuf, TraceError> {
        let path = self.path_of(e.episode_id());
        let bytes = to_jsonl(e);
        match fs::read(&path) {
            Ok(existing) if existing == bytes.as_bytes() => return Ok(path),
            Ok(_) => return Err(TraceError::Immutable(e.episode_id().to_string())),
            Err(err) if err.kind() == std::io::ErrorKind::NotFound => {}
            Err(err) => return Err(err.into()),
        }
        let tmp = self.dir.join(format!(".{}.tmp", e.episode_id()));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(bytes.as_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &path)?;
        Ok(path)
    }

    pub fn get(&self, episode_id: &str) -> Result<Experience, TraceError> {
        let path = self.path_of(episode_id);
        let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => TraceError::NotFound(episode_id.to_string()),
            _ => e.into(),
        })?;
        Ok(from_jsonl(&text)?)
    }

    /// Stored episode ids, sorted.
    pub fn ids(&self) -> Result<Vec<String>, TraceError> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if let Some(id) = name.strip_suffix(".jsonl") {
                if !id.starts_with('.') {
                    ids.push(id.to_string());
                }
            }
        }
        ids.sort();
        Ok(ids)
    }
}
