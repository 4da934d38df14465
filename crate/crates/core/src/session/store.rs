//! On-disk layout, one directory per session:
//!
//! ```text
//! <root>/<session-id>/initial.json   snapshot, written once (atomically)
//! <root>/<session-id>/events.jsonl   one LogEntry JSON object per line
//! <root>/<session-id>/model.ref      current model snapshot reference
//! ```

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use super::{InitialSnapshot, LogEntry, Session};
use crate::error::{Error, Result};

const INITIAL: &str = "initial.json";
const EVENTS: &str = "events.jsonl";
const MODEL_REF: &str = "model.ref";

/// Append handle on a session's event log.
#[derive(Debug)]
pub struct Journal {
    path: PathBuf,
    file: File,
}

impl Clone for Journal {
    fn clone(&self) -> Self {
        Journal::open(&self.path).expect("journal file reopens")
    }
}

impl Journal {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self { path, file })
    }

    /// Writes one line and syncs it to disk.
    pub fn append(&mut self, entry: &LogEntry) -> Result<()> {
        let mut line = serde_json::to_vec(entry)?;
        line.push(b'\n');
        self.file.write_all(&line).map_err(|e| Error::io(&self.path, e))?;
        self.file.sync_data().map_err(|e| Error::io(&self.path, e))
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct SessionStore {
    root: PathBuf,
}

impl SessionStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn session_dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    /// Persists a fresh session's snapshot (and any existing log) and
    /// attaches a journal so later batches are written ahead of applying.
    pub fn persist(&self, session: &mut Session) -> Result<()> {
        let dir = self.session_dir(session.id());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let events = dir.join(EVENTS);
        let mut text = Vec::new();
        for e in session.log() {
            text.extend(serde_json::to_vec(e)?);
            text.push(b'\n');
        }
        write_atomic(&events, &text)?;
        self.write_model_ref(session.id(), session.state().model_ref.as_deref())?;
        // snapshot last: its presence marks the session as complete
        write_atomic(&dir.join(INITIAL), &serde_json::to_vec(session.initial())?)?;
        session.attach_journal(Journal::open(events)?);
        Ok(())
    }

    pub fn write_model_ref(&self, id: &str, model_ref: Option<&str>) -> Result<()> {
        let path = self.session_dir(id).join(MODEL_REF);
        write_atomic(&path, model_ref.unwrap_or_default().as_bytes())
    }

    pub fn read_model_ref(&self, id: &str) -> Result<Option<String>> {
        let path = self.session_dir(id).join(MODEL_REF);
        match std::fs::read_to_string(&path) {
            Ok(s) if s.trim().is_empty() => Ok(None),
            Ok(s) => Ok(Some(s.trim().to_string())),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    /// Loads one session by replaying its log. A torn final line (crash
    /// mid-append) is ignored; corruption anywhere else is an error.
    pub fn load(&self, id: &str) -> Result<Session> {
        let dir = self.session_dir(id);
        let init_path = dir.join(INITIAL);
        let initial: InitialSnapshot = serde_json::from_slice(
            &std::fs::read(&init_path).map_err(|e| Error::io(&init_path, e))?,
        )?;
        let events_path = dir.join(EVENTS);
        let mut log = Vec::new();
        if events_path.exists() {
            let f = File::open(&events_path).map_err(|e| Error::io(&events_path, e))?;
            let lines: Vec<String> = BufReader::new(f)
                .lines()
                .collect::<std::io::Result<_>>()
                .map_err(|e| Error::io(&events_path, e))?;
            let last = lines.len().saturating_sub(1);
            for (i, line) in lines.iter().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<LogEntry>(line) {
                    Ok(e) => log.push(e),
                    Err(_) if i == last => break,
                    Err(e) => {
                        return Err(Error::Parse {
                            line: i + 1,
                            message: format!("{}: {e}", events_path.display()),
                        })
                    }
                }
            }
        }
        let mut session = Session::replay(initial, log)?;
        session.attach_journal(Journal::open(events_path)?);
        Ok(session)
    }

    /// Ids of every complete session under the root, sorted.
    pub fn list(&self) -> Result<Vec<String>> {
        let mut ids = Vec::new();
        let rd = std::fs::read_dir(&self.root).map_err(|e| Error::io(&self.root, e))?;
        for entry in rd {
            let entry = entry.map_err(|e| Error::io(&self.root, e))?;
            if entry.path().join(INITIAL).is_file() {
                if let Some(name) = entry.file_name().to_str() {
                    ids.push(name.to_string());
                }
            }
        }
        ids.sort();
        Ok(ids)
    }

    pub fn load_all(&self) -> Result<Vec<Session>> {
        self.list()?.iter().map(|id| self.load(id)).collect()
    }
}
