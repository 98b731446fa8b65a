//! Flat-file case storage: `<dir>/<case_id>/events.jsonl` holds the
//! append-only audit log, `<dir>/<case_id>/session.json` the latest session
//! snapshot.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use thiserror::Error;

use super::CaseSession;
use crate::domain::{CaseId, PipelineEvent};

const EVENTS_FILE: &str = "events.jsonl";
const SESSION_FILE: &str = "session.json";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("case {case}: expected seq {expected}, got {got}")]
    SequenceGap { case: String, expected: u64, got: u64 },
    #[error("corrupt store {path} at line {line}: {reason}")]
    CorruptStore { path: String, line: usize, reason: String },
    #[error("event for {event} appended under {batch}")]
    WrongCase { event: String, batch: String },
    #[error("malformed case id")]
    BadCaseId,
    #[error("storage i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug)]
pub struct FileStore {
    dir: PathBuf,
    /// Next expected seq per case, filled lazily from disk.
    next_seq: Mutex<HashMap<String, u64>>,
}

impl FileStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir, next_seq: Mutex::new(HashMap::new()) })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn case_dir(&self, case_id: &CaseId) -> Result<PathBuf, StoreError> {
        if !case_id.is_well_formed() {
            return Err(StoreError::BadCaseId);
        }
        Ok(self.dir.join(case_id.as_str()))
    }

    pub fn contains(&self, case_id: &CaseId) -> bool {
        self.case_dir(case_id).map(|d| d.join(SESSION_FILE).exists()).unwrap_or(false)
    }

    fn expected_seq(&self, case_id: &CaseId) -> Result<u64, StoreError> {
        if let Some(next) = self.next_seq.lock().expect("store lock").get(case_id.as_str()) {
            return Ok(*next);
        }
        let next = self.load_events(case_id)?.last().map(|e| e.seq + 1).unwrap_or(0);
        Ok(next)
    }

    /// Appends a single event.
    pub fn append(&self, event: &PipelineEvent) -> Result<(), StoreError> {
        self.append_all(&event.case_id, std::slice::from_ref(event))
    }

    /// Appends a batch of events for one case in a single write. Every seq
    /// must continue the log without gaps.
    pub fn append_all(&self, case_id: &CaseId, events: &[PipelineEvent]) -> Result<(), StoreError> {
        if events.is_empty() {
            return Ok(());
        }
        let dir = self.case_dir(case_id)?;
        let mut expected = self.expected_seq(case_id)?;
        let mut buffer = Vec::new();
        for event in events {
            if event.case_id != *case_id {
                return Err(StoreError::WrongCase {
                    event: event.case_id.to_string(),
                    batch: case_id.to_string(),
                });
            }
            if event.seq != expected {
                return Err(StoreError::SequenceGap {
                    case: case_id.to_string(),
                    expected,
                    got: event.seq,
                });
            }
            serde_json::to_writer(&mut buffer, event).map_err(std::io::Error::other)?;
            buffer.push(b'\n');
            expected += 1;
        }
        fs::create_dir_all(&dir)?;
        let mut file = OpenOptions::new().create(true).append(true).open(dir.join(EVENTS_FILE))?;
        file.write_all(&buffer)?;
        file.sync_data()?;
        self.next_seq.lock().expect("store lock").insert(case_id.to_string(), expected);
        Ok(())
    }

    pub fn load_events(&self, case_id: &CaseId) -> Result<Vec<PipelineEvent>, StoreError> {
        let path = self.case_dir(case_id)?.join(EVENTS_FILE);
        let file = match fs::File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        let mut events = Vec::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let event: PipelineEvent = serde_json::from_str(&line).map_err(|e| StoreError::CorruptStore {
                path: path.display().to_string(),
                line: idx + 1,
                reason: e.to_string(),
            })?;
            events.push(event);
        }
        Ok(events)
    }

    /// Writes the snapshot through a temporary file and a rename so readers
    /// never see a partial session.
    pub fn save_session(&self, session: &CaseSession) -> Result<(), StoreError> {
        let dir = self.case_dir(&session.case.case_id)?;
        fs::create_dir_all(&dir)?;
        let tmp = dir.join(format!("{SESSION_FILE}.tmp"));
        let raw = serde_json::to_vec_pretty(session).map_err(std::io::Error::other)?;
        fs::write(&tmp, raw)?;
        fs::rename(&tmp, dir.join(SESSION_FILE))?;
        Ok(())
    }

    pub fn load_session(&self, case_id: &CaseId) -> Result<Option<CaseSession>, StoreError> {
        let path = self.case_dir(case_id)?.join(SESSION_FILE);
        let raw = match fs::read_to_string(&path) {
            Ok(raw) => raw,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        serde_json::from_str(&raw).map(Some).map_err(|e| StoreError::CorruptStore {
            path: path.display().to_string(),
            line: e.line(),
            reason: e.to_string(),
        })
    }
}
