//! Append-only event file, one JSON event per line. A write is durable once
//! its newline is on disk; an unterminated last line is a request that was cut
//! off mid-write and is dropped on reopen.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{EvalSession, Event, SessionError};

#[derive(Debug, Error)]
pub enum LogError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("event log line {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error("event log line {line}: {source}")]
    Rejected {
        line: usize,
        #[source]
        source: SessionError,
    },
    #[error("event log is empty")]
    Empty,
}

/// Rebuilds a session from log text. Returns the session and the byte length
/// of the complete (newline-terminated) prefix that was applied.
pub fn replay(text: &str) -> Result<(EvalSession, usize), LogError> {
    let mut session: Option<EvalSession> = None;
    let mut consumed = 0;
    for (i, chunk) in text.split_inclusive('\n').enumerate() {
        if !chunk.ends_with('\n') {
            break;
        }
        let line = chunk.trim_end();
        let event: Event = serde_json::from_str(line).map_err(|e| LogError::Corrupt {
            line: i + 1,
            message: e.to_string(),
        })?;
        let rejected = |source| LogError::Rejected { line: i + 1, source };
        match session.as_mut() {
            None => session = Some(EvalSession::from_created(&event).map_err(rejected)?),
            Some(s) => s.apply(&event).map_err(rejected)?,
        }
        consumed += chunk.len();
    }
    session.map(|s| (s, consumed)).ok_or(LogError::Empty)
}

pub struct EventLog {
    path: PathBuf,
    file: File,
}

impl EventLog {
    fn io(path: &Path) -> impl Fn(std::io::Error) -> LogError + '_ {
        move |source| LogError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Starts a new log with its creation event; fails if the file exists.
    pub fn create(path: &Path, created: &Event) -> Result<Self, LogError> {
        let file = OpenOptions::new()
            .append(true)
            .create_new(true)
            .open(path)
            .map_err(Self::io(path))?;
        let mut log = Self {
            path: path.to_path_buf(),
            file,
        };
        log.append(created)?;
        Ok(log)
    }

    /// Replays an existing log, dropping a torn final line.
    pub fn open(path: &Path) -> Result<(Self, EvalSession), LogError> {
        let text = std::fs::read_to_string(path).map_err(Self::io(path))?;
        let (session, consumed) = replay(&text)?;
        let file = OpenOptions::new().append(true).open(path).map_err(Self::io(path))?;
        if consumed < text.len() {
            log::warn!("{}: dropping {} bytes of torn tail", path.display(), text.len() - consumed);
            file.set_len(consumed as u64).map_err(Self::io(path))?;
        }
        Ok((
            Self {
                path: path.to_path_buf(),
                file,
            },
            session,
        ))
    }

    pub fn append(&mut self, event: &Event) -> Result<(), LogError> {
        let mut line = serde_json::to_string(event).expect("event serializes");
        line.push('\n');
        self.file.write_all(line.as_bytes()).map_err(Self::io(&self.path))?;
        self.file.sync_data().map_err(Self::io(&self.path))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}
