use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

use super::state::JobState;
use super::Job;
use crate::backend::{FailureReason, StepRecord};

/// One line of the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    /// Hours since job start.
    pub time: Decimal,
    pub job_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_id: Option<String>,
    #[serde(flatten)]
    pub body: EventBody,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", content = "payload", rename_all = "snake_case")]
pub enum EventBody {
    JobSubmitted {
        job: Box<Job>,
        concurrency: u32,
        lease_hours: Decimal,
    },
    Leased {
        attempt: u32,
        expiry: Decimal,
    },
    StepStarted {
        step: String,
        pool: String,
        expiry: Decimal,
    },
    StepFinished {
        record: Box<StepRecord>,
    },
    Succeeded {},
    Failed {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        step: Option<String>,
        reason: FailureReason,
    },
    Requeued {},
    Exhausted {},
}

/// A log whose record at `line` is malformed or illegal. `state` holds
/// everything recovered before it.
#[derive(Debug, Clone)]
pub struct CorruptLog {
    pub line: usize,
    pub message: String,
    pub state: Box<JobState>,
    /// Bytes of the log up to the end of the last good record.
    pub valid_bytes: u64,
    /// Whether the bad record is the last line of the file.
    pub is_final_line: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error("event log line {}: {}", .0.line, .0.message)]
    Corrupt(CorruptLog),
    #[error("event log {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

/// Append-only writer. Each record is written with a single `write_all` of
/// one newline-terminated line.
#[derive(Debug)]
pub struct EventLog {
    path: PathBuf,
    file: File,
    fsync: bool,
}

impl EventLog {
    fn open(path: &Path, fsync: bool, truncate: bool) -> Result<Self, LogError> {
        let io_err = |source| LogError::Io {
            path: path.to_path_buf(),
            source,
        };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err)?;
        }
        let mut opts = OpenOptions::new();
        if truncate {
            opts.write(true).create(true).truncate(true);
        } else {
            opts.append(true);
        }
        let file = opts.open(path).map_err(io_err)?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
            fsync,
        })
    }

    pub fn create(path: &Path, fsync: bool) -> Result<Self, LogError> {
        Self::open(path, fsync, true)
    }

    pub fn append_to(path: &Path, fsync: bool) -> Result<Self, LogError> {
        Self::open(path, fsync, false)
    }

    pub(crate) fn truncate_to(path: &Path, len: u64) -> Result<(), LogError> {
        OpenOptions::new()
            .write(true)
            .open(path)
            .and_then(|f| f.set_len(len))
            .map_err(|source| LogError::Io {
                path: path.to_path_buf(),
                source,
            })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, record: &EventRecord) -> Result<(), LogError> {
        let mut line = serde_json::to_string(record).expect("event records serialize");
        line.push('\n');
        let io_err = |source| LogError::Io {
            path: self.path.clone(),
            source,
        };
        self.file.write_all(line.as_bytes()).map_err(io_err)?;
        if self.fsync {
            self.file.sync_data().map_err(io_err)?;
        }
        Ok(())
    }
}

/// Fold a log into state. Stops at the first malformed, out-of-sequence or
/// illegal record and returns the prefix state inside the error.
pub fn replay(path: &Path) -> Result<JobState, LogError> {
    let file = File::open(path).map_err(|source| LogError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let total = file.metadata().map(|m| m.len()).unwrap_or(0);
    let mut reader = BufReader::new(file);
    let mut state = JobState::default();
    let mut offset = 0u64;
    let mut buf = String::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        let n = reader.read_line(&mut buf).map_err(|source| LogError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if n == 0 {
            return Ok(state);
        }
        line_no += 1;
        let complete = buf.ends_with('\n');
        let parsed = if complete {
            serde_json::from_str::<EventRecord>(buf.trim_end()).map_err(|e| e.to_string())
        } else {
            Err("incomplete record".to_string())
        };
        let result = parsed.and_then(|rec| {
            if rec.seq != state.next_seq() {
                return Err(format!("expected seq {}, found {}", state.next_seq(), rec.seq));
            }
            state.validate(&rec)?;
            Ok(rec)
        });
        match result {
            Ok(rec) => state.mutate(&rec),
            Err(message) => {
                return Err(LogError::Corrupt(CorruptLog {
                    line: line_no,
                    message,
                    state: Box::new(state),
                    valid_bytes: offset,
                    is_final_line: offset + n as u64 == total,
                }))
            }
        }
        offset += n as u64;
    }
}
