//! Append-only event log on disk.
//!
//! Only newline-terminated lines count as written. A trailing fragment left
//! by a crash mid-write is dropped when the log is read and cut off when it
//! is reopened for appending.

use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use vcglight_core::engine::SessionEvent;
use vcglight_core::MechanismConfig;

use crate::wire::{LogRecord, WireError};

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: {source}")]
    Wire {
        line: usize,
        #[source]
        source: WireError,
    },
    #[error("line {line}: invalid UTF-8")]
    Utf8 { line: usize },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> LogError + '_ {
    move |source| LogError::Io {
        path: path.to_owned(),
        source,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LogContents {
    pub records: Vec<LogRecord>,
    /// Bytes of complete lines.
    pub valid_len: u64,
    /// Length of an unterminated trailing fragment, if any.
    pub torn_bytes: usize,
}

impl LogContents {
    /// Session events in log order, skipping annotations.
    pub fn events(&self, cfg: &MechanismConfig) -> Result<Vec<SessionEvent>, LogError> {
        let mut out = Vec::with_capacity(self.records.len());
        for (i, r) in self.records.iter().enumerate() {
            match r.to_event(cfg) {
                Ok(Some(e)) => out.push(e),
                Ok(None) => {}
                Err(source) => return Err(LogError::Wire { line: i + 1, source }),
            }
        }
        Ok(out)
    }
}

pub fn parse_log(bytes: &[u8]) -> Result<LogContents, LogError> {
    let mut contents = LogContents::default();
    let mut pos = 0;
    let mut line_no = 0;
    while pos < bytes.len() {
        let Some(nl) = bytes[pos..].iter().position(|&b| b == b'\n') else {
            contents.torn_bytes = bytes.len() - pos;
            break;
        };
        line_no += 1;
        let raw = &bytes[pos..pos + nl];
        pos += nl + 1;
        contents.valid_len = pos as u64;
        let text = std::str::from_utf8(raw).map_err(|_| LogError::Utf8 { line: line_no })?;
        if text.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(text).map_err(|source| LogError::Parse {
            line: line_no,
            source,
        })?;
        contents.records.push(rec);
    }
    Ok(contents)
}

pub fn read_log(path: &Path) -> Result<LogContents, LogError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    parse_log(&bytes)
}

/// Reads the session events of a log, skipping annotations.
pub fn read_events(path: &Path, cfg: &MechanismConfig) -> Result<Vec<SessionEvent>, LogError> {
    read_log(path)?.events(cfg)
}

/// Writes a whole log in one go, replacing `path`.
pub fn write_log(path: &Path, records: &[LogRecord]) -> Result<(), LogError> {
    let mut buf = String::new();
    for r in records {
        buf.push_str(&r.to_line());
        buf.push('\n');
    }
    std::fs::write(path, buf).map_err(io_err(path))
}

/// Appending handle; the single durability point of a zone.
#[derive(Debug)]
pub struct EventLog {
    file: File,
    path: PathBuf,
    sync: bool,
}

impl EventLog {
    /// Opens or creates the log, returning what it already holds. A torn
    /// trailing fragment is truncated away.
    pub fn open(path: &Path, sync: bool) -> Result<(Self, LogContents), LogError> {
        let contents = match std::fs::read(path) {
            Ok(bytes) => parse_log(&bytes)?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => LogContents::default(),
            Err(e) => return Err(io_err(path)(e)),
        };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err(path))?;
        if contents.torn_bytes > 0 {
            tracing::warn!(
                path = %path.display(),
                bytes = contents.torn_bytes,
                "dropping torn trailing record"
            );
            file.set_len(contents.valid_len).map_err(io_err(path))?;
        }
        Ok((
            Self {
                file,
                path: path.to_owned(),
                sync,
            },
            contents,
        ))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Writes `records` as one contiguous chunk and flushes it to the OS,
    /// syncing to disk when configured.
    pub fn append(&mut self, records: &[LogRecord]) -> Result<(), LogError> {
        if records.is_empty() {
            return Ok(());
        }
        let mut buf = String::new();
        for r in records {
            buf.push_str(&r.to_line());
            buf.push('\n');
        }
        let path = self.path.clone();
        self.file.write_all(buf.as_bytes()).map_err(io_err(&path))?;
        self.file.flush().map_err(io_err(&path))?;
        if self.sync {
            self.file.sync_data().map_err(io_err(&path))?;
        }
        Ok(())
    }
}
