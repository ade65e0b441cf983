//! Append-only JSON Lines run log.
//!
//! Each line is one [`TrialRecord`]. Appends are flushed before returning.
//! On load, a malformed *final* line (a write cut short by a crash) is
//! skipped with a warning; a malformed line anywhere else is an error.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::configspace::Configuration;
use crate::error::{Error, Result};
use crate::objectives::Objectives;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialStatus {
    Running,
    Reported,
    Failed,
}

/// One evaluation of a configuration at a fidelity and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub v: u32,
    pub trial_id: String,
    pub config: Configuration,
    pub seed: u64,
    pub fidelity: u32,
    pub status: TrialStatus,
    pub objectives: Option<Objectives>,
    pub wall_time_s: f64,
}

impl TrialRecord {
    pub fn reported(
        trial_id: impl Into<String>,
        config: Configuration,
        seed: u64,
        fidelity: u32,
        objectives: Objectives,
        wall_time_s: f64,
    ) -> Self {
        Self {
            v: SCHEMA_VERSION,
            trial_id: trial_id.into(),
            config,
            seed,
            fidelity,
            status: TrialStatus::Reported,
            objectives: Some(objectives),
            wall_time_s,
        }
    }

    pub fn failed(
        trial_id: impl Into<String>,
        config: Configuration,
        seed: u64,
        fidelity: u32,
        wall_time_s: f64,
    ) -> Self {
        Self {
            v: SCHEMA_VERSION,
            trial_id: trial_id.into(),
            config,
            seed,
            fidelity,
            status: TrialStatus::Failed,
            objectives: None,
            wall_time_s,
        }
    }

    /// Objectives are present iff the status is `reported`.
    pub fn check(&self) -> Result<()> {
        if self.v != SCHEMA_VERSION {
            return Err(Error::input(format!("unsupported schema version {}", self.v)));
        }
        match (self.status, &self.objectives) {
            (TrialStatus::Reported, Some(_)) | (TrialStatus::Running | TrialStatus::Failed, None) => Ok(()),
            (TrialStatus::Reported, None) => Err(Error::input(format!(
                "trial `{}` is reported without objectives",
                self.trial_id
            ))),
            (_, Some(_)) => Err(Error::input(format!(
                "trial `{}` carries objectives but is not reported",
                self.trial_id
            ))),
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("trial records serialize")
    }
}

/// Writer half of a run log.
#[derive(Debug)]
pub struct RunLogWriter {
    path: PathBuf,
    file: File,
}

impl RunLogWriter {
    /// Creates (truncating) a log file.
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self { path, file })
    }

    /// Opens a log for appending, creating it if absent. An unterminated
    /// trailing fragment left by an interrupted write is cut off first.
    pub fn append_to(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Ok(bytes) = std::fs::read(&path) {
            if bytes.last().is_some_and(|&b| b != b'\n') {
                let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
                log::warn!(
                    "{}: dropping {} byte(s) of unterminated trailing line",
                    path.display(),
                    bytes.len() - keep
                );
                let f = OpenOptions::new().write(true).open(&path).map_err(|e| Error::io(&path, e))?;
                f.set_len(keep as u64).map_err(|e| Error::io(&path, e))?;
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self { path, file })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, record: &TrialRecord) -> Result<()> {
        record.check()?;
        let mut line = record.to_line();
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|()| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub path: PathBuf,
    pub records: Vec<TrialRecord>,
    /// Number of malformed trailing lines skipped (0 or 1).
    pub skipped: usize,
}

impl RunLog {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = Vec::new();
        for line in BufReader::new(file).lines() {
            lines.push(line.map_err(|e| Error::io(path, e))?);
        }
        while lines.last().is_some_and(|l| l.trim().is_empty()) {
            lines.pop();
        }
        let last = lines.len();
        let mut records = Vec::with_capacity(lines.len());
        let mut skipped = 0;
        for (i, line) in lines.iter().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let parsed = serde_json::from_str::<TrialRecord>(line)
                .map_err(|e| e.to_string())
                .and_then(|r| r.check().map(|()| r).map_err(|e| e.to_string()));
            match parsed {
                Ok(r) => records.push(r),
                Err(reason) if line_no == last => {
                    log::warn!("{}: skipping malformed trailing line {line_no}: {reason}", path.display());
                    skipped += 1;
                }
                Err(reason) => {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: line_no,
                        reason,
                    })
                }
            }
        }
        Ok(Self {
            path: path.to_path_buf(),
            records,
            skipped,
        })
    }

    pub fn reported(&self) -> impl Iterator<Item = &TrialRecord> {
        self.records.iter().filter(|r| r.status == TrialStatus::Reported)
    }

    pub fn max_fidelity(&self) -> Option<u32> {
        self.reported().map(|r| r.fidelity).max()
    }
}
