//! Output directory layout:
//!
//! ```text
//! <output_dir>/final/<document_id>.json         consensus, rendered
//! <output_dir>/records.jsonl                    one RecordEntry per line
//! <output_dir>/audit/<document_id>/ballot_<engine>_<structurer>.json
//! <output_dir>/audit/<document_id>/vote_explain.txt
//! <output_dir>/audit/<document_id>/failure.json  terminal failures only
//! <output_dir>/report.md
//! ```
//!
//! Final files are replaced atomically (temp file + rename); the record log
//! is only ever appended to.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;

use crate::canon::{self, CanonError};
use crate::model::{now_ms, Ballot, DocumentId, VoteOutcome};
use crate::pipeline::{PipelineOutcome, PipelineResult};
use crate::vote::explain;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("persisting {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("rendering consensus: {0}")]
    Render(#[from] CanonError),
    #[error("records line {line}: {message}")]
    ReportFailure { line: usize, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_owned(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    Ok,
    Failed,
}

/// One line of `records.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordEntry {
    pub document_id: DocumentId,
    pub source: PathBuf,
    /// Milliseconds since the Unix epoch.
    pub completed_at: u64,
    pub status: RecordStatus,
    /// Key paths in the consensus.
    pub included_paths: usize,
    pub ballots_ok: usize,
    pub ballots_total: usize,
    pub degraded: bool,
    pub ties: usize,
    pub wall_clock_ms: u64,
    /// Relative to the output directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_json: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl RecordEntry {
    pub fn from_result(result: &PipelineResult) -> Self {
        let ballots_ok = result.ok_ballots();
        let mut entry = RecordEntry {
            document_id: result.document_id.clone(),
            source: result.path.clone(),
            completed_at: now_ms(),
            status: RecordStatus::Failed,
            included_paths: 0,
            ballots_ok,
            ballots_total: result.ballot_slots,
            degraded: ballots_ok < result.ballot_slots,
            ties: 0,
            wall_clock_ms: result.timings.total_ms,
            final_json: None,
            failure: None,
        };
        match &result.outcome {
            PipelineOutcome::Consensus { vote } => {
                entry.status = RecordStatus::Ok;
                entry.included_paths = vote.fields.len();
                entry.degraded = vote.degraded;
                entry.ties = vote.tie_broken_paths.len();
                entry.final_json = Some(final_relative(&result.document_id));
            }
            PipelineOutcome::Failed { failure } => entry.failure = Some(failure.to_string()),
            PipelineOutcome::AlreadyPersisted => {}
        }
        entry
    }
}

fn final_relative(id: &DocumentId) -> String {
    format!("final/{id}.json")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredPaths {
    pub final_json: PathBuf,
    pub audit: Vec<PathBuf>,
}

/// Serializes all writes under one output directory.
#[derive(Debug)]
pub struct Store {
    root: PathBuf,
    gate: Mutex<()>,
}

impl Store {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Store {
            root: root.into(),
            gate: Mutex::new(()),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn final_path(&self, id: &DocumentId) -> PathBuf {
        self.root.join(final_relative(id))
    }

    pub fn records_path(&self) -> PathBuf {
        self.root.join("records.jsonl")
    }

    pub fn audit_dir(&self, id: &DocumentId) -> PathBuf {
        self.root.join("audit").join(id.as_str())
    }

    pub fn is_persisted(&self, id: &DocumentId) -> bool {
        self.final_path(id).is_file()
    }

    /// Writes the consensus, the audit trail when `audit` is set, and one
    /// record line. The record is appended last, so a reader never sees a
    /// record whose final file is missing.
    pub async fn persist(
        &self,
        result: &PipelineResult,
        outcome: &VoteOutcome,
        ballots: &[Ballot],
        audit: bool,
    ) -> Result<StoredPaths, StoreError> {
        let rendered = canon::render(&outcome.fields)?;
        let _guard = self.gate.lock().await;
        let mut stored = StoredPaths {
            final_json: self.final_path(&outcome.document_id),
            audit: Vec::new(),
        };
        if audit {
            let dir = self.audit_dir(&outcome.document_id);
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            for ballot in ballots {
                let path = dir.join(format!(
                    "ballot_{}_{}.json",
                    ballot.engine_id, ballot.structurer_id
                ));
                let body = serde_json::to_string_pretty(ballot).expect("ballot serializes");
                write_atomic(&path, body.as_bytes())?;
                stored.audit.push(path);
            }
            let path = dir.join("vote_explain.txt");
            write_atomic(&path, explain(outcome).as_bytes())?;
            stored.audit.push(path);
        }
        write_atomic(&stored.final_json, rendered.as_bytes())?;
        self.append_record(&RecordEntry::from_result(result))?;
        Ok(stored)
    }

    /// Records a terminal failure: a record line, plus `failure.json` in the
    /// audit directory when `audit` is set. No final file is written.
    pub async fn record_failure(&self, result: &PipelineResult, audit: bool) -> Result<(), StoreError> {
        let _guard = self.gate.lock().await;
        if audit {
            let dir = self.audit_dir(&result.document_id);
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            let body = serde_json::to_string_pretty(result).expect("result serializes");
            write_atomic(&dir.join("failure.json"), body.as_bytes())?;
        }
        self.append_record(&RecordEntry::from_result(result))
    }

    fn append_record(&self, entry: &RecordEntry) -> Result<(), StoreError> {
        let path = self.records_path();
        let mut line = serde_json::to_string(entry).expect("record serializes");
        line.push('\n');
        fs::create_dir_all(&self.root).map_err(io_err(&self.root))?;
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        file.write_all(line.as_bytes()).map_err(io_err(&path))
    }

    /// Renders `records.jsonl` into `report.md` and returns its path.
    pub fn render_report(&self) -> Result<PathBuf, StoreError> {
        let records = self.records_path();
        let text = match fs::read_to_string(&records) {
            Ok(text) => text,
            Err(e) if e.kind() == io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(io_err(&records)(e)),
        };
        let report = report_markdown(&parse_records(&text)?);
        let path = self.root.join("report.md");
        write_atomic(&path, report.as_bytes())?;
        Ok(path)
    }
}

/// Writes via a sibling temp file and rename; the temp file is removed if
/// anything fails.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let name = path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp"));
    let written = fs::write(&tmp, bytes).and_then(|_| fs::rename(&tmp, path));
    if let Err(e) = written {
        let _ = fs::remove_file(&tmp);
        return Err(io_err(path)(e));
    }
    Ok(())
}

/// Parses record lines; blank lines are skipped, line numbers are 1-based.
pub fn parse_records(text: &str) -> Result<Vec<RecordEntry>, StoreError> {
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| StoreError::ReportFailure {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// The report text; depends only on `records`.
pub fn report_markdown(records: &[RecordEntry]) -> String {
    let mut out = String::from("# Template Report\n\n");
    out.push_str("| document | status | fields | ballots ok/total | degraded | ties | wall-clock ms |\n");
    out.push_str("|---|---|---:|---:|---|---:|---:|\n");
    for r in records {
        let status = match r.status {
            RecordStatus::Ok => "ok",
            RecordStatus::Failed => "failed",
        };
        let _ = writeln!(
            out,
            "| {} | {} | {} | {}/{} | {} | {} | {} |",
            r.document_id.short(),
            status,
            r.included_paths,
            r.ballots_ok,
            r.ballots_total,
            if r.degraded { "yes" } else { "no" },
            r.ties,
            r.wall_clock_ms
        );
    }
    let failures = records.iter().filter(|r| r.status == RecordStatus::Failed).count();
    let _ = writeln!(out, "\n{} documents, {} failed", records.len(), failures);
    let mut times: Vec<u64> = records.iter().map(|r| r.wall_clock_ms).collect();
    if times.is_empty() {
        out.push_str("mean wall-clock ms: n/a\nmedian wall-clock ms: n/a\n");
    } else {
        times.sort_unstable();
        let mean = times.iter().map(|&t| t as f64).sum::<f64>() / times.len() as f64;
        let mid = times.len() / 2;
        let median = if times.len() % 2 == 1 {
            times[mid] as f64
        } else {
            (times[mid - 1] + times[mid]) as f64 / 2.0
        };
        let _ = writeln!(out, "mean wall-clock ms: {mean:.2}\nmedian wall-clock ms: {median:.2}");
    }
    out
}
