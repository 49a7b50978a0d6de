//! Domain types shared across the pipeline.
//!
//! Every type serializes as a JSON object with snake_case field names; that
//! form is what lands in the audit log and the record store.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{MockEngineSpec, MockStructurerSpec};
pub use crate::canon::{CanonValue, CanonicalFieldMap, KeyPath};

/// Lowercase hex SHA-256 of a document's bytes.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DocumentId(String);

impl DocumentId {
    pub fn from_bytes(bytes: &[u8]) -> Self {
        DocumentId(hex::encode(Sha256::digest(bytes)))
    }

    /// Accepts an already computed digest (64 lowercase hex chars).
    pub fn parse(text: &str) -> Option<Self> {
        let ok = text.len() == 64 && text.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'));
        ok.then(|| DocumentId(text.to_owned()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// First 12 hex chars, for log lines and report rows.
    pub fn short(&self) -> &str {
        &self.0[..12.min(self.0.len())]
    }
}

impl fmt::Display for DocumentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MediaType {
    Png,
    Jpeg,
    Tiff,
    Bmp,
}

impl MediaType {
    pub fn from_extension(ext: &str) -> Option<Self> {
        match ext.to_ascii_lowercase().as_str() {
            "png" => Some(MediaType::Png),
            "jpg" | "jpeg" => Some(MediaType::Jpeg),
            "tif" | "tiff" => Some(MediaType::Tiff),
            "bmp" => Some(MediaType::Bmp),
            _ => None,
        }
    }

    pub fn from_path(path: &Path) -> Option<Self> {
        path.extension()
            .and_then(|e| e.to_str())
            .and_then(Self::from_extension)
    }

    /// Whether `bytes` start with this format's signature.
    pub fn matches_magic(self, bytes: &[u8]) -> bool {
        match self {
            MediaType::Png => bytes.starts_with(b"\x89PNG\r\n\x1a\n"),
            MediaType::Jpeg => bytes.starts_with(&[0xFF, 0xD8, 0xFF]),
            MediaType::Tiff => bytes.starts_with(b"II*\0") || bytes.starts_with(b"MM\0*"),
            MediaType::Bmp => bytes.starts_with(b"BM"),
        }
    }
}

/// A detected input image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentFile {
    pub id: DocumentId,
    pub path: PathBuf,
    /// Wall-clock milliseconds since the Unix epoch.
    pub detected_at: u64,
    pub media_type: MediaType,
}

/// Directory monitor state: the previous file set and polling parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonitorState {
    pub directory: PathBuf,
    #[serde(default = "default_interval_ms")]
    pub interval_ms: u64,
    /// Path to content hash at the time the file was first seen.
    #[serde(default)]
    pub known_files: BTreeMap<PathBuf, String>,
    /// Run duration; `None` runs until shutdown.
    #[serde(default)]
    pub horizon_ms: Option<u64>,
    #[serde(default)]
    pub strict_magic: bool,
}

pub const DEFAULT_INTERVAL_MS: u64 = 1000;

fn default_interval_ms() -> u64 {
    DEFAULT_INTERVAL_MS
}

impl MonitorState {
    pub fn new(directory: impl Into<PathBuf>) -> Self {
        MonitorState {
            directory: directory.into(),
            interval_ms: DEFAULT_INTERVAL_MS,
            known_files: BTreeMap::new(),
            horizon_ms: None,
            strict_magic: false,
        }
    }
}

/// How an extraction engine is reached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "target", rename_all = "snake_case")]
pub enum EngineBackend {
    /// Command line; the document path is appended as the last argument.
    Subprocess(Vec<String>),
    Http(String),
    Mock(MockEngineSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineDescriptor {
    pub engine_id: String,
    #[serde(flatten)]
    pub backend: EngineBackend,
    pub timeout_ms: u64,
    /// 1 is the highest priority.
    pub priority: u32,
    #[serde(default)]
    pub inter_call_delay_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "target", rename_all = "snake_case")]
pub enum StructurerBackend {
    Http(String),
    Mock(MockStructurerSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructurerDescriptor {
    pub structurer_id: String,
    #[serde(flatten)]
    pub backend: StructurerBackend,
    pub timeout_ms: u64,
    pub priority: u32,
    #[serde(default)]
    pub inter_call_delay_ms: u64,
}

/// Outcome of one backend call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallStatus {
    Ok,
    Timeout,
    Failed(String),
    InvalidJson(String),
}

impl CallStatus {
    pub fn is_ok(&self) -> bool {
        matches!(self, CallStatus::Ok)
    }

    /// Short label used in reports and file names.
    pub fn label(&self) -> &'static str {
        match self {
            CallStatus::Ok => "ok",
            CallStatus::Timeout => "timeout",
            CallStatus::Failed(_) => "failed",
            CallStatus::InvalidJson(_) => "invalid_json",
        }
    }
}

/// Raw text produced by one engine for one document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extraction {
    pub document_id: DocumentId,
    pub engine_id: String,
    pub text: String,
    pub latency_ms: u64,
    pub status: CallStatus,
}

/// One (engine, structurer) pair's structured candidate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ballot {
    pub document_id: DocumentId,
    pub engine_id: String,
    pub structurer_id: String,
    /// Tie-break weight; lower wins. See [`ballot_priority`].
    pub priority: u32,
    pub raw_json: String,
    pub fields: CanonicalFieldMap,
    pub latency_ms: u64,
    pub status: CallStatus,
}

/// Tie-break weight of an (engine, structurer) pair.
pub fn ballot_priority(engine_priority: u32, structurer_priority: u32) -> u32 {
    engine_priority * 10 + structurer_priority
}

/// Votes for one candidate value at one key path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub value: CanonValue,
    pub count: usize,
    pub priority_sum: u64,
    /// Smallest priority among supporting ballots.
    pub best_priority: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    Field,
    Document,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quorum {
    /// floor(n/2) + 1 over the ballots actually cast.
    #[default]
    Majority,
    Fixed(usize),
}

impl Quorum {
    pub fn resolve(self, n_ballots: usize) -> usize {
        match self {
            Quorum::Majority => n_ballots / 2 + 1,
            Quorum::Fixed(k) => k,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    #[default]
    Priority,
    Lexicographic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct VotingConfig {
    pub granularity: Granularity,
    pub inclusion_quorum: Quorum,
    pub tie_break: TieBreak,
    pub min_ballots: usize,
    /// When false the best-priority ok ballot is taken verbatim (the
    /// single-pass baseline).
    pub enabled: bool,
}

impl Default for VotingConfig {
    fn default() -> Self {
        VotingConfig {
            granularity: Granularity::Field,
            inclusion_quorum: Quorum::Majority,
            tie_break: TieBreak::Priority,
            min_ballots: 3,
            enabled: true,
        }
    }
}

/// The consensus for one document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteOutcome {
    pub document_id: DocumentId,
    pub fields: CanonicalFieldMap,
    /// Every path seen in any ballot, candidates ordered best-first.
    pub tallies: BTreeMap<KeyPath, Vec<Tally>>,
    pub n_ballots: usize,
    pub quorum: usize,
    pub tie_broken_paths: BTreeSet<KeyPath>,
    pub degraded: bool,
    pub granularity: Granularity,
    #[serde(default)]
    pub tie_break: TieBreak,
}

impl VoteOutcome {
    /// Number of ballots that contain `path`.
    pub fn support(&self, path: &KeyPath) -> usize {
        self.tallies
            .get(path)
            .map(|t| t.iter().map(|c| c.count).sum())
            .unwrap_or(0)
    }
}

/// Wall-clock milliseconds since the Unix epoch.
pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}
