//! Document processing and the continuous watch loop.
//!
//! Per document: every engine runs concurrently; as soon as one extraction
//! succeeds, all structurers run on its text. Surviving ballots are voted
//! on and the consensus is persisted. Backend failures only shrink the
//! ballot set; a document fails terminally when too few ballots remain or
//! the store cannot write.

use std::collections::BTreeSet;
use std::future::Future;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use futures::future::join_all;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::{mpsc, watch as signal, Semaphore};
use tokio::task::JoinSet;
use tokio::time::{sleep_until, Instant};

use crate::adapters::{EngineClient, StructurerClient};
use crate::events::Logger;
use crate::model::{
    now_ms, Ballot, CallStatus, DocumentFile, DocumentId, EngineBackend, EngineDescriptor,
    MonitorState, Quorum, StructurerBackend, StructurerDescriptor, VoteOutcome, VotingConfig,
};
use crate::store::Store;
use crate::vote::{majority_vote, VoteError};
use crate::watch::{self, is_valid_image};

pub const DEFAULT_MAX_IN_FLIGHT: usize = 2;
pub const DEFAULT_QUEUE_CAPACITY: usize = 64;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Execution {
    /// Structuring of an extraction starts as soon as it completes.
    #[default]
    Pipelined,
    /// One call at a time: all extractions, then all structurings. Used as
    /// the timing reference.
    Sequential,
}

fn default_max_in_flight() -> usize {
    DEFAULT_MAX_IN_FLIGHT
}

fn default_queue_capacity() -> usize {
    DEFAULT_QUEUE_CAPACITY
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub engines: Vec<EngineDescriptor>,
    pub structurers: Vec<StructurerDescriptor>,
    #[serde(default)]
    pub voting: VotingConfig,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub audit: bool,
    pub monitor: MonitorState,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_queue_capacity")]
    pub queue_capacity: usize,
    #[serde(default)]
    pub execution: Execution,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'.')
        && !id.starts_with('.')
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let invalid = |msg: String| Err(PipelineError::ConfigInvalid(msg));
        if self.engines.is_empty() {
            return invalid("at least one engine is required".into());
        }
        if self.structurers.is_empty() {
            return invalid("at least one structurer is required".into());
        }
        let mut seen = BTreeSet::new();
        for e in &self.engines {
            if !valid_id(&e.engine_id) {
                return invalid(format!(
                    "engine id {:?} must be non-empty ASCII letters, digits, '-' or '.'",
                    e.engine_id
                ));
            }
            if !seen.insert(e.engine_id.as_str()) {
                return invalid(format!("duplicate engine id {:?}", e.engine_id));
            }
            if e.priority == 0 {
                return invalid(format!("engine {}: priority starts at 1", e.engine_id));
            }
            match &e.backend {
                EngineBackend::Subprocess(argv) if argv.is_empty() => {
                    return invalid(format!("engine {}: empty command", e.engine_id))
                }
                EngineBackend::Mock(spec) => {
                    if let Err(msg) = spec.noise.validate() {
                        return invalid(format!("engine {}: {msg}", e.engine_id));
                    }
                }
                _ => {}
            }
        }
        let mut seen = BTreeSet::new();
        for s in &self.structurers {
            if !valid_id(&s.structurer_id) {
                return invalid(format!(
                    "structurer id {:?} must be non-empty ASCII letters, digits, '-' or '.'",
                    s.structurer_id
                ));
            }
            if !seen.insert(s.structurer_id.as_str()) {
                return invalid(format!("duplicate structurer id {:?}", s.structurer_id));
            }
            if !(1..=9).contains(&s.priority) {
                return invalid(format!("structurer {}: priority must be 1..=9", s.structurer_id));
            }
            if let StructurerBackend::Mock(spec) = &s.backend {
                if let Err(msg) = spec.noise.validate() {
                    return invalid(format!("structurer {}: {msg}", s.structurer_id));
                }
            }
        }
        if self.voting.inclusion_quorum == Quorum::Fixed(0) {
            return invalid("fixed quorum must be at least 1".into());
        }
        if self.voting.enabled && self.voting.min_ballots == 0 {
            return invalid("min_ballots must be at least 1".into());
        }
        if self.max_in_flight == 0 || self.queue_capacity == 0 {
            return invalid("max_in_flight and queue_capacity must be at least 1".into());
        }
        if self.monitor.interval_ms == 0 {
            return invalid("interval_ms must be at least 1".into());
        }
        if same_dir(&self.output_dir, &self.monitor.directory) {
            return invalid("output_dir must differ from the monitored directory".into());
        }
        Ok(())
    }
}

fn same_dir(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => a.components().eq(b.components()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TerminalFailure {
    #[error("insufficient ballots: {got} ok, {need} required")]
    InsufficientBallots { got: usize, need: usize },
    #[error("persistence failure: {message}")]
    PersistenceFailure { message: String },
    #[error("vote failed: {message}")]
    VoteFailed { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum PipelineOutcome {
    Consensus { vote: VoteOutcome },
    Failed { failure: TerminalFailure },
    /// A final output for this document id already existed.
    AlreadyPersisted,
}

/// Status of one engine × structurer slot. `structurer_id` is absent when
/// the engine itself failed, which voids the whole row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BallotReport {
    pub engine_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub structurer_id: Option<String>,
    pub status: CallStatus,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTimings {
    /// Start to last extraction finished.
    pub extraction_ms: u64,
    /// First structuring started to last one finished.
    pub structuring_ms: u64,
    pub vote_ms: u64,
    pub total_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineResult {
    pub document_id: DocumentId,
    pub path: PathBuf,
    pub detected_at: u64,
    pub outcome: PipelineOutcome,
    pub timings: StageTimings,
    /// engines × structurers.
    pub ballot_slots: usize,
    pub ballots: Vec<BallotReport>,
}

impl PipelineResult {
    pub fn ok_ballots(&self) -> usize {
        self.ballots.iter().filter(|b| b.status.is_ok()).count()
    }

    pub fn vote(&self) -> Option<&VoteOutcome> {
        match &self.outcome {
            PipelineOutcome::Consensus { vote } => Some(vote),
            _ => None,
        }
    }
}

/// Counts for one run of [`Pipeline::run_loop`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub detected: usize,
    pub completed: usize,
    pub failed: usize,
    pub skipped: usize,
    pub ignored: usize,
    pub panicked: usize,
}

struct EngineRun {
    extraction_done: Instant,
    structuring: Option<(Instant, Instant)>,
    reports: Vec<BallotReport>,
    ballots: Vec<Ballot>,
}

fn ms_between(from: Instant, to: Instant) -> u64 {
    to.saturating_duration_since(from).as_millis() as u64
}

#[derive(Debug)]
pub struct Pipeline {
    cfg: PipelineConfig,
    engines: Vec<EngineClient>,
    structurers: Vec<StructurerClient>,
    store: Store,
    log: Logger,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, log: Logger) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let http = reqwest::Client::builder()
            .build()
            .map_err(|e| PipelineError::ConfigInvalid(format!("http client: {e}")))?;
        let engines = cfg
            .engines
            .iter()
            .map(|d| EngineClient::new(d.clone(), http.clone()))
            .collect();
        let structurers = cfg
            .structurers
            .iter()
            .map(|d| StructurerClient::new(d.clone(), http.clone()))
            .collect();
        Ok(Pipeline {
            store: Store::new(&cfg.output_dir),
            engines,
            structurers,
            log,
            cfg,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    /// Describes a single file as a document, or `None` if it is not a valid
    /// image under the configured strictness.
    pub fn document_for(&self, path: &Path) -> std::io::Result<Option<DocumentFile>> {
        if !is_valid_image(path, self.cfg.monitor.strict_magic) {
            return Ok(None);
        }
        let bytes = std::fs::read(path)?;
        Ok(Some(DocumentFile {
            id: DocumentId::from_bytes(&bytes),
            path: path.to_owned(),
            detected_at: now_ms(),
            media_type: crate::model::MediaType::from_path(path).expect("checked above"),
        }))
    }

    pub async fn process_document(&self, doc: &DocumentFile) -> PipelineResult {
        let start = Instant::now();
        let slots = self.engines.len() * self.structurers.len();
        let mut result = PipelineResult {
            document_id: doc.id.clone(),
            path: doc.path.clone(),
            detected_at: doc.detected_at,
            outcome: PipelineOutcome::AlreadyPersisted,
            timings: StageTimings::default(),
            ballot_slots: slots,
            ballots: Vec::new(),
        };
        if self.store.is_persisted(&doc.id) {
            self.log.info(
                "already_persisted",
                Some(&doc.id),
                json!({"path": doc.path.display().to_string()}),
            );
            return result;
        }

        let runs = match self.cfg.execution {
            Execution::Pipelined => self.run_pipelined(doc).await,
            Execution::Sequential => self.run_sequential(doc).await,
        };
        let extraction_end = runs.iter().map(|r| r.extraction_done).max().unwrap_or(start);
        let structuring_start = runs.iter().filter_map(|r| r.structuring.map(|s| s.0)).min();
        let structuring_end = runs.iter().filter_map(|r| r.structuring.map(|s| s.1)).max();
        result.timings.extraction_ms = ms_between(start, extraction_end);
        if let (Some(a), Some(b)) = (structuring_start, structuring_end) {
            result.timings.structuring_ms = ms_between(a, b);
        }
        let mut ballots = Vec::new();
        for run in runs {
            result.ballots.extend(run.reports);
            ballots.extend(run.ballots.into_iter().filter(|b| b.status.is_ok()));
        }
        for report in result.ballots.iter().filter(|r| !r.status.is_ok()) {
            self.log.warn(
                "backend_failed",
                Some(&doc.id),
                json!({
                    "engine_id": report.engine_id,
                    "structurer_id": report.structurer_id,
                    "status": report.status,
                }),
            );
        }

        let vote_start = Instant::now();
        let voted = self.vote(&ballots, slots);
        result.timings.vote_ms = ms_between(vote_start, Instant::now());

        match voted {
            Ok(vote) => match self.store.persist(&result, &vote, &ballots, self.cfg.audit).await {
                Ok(_) => result.outcome = PipelineOutcome::Consensus { vote },
                Err(e) => {
                    result.outcome = PipelineOutcome::Failed {
                        failure: TerminalFailure::PersistenceFailure { message: e.to_string() },
                    }
                }
            },
            Err(failure) => result.outcome = PipelineOutcome::Failed { failure },
        }
        result.timings.total_ms = ms_between(start, Instant::now());

        match &result.outcome {
            PipelineOutcome::Consensus { vote } => self.log.info(
                "document_completed",
                Some(&doc.id),
                json!({
                    "path": doc.path.display().to_string(),
                    "fields": vote.fields.len(),
                    "ballots_ok": vote.n_ballots,
                    "ballot_slots": slots,
                    "degraded": vote.degraded,
                    "ties": vote.tie_broken_paths.len(),
                    "wall_clock_ms": result.timings.total_ms,
                }),
            ),
            PipelineOutcome::Failed { failure } => {
                self.log.error(
                    "document_failed",
                    Some(&doc.id),
                    json!({"path": doc.path.display().to_string(), "failure": failure}),
                );
                if let Err(e) = self.store.record_failure(&result, self.cfg.audit).await {
                    self.log.error("record_failed", Some(&doc.id), json!({"error": e.to_string()}));
                }
            }
            PipelineOutcome::AlreadyPersisted => {}
        }
        result
    }

    fn vote(&self, ballots: &[Ballot], slots: usize) -> Result<VoteOutcome, TerminalFailure> {
        match majority_vote(ballots, &self.cfg.voting) {
            Ok(mut vote) => {
                vote.degraded = ballots.len() < slots;
                Ok(vote)
            }
            Err(VoteError::InsufficientBallots { got, need }) => {
                Err(TerminalFailure::InsufficientBallots { got, need })
            }
            Err(e) => Err(TerminalFailure::VoteFailed { message: e.to_string() }),
        }
    }

    async fn run_pipelined(&self, doc: &DocumentFile) -> Vec<EngineRun> {
        join_all(self.engines.iter().map(|engine| async move {
            let extraction = engine.extract_text(doc).await;
            let extraction_done = Instant::now();
            if !extraction.status.is_ok() {
                return failed_run(extraction_done, &extraction.engine_id, extraction.status, extraction.latency_ms);
            }
            let priority = engine.descriptor.priority;
            let ballots = join_all(
                self.structurers
                    .iter()
                    .map(|s| s.structure_text(&extraction, priority)),
            )
            .await;
            finished_run(extraction_done, ballots)
        }))
        .await
    }

    async fn run_sequential(&self, doc: &DocumentFile) -> Vec<EngineRun> {
        let mut extractions = Vec::new();
        for engine in &self.engines {
            let extraction = engine.extract_text(doc).await;
            extractions.push((engine, extraction, Instant::now()));
        }
        let mut runs = Vec::new();
        for (engine, extraction, done) in extractions {
            if !extraction.status.is_ok() {
                runs.push(failed_run(done, &extraction.engine_id, extraction.status, extraction.latency_ms));
                continue;
            }
            let mut ballots = Vec::new();
            let started = Instant::now();
            for s in &self.structurers {
                ballots.push(s.structure_text(&extraction, engine.descriptor.priority).await);
            }
            let mut run = finished_run(done, ballots);
            if let Some((_, end)) = run.structuring {
                run.structuring = Some((started, end));
            }
            runs.push(run);
        }
        runs
    }

    /// Polls the monitored directory and processes new documents until the
    /// horizon passes or `shutdown` resolves, then drains queued and
    /// in-flight documents. Each result is also sent to `results` if given.
    pub async fn run_loop<F>(
        self: &Arc<Self>,
        shutdown: F,
        results: Option<mpsc::UnboundedSender<PipelineResult>>,
    ) -> RunSummary
    where
        F: Future<Output = ()>,
    {
        let (queue_tx, mut queue_rx) = mpsc::channel::<DocumentFile>(self.cfg.queue_capacity);
        let (stop_tx, stop_rx) = signal::channel(false);
        let deadline = self
            .cfg
            .monitor
            .horizon_ms
            .map(|ms| Instant::now() + Duration::from_millis(ms));
        self.log.info(
            "loop_started",
            None,
            json!({
                "directory": self.cfg.monitor.directory.display().to_string(),
                "interval_ms": self.cfg.monitor.interval_ms,
                "horizon_ms": self.cfg.monitor.horizon_ms,
            }),
        );
        let watcher = tokio::spawn(watch_directory(
            self.clone(),
            queue_tx,
            stop_rx,
            deadline,
        ));

        let mut summary = RunSummary::default();
        let permits = Arc::new(Semaphore::new(self.cfg.max_in_flight));
        let mut workers = JoinSet::new();
        let mut shutdown = std::pin::pin!(shutdown);
        let mut stopping = false;
        loop {
            tokio::select! {
                _ = &mut shutdown, if !stopping => {
                    stopping = true;
                    self.log.info("shutdown_requested", None, json!({"in_flight": workers.len()}));
                    let _ = stop_tx.send(true);
                }
                doc = queue_rx.recv() => {
                    let Some(doc) = doc else { break };
                    summary.detected += 1;
                    let permit = permits.clone().acquire_owned().await.expect("semaphore open");
                    let this = self.clone();
                    workers.spawn(async move {
                        let _permit = permit;
                        this.process_document(&doc).await
                    });
                }
                Some(joined) = workers.join_next() => self.settle(joined, &mut summary, &results),
            }
        }
        while let Some(joined) = workers.join_next().await {
            self.settle(joined, &mut summary, &results);
        }
        summary.ignored = watcher.await.unwrap_or(0);
        self.log.info("loop_stopped", None, json!(summary));
        summary
    }

    fn settle(
        &self,
        joined: Result<PipelineResult, tokio::task::JoinError>,
        summary: &mut RunSummary,
        results: &Option<mpsc::UnboundedSender<PipelineResult>>,
    ) {
        match joined {
            Ok(result) => {
                match result.outcome {
                    PipelineOutcome::Consensus { .. } => summary.completed += 1,
                    PipelineOutcome::Failed { .. } => summary.failed += 1,
                    PipelineOutcome::AlreadyPersisted => summary.skipped += 1,
                }
                if let Some(tx) = results {
                    let _ = tx.send(result);
                }
            }
            Err(e) => {
                summary.panicked += 1;
                self.log.error("worker_panicked", None, json!({"error": e.to_string()}));
            }
        }
    }
}

fn failed_run(done: Instant, engine_id: &str, status: CallStatus, latency_ms: u64) -> EngineRun {
    EngineRun {
        extraction_done: done,
        structuring: None,
        reports: vec![BallotReport {
            engine_id: engine_id.to_owned(),
            structurer_id: None,
            status,
            latency_ms,
        }],
        ballots: Vec::new(),
    }
}

fn finished_run(extraction_done: Instant, ballots: Vec<Ballot>) -> EngineRun {
    EngineRun {
        extraction_done,
        structuring: Some((extraction_done, Instant::now())),
        reports: ballots
            .iter()
            .map(|b| BallotReport {
                engine_id: b.engine_id.clone(),
                structurer_id: Some(b.structurer_id.clone()),
                status: b.status.clone(),
                latency_ms: b.latency_ms,
            })
            .collect(),
        ballots,
    }
}

/// The poller: scans every interval and feeds the queue, blocking when it
/// is full. Returns the number of ignored non-image files.
async fn watch_directory(
    pipeline: Arc<Pipeline>,
    queue: mpsc::Sender<DocumentFile>,
    mut stop: signal::Receiver<bool>,
    deadline: Option<Instant>,
) -> usize {
    let log = &pipeline.log;
    let interval = Duration::from_millis(pipeline.cfg.monitor.interval_ms);
    let mut state = pipeline.cfg.monitor.clone();
    let mut ignored = 0;
    let mut next_tick = Instant::now();
    loop {
        if *stop.borrow() || deadline.is_some_and(|d| Instant::now() >= d) {
            break;
        }
        match watch::scan(&state) {
            Ok(outcome) => {
                for path in &outcome.ignored {
                    ignored += 1;
                    log.info(
                        "ignored_non_image",
                        None,
                        json!({"path": path.display().to_string()}),
                    );
                }
                for path in &outcome.deferred {
                    log.debug("deferred_unstable", None, json!({"path": path.display().to_string()}));
                }
                state = outcome.next_state;
                for doc in outcome.new_documents {
                    log.info(
                        "document_detected",
                        Some(&doc.id),
                        json!({"path": doc.path.display().to_string()}),
                    );
                    if queue.send(doc).await.is_err() {
                        return ignored;
                    }
                }
            }
            Err(e) => log.warn("scan_failed", None, json!({"error": e.to_string()})),
        }
        next_tick += interval;
        let wake = match deadline {
            Some(d) => next_tick.min(d),
            None => next_tick,
        };
        tokio::select! {
            _ = sleep_until(wake) => {}
            _ = stop.changed() => {}
        }
    }
    ignored
}

#[cfg(test)]
mod tests;
