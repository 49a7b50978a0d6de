use std::fs;

use serde_json::Value;

use super::*;
use crate::adapters::{sidecar_name, MockEngineSpec, MockStructurerSpec, NoiseModel};
use crate::canon::{canonicalize, render};
use crate::events::Level;
use crate::model::{DocumentId, MediaType};

const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";

struct Fixture {
    _root: tempfile::TempDir,
    inbox: PathBuf,
    truth: PathBuf,
    out: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let root = tempfile::tempdir().unwrap();
        let inbox = root.path().join("inbox");
        let truth = root.path().join("truth");
        let out = root.path().join("out");
        fs::create_dir_all(&inbox).unwrap();
        fs::create_dir_all(&truth).unwrap();
        Fixture { _root: root, inbox, truth, out }
    }

    /// Writes an image into the inbox and its truth sidecar; returns the
    /// document and the truth JSON text.
    fn document(&self, name: &str) -> (DocumentFile, String) {
        let mut bytes = PNG_MAGIC.to_vec();
        bytes.extend_from_slice(name.as_bytes());
        let path = self.inbox.join(name);
        fs::write(&path, &bytes).unwrap();
        let id = DocumentId::from_bytes(&bytes);
        let truth = format!(r#"{{"vendor": "ACME {name}", "total": "1,200.00", "invoice_no": "7"}}"#);
        fs::write(self.truth.join(sidecar_name(&id)), &truth).unwrap();
        let doc = DocumentFile {
            id,
            path,
            detected_at: 0,
            media_type: MediaType::Png,
        };
        (doc, truth)
    }

    fn mock_engine(&self, i: u32, latency_ms: u64) -> EngineDescriptor {
        EngineDescriptor {
            engine_id: format!("engine-{i}"),
            backend: EngineBackend::Mock(MockEngineSpec {
                ground_truth_dir: self.truth.clone(),
                noise: NoiseModel::default(),
                latency_ms,
                stream: None,
            }),
            timeout_ms: 60_000,
            priority: i,
            inter_call_delay_ms: 0,
        }
    }

    fn command_engine(&self, i: u32, argv: &[&str], timeout_ms: u64) -> EngineDescriptor {
        EngineDescriptor {
            engine_id: format!("engine-{i}"),
            backend: EngineBackend::Subprocess(argv.iter().map(|s| s.to_string()).collect()),
            timeout_ms,
            priority: i,
            inter_call_delay_ms: 0,
        }
    }

    fn config(&self, engines: Vec<EngineDescriptor>, structurer_latency_ms: u64) -> PipelineConfig {
        let structurers = (1..=2)
            .map(|i| StructurerDescriptor {
                structurer_id: format!("llm-{i}"),
                backend: StructurerBackend::Mock(MockStructurerSpec {
                    noise: NoiseModel::default(),
                    latency_ms: structurer_latency_ms,
                }),
                timeout_ms: 60_000,
                priority: i,
                inter_call_delay_ms: 0,
            })
            .collect();
        let mut monitor = MonitorState::new(&self.inbox);
        monitor.interval_ms = 500;
        PipelineConfig {
            engines,
            structurers,
            voting: VotingConfig::default(),
            output_dir: self.out.clone(),
            audit: true,
            monitor,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            execution: Execution::Pipelined,
        }
    }

    fn four_mocks(&self, latency_ms: u64) -> Vec<EngineDescriptor> {
        (1..=4).map(|i| self.mock_engine(i, latency_ms)).collect()
    }
}

fn pipeline(cfg: PipelineConfig) -> Pipeline {
    Pipeline::new(cfg, Logger::discard()).unwrap()
}

fn record_lines(out: &Path) -> usize {
    fs::read_to_string(out.join("records.jsonl"))
        .map(|t| t.lines().count())
        .unwrap_or(0)
}

#[tokio::test]
async fn zero_noise_is_unanimous_and_matches_truth() {
    let fx = Fixture::new();
    let (doc, truth) = fx.document("a.png");
    let p = pipeline(fx.config(fx.four_mocks(0), 0));
    let result = p.process_document(&doc).await;
    let vote = result.vote().expect("consensus");
    assert_eq!(vote.n_ballots, 8);
    assert!(!vote.degraded);
    let expected = canonicalize(&truth).unwrap();
    assert_eq!(vote.fields, expected);
    for candidates in vote.tallies.values() {
        assert_eq!(candidates.len(), 1);
    }
    let written = fs::read_to_string(p.store().final_path(&doc.id)).unwrap();
    assert_eq!(written, render(&expected).unwrap());
    assert_eq!(canonicalize(&written).unwrap(), vote.fields);

    let audit = p.store().audit_dir(&doc.id);
    let files = fs::read_dir(&audit).unwrap().count();
    assert_eq!(files, 9);
    assert!(audit.join("ballot_engine-3_llm-2.json").is_file());
    assert!(fs::read_to_string(audit.join("vote_explain.txt")).unwrap().contains("included 8/8"));
    assert_eq!(record_lines(&fx.out), 1);
}

#[tokio::test]
async fn second_run_skips_persisted_document() {
    let fx = Fixture::new();
    let (doc, _) = fx.document("a.png");
    let p = pipeline(fx.config(fx.four_mocks(0), 0));
    assert!(p.process_document(&doc).await.vote().is_some());
    let again = p.process_document(&doc).await;
    assert_eq!(again.outcome, PipelineOutcome::AlreadyPersisted);
    assert_eq!(record_lines(&fx.out), 1);
}

#[tokio::test]
async fn audit_off_writes_no_audit_directory() {
    let fx = Fixture::new();
    let (doc, _) = fx.document("a.png");
    let mut cfg = fx.config(fx.four_mocks(0), 0);
    cfg.audit = false;
    let p = pipeline(cfg);
    assert!(p.process_document(&doc).await.vote().is_some());
    assert!(!fx.out.join("audit").exists());
    assert!(fx.out.join("final").is_dir());
}

#[tokio::test]
async fn timed_out_engines_leave_a_degraded_vote() {
    let fx = Fixture::new();
    let (doc, truth) = fx.document("a.png");
    let engines = vec![
        fx.mock_engine(1, 0),
        fx.command_engine(2, &["sh", "-c", "sleep 5"], 200),
        fx.mock_engine(3, 0),
        fx.command_engine(4, &["sh", "-c", "sleep 5"], 200),
    ];
    let p = pipeline(fx.config(engines, 0));
    let result = p.process_document(&doc).await;
    let vote = result.vote().expect("consensus");
    assert_eq!(vote.n_ballots, 4);
    assert!(vote.degraded);
    assert_eq!(vote.fields, canonicalize(&truth).unwrap());
    let timeouts: Vec<_> = result
        .ballots
        .iter()
        .filter(|b| b.status == CallStatus::Timeout)
        .map(|b| b.engine_id.as_str())
        .collect();
    assert_eq!(timeouts, ["engine-2", "engine-4"]);
    assert!(result.timings.total_ms < 5000);
}

#[tokio::test]
async fn all_engines_failing_is_terminal() {
    let fx = Fixture::new();
    let (doc, _) = fx.document("a.png");
    let engines = (1..=4).map(|i| fx.command_engine(i, &["false"], 5000)).collect();
    let p = pipeline(fx.config(engines, 0));
    let result = p.process_document(&doc).await;
    assert_eq!(
        result.outcome,
        PipelineOutcome::Failed {
            failure: TerminalFailure::InsufficientBallots { got: 0, need: 3 }
        }
    );
    assert!(!p.store().final_path(&doc.id).exists());
    assert!(p.store().audit_dir(&doc.id).join("failure.json").is_file());
    let records = fs::read_to_string(fx.out.join("records.jsonl")).unwrap();
    assert!(records.contains("\"status\":\"failed\""));
}

#[tokio::test(start_paused = true)]
async fn pipelined_wall_clock_is_one_extraction_plus_one_structuring() {
    let fx = Fixture::new();
    let (doc, _) = fx.document("a.png");
    let p = pipeline(fx.config(fx.four_mocks(1000), 500));
    let result = p.process_document(&doc).await;
    assert!(result.vote().is_some());
    let t = result.timings;
    assert_eq!((t.extraction_ms, t.structuring_ms), (1000, 500));
    assert_eq!(t.total_ms, 1500);
    assert!(t.total_ms >= t.extraction_ms.max(t.structuring_ms).max(t.vote_ms));
}

#[tokio::test(start_paused = true)]
async fn sequential_reference_sums_every_call() {
    let fx = Fixture::new();
    let (doc, _) = fx.document("a.png");
    let mut cfg = fx.config(fx.four_mocks(1000), 500);
    cfg.execution = Execution::Sequential;
    let sequential = pipeline(cfg.clone()).process_document(&doc).await;
    assert_eq!(sequential.timings.total_ms, 4 * 1000 + 8 * 500);

    cfg.execution = Execution::Pipelined;
    cfg.output_dir = fx.out.join("second");
    let pipelined = pipeline(cfg).process_document(&doc).await;
    assert_eq!(sequential.vote().unwrap().fields, pipelined.vote().unwrap().fields);
}

#[test]
fn config_validation() {
    let fx = Fixture::new();
    let good = fx.config(fx.four_mocks(0), 0);
    assert!(good.validate().is_ok());

    let mut c = good.clone();
    c.engines.clear();
    assert!(c.validate().is_err());

    let mut c = good.clone();
    c.structurers.clear();
    assert!(c.validate().is_err());

    let mut c = good.clone();
    c.output_dir = fx.inbox.clone();
    assert!(c.validate().is_err());

    let mut c = good.clone();
    c.engines[1].engine_id = "engine-1".into();
    assert!(c.validate().is_err());

    let mut c = good.clone();
    c.engines[0].engine_id = "a/b".into();
    assert!(c.validate().is_err());

    let mut c = good.clone();
    c.voting.inclusion_quorum = Quorum::Fixed(0);
    assert!(c.validate().is_err());

    let mut c = good;
    c.max_in_flight = 0;
    assert!(matches!(Pipeline::new(c, Logger::discard()), Err(PipelineError::ConfigInvalid(_))));
}

#[test]
fn config_json_defaults() {
    let text = r#"{
        "engines": [{"engine_id": "tess", "kind": "subprocess", "target": ["tesseract-wrap"], "timeout_ms": 30000, "priority": 1}],
        "structurers": [{"structurer_id": "llm", "kind": "http", "target": "http://127.0.0.1:9/s", "timeout_ms": 30000, "priority": 1}],
        "output_dir": "out",
        "monitor": {"directory": "inbox"}
    }"#;
    let cfg: PipelineConfig = serde_json::from_str(text).unwrap();
    assert_eq!(cfg.max_in_flight, 2);
    assert_eq!(cfg.queue_capacity, 64);
    assert_eq!(cfg.monitor.interval_ms, 1000);
    assert_eq!(cfg.voting, VotingConfig::default());
    assert_eq!(cfg.execution, Execution::Pipelined);
    assert!(!cfg.audit);
}

#[tokio::test(start_paused = true)]
async fn horizon_without_files_exits_cleanly() {
    let fx = Fixture::new();
    let mut cfg = fx.config(fx.four_mocks(0), 0);
    cfg.monitor.horizon_ms = Some(5000);
    let p = Arc::new(pipeline(cfg));
    let start = Instant::now();
    let summary = p.run_loop(std::future::pending(), None).await;
    assert_eq!(summary, RunSummary::default());
    assert_eq!(start.elapsed(), Duration::from_millis(5000));
}

#[tokio::test(start_paused = true)]
async fn loop_processes_documents_in_detection_order() {
    let fx = Fixture::new();
    let mut cfg = fx.config(fx.four_mocks(100), 100);
    cfg.monitor.horizon_ms = Some(8000);
    let (log, lines) = Logger::memory(Level::Info);
    let p = Arc::new(Pipeline::new(cfg, log).unwrap());

    // Sidecars first, images later: the documents appear at 2 s intervals.
    let staged: Vec<(PathBuf, Vec<u8>)> = ["a.png", "b.png", "c.png"]
        .iter()
        .map(|name| {
            let (doc, _) = fx.document(name);
            let bytes = fs::read(&doc.path).unwrap();
            fs::remove_file(&doc.path).unwrap();
            (doc.path, bytes)
        })
        .collect();
    let dropper = tokio::spawn(async move {
        for (path, bytes) in staged {
            tokio::time::sleep(Duration::from_millis(2000)).await;
            fs::write(path, bytes).unwrap();
        }
    });
    fs::write(fx.inbox.join("notes.txt"), "not an image").unwrap();

    let (tx, mut rx) = mpsc::unbounded_channel();
    let summary = p.run_loop(std::future::pending(), Some(tx)).await;
    dropper.await.unwrap();
    assert_eq!(summary.detected, 3);
    assert_eq!(summary.completed, 3);
    assert_eq!(summary.ignored, 1);

    let mut results = Vec::new();
    while let Ok(r) = rx.try_recv() {
        results.push(r);
    }
    let names: Vec<_> = results
        .iter()
        .map(|r| r.path.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, ["a.png", "b.png", "c.png"]);

    let lines = lines.lock().unwrap();
    let ignored: Vec<&Value> = lines.iter().filter(|l| l["event"] == "ignored_non_image").collect();
    assert_eq!(ignored.len(), 1);
    assert!(ignored[0]["detail"]["path"].as_str().unwrap().ends_with("notes.txt"));
}

#[tokio::test(start_paused = true)]
async fn shutdown_drains_in_flight_documents() {
    let fx = Fixture::new();
    for name in ["a.png", "b.png", "c.png"] {
        fx.document(name);
    }
    let cfg = fx.config(fx.four_mocks(3000), 1000);
    let p = Arc::new(pipeline(cfg));
    let (tx, mut rx) = mpsc::unbounded_channel();
    let shutdown = tokio::time::sleep(Duration::from_millis(100));
    let summary = p.run_loop(shutdown, Some(tx)).await;
    // All three were queued by the first scan; all finish despite the
    // early shutdown.
    assert_eq!(summary.completed, 3);
    let mut n = 0;
    while rx.try_recv().is_ok() {
        n += 1;
    }
    assert_eq!(n, 3);
}
