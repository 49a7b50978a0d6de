//! Accuracy and latency benchmark over a synthetic corpus with mock
//! backends.
//!
//! Each configuration runs the real pipeline (first `engines` engines and
//! first `structurers` structurers of the spec) over every document and
//! scores the final output against the truth sidecar: a field counts as
//! correct when the consensus holds the truth's canonical value at the
//! truth's key path.
//!
//! With `clock: virtual` (the default) the run uses a paused tokio clock, so
//! simulated latencies cost no real time and the report, wall-clock columns
//! included, is byte-for-byte reproducible.

mod corpus;
mod oracle;

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use corpus::{generate_corpus, placeholder_png, truth_record, IMAGES_DIR, TRUTH_DIR};
pub use oracle::{analytic_vote_accuracy, OracleError, TieModel};

use crate::adapters::{parse_sidecar, read_sidecar, MockEngineSpec, MockStructurerSpec, NoiseModel};
use crate::canon::{canonicalize, CanonicalFieldMap};
use crate::events::Logger;
use crate::model::{
    DocumentFile, DocumentId, EngineBackend, EngineDescriptor, Granularity, MediaType,
    MonitorState, StructurerBackend, StructurerDescriptor, TieBreak, VotingConfig,
};
use crate::pipeline::{Execution, Pipeline, PipelineConfig, DEFAULT_QUEUE_CAPACITY};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("invalid bench spec: {0}")]
    SpecInvalid(String),
    #[error("corpus target {0} is not empty")]
    TargetNotEmpty(PathBuf),
    #[error("existing corpus at {0} was generated from a different spec")]
    CorpusMismatch(PathBuf),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{0}")]
    Other(String),
}

impl BenchError {
    fn io(path: &Path, source: io::Error) -> Self {
        BenchError::Io {
            path: path.to_owned(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Clock {
    /// Paused tokio clock: latencies are simulated, timings reproducible.
    #[default]
    Virtual,
    /// Wall time.
    Real,
}

/// One mock backend. The noise seed is combined with the spec seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchBackend {
    pub id: String,
    #[serde(default)]
    pub noise: NoiseModel,
    #[serde(default)]
    pub latency_ms: u64,
    /// Engines naming the same stream make identical mistakes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stream: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfiguration {
    pub label: String,
    pub engines: usize,
    pub structurers: usize,
    #[serde(default)]
    pub voting: VotingConfig,
    #[serde(default)]
    pub execution: Execution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub name: String,
    pub seed: u64,
    pub n_documents: usize,
    pub fields_per_document: usize,
    pub engines: Vec<BenchBackend>,
    pub structurers: Vec<BenchBackend>,
    pub configurations: Vec<BenchConfiguration>,
    #[serde(default)]
    pub clock: Clock,
}

impl BenchSpec {
    pub fn validate(&self) -> Result<(), BenchError> {
        let invalid = |m: String| Err(BenchError::SpecInvalid(m));
        if self.n_documents == 0 {
            return invalid("n_documents must be at least 1".into());
        }
        if self.fields_per_document == 0 {
            return invalid("fields_per_document must be at least 1".into());
        }
        if self.configurations.is_empty() {
            return invalid("at least one configuration is required".into());
        }
        for b in self.engines.iter().chain(&self.structurers) {
            if let Err(m) = b.noise.validate() {
                return invalid(format!("backend {}: {m}", b.id));
            }
        }
        let mut labels = std::collections::BTreeSet::new();
        for c in &self.configurations {
            let safe = !c.label.is_empty()
                && c.label
                    .bytes()
                    .all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_');
            if !safe {
                return invalid(format!(
                    "configuration label {:?} must be ASCII letters, digits, '-' or '_'",
                    c.label
                ));
            }
            if !labels.insert(&c.label) {
                return invalid(format!("duplicate configuration label {:?}", c.label));
            }
            if c.engines == 0 || c.engines > self.engines.len() {
                return invalid(format!(
                    "{}: engine count {} not within 1..={}",
                    c.label,
                    c.engines,
                    self.engines.len()
                ));
            }
            if c.structurers == 0 || c.structurers > self.structurers.len() {
                return invalid(format!(
                    "{}: structurer count {} not within 1..={}",
                    c.label,
                    c.structurers,
                    self.structurers.len()
                ));
            }
        }
        Ok(())
    }
}

/// Analytic prediction attached to a configuration whose ballots are
/// independent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OraclePrediction {
    pub n_ballots: usize,
    pub q: f64,
    pub error_value_space: u32,
    pub quorum: usize,
    pub tie_model: TieModel,
    pub field_accuracy: f64,
    /// Binomial standard error of the empirical field accuracy.
    pub sigma: f64,
    pub within_3_sigma: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigurationReport {
    pub label: String,
    pub engines: usize,
    pub structurers: usize,
    pub voting: bool,
    pub granularity: Granularity,
    pub execution: Execution,
    pub scored_fields: usize,
    pub correct_fields: usize,
    pub field_accuracy: f64,
    pub correct_documents: usize,
    pub document_accuracy: f64,
    pub failed_documents: usize,
    pub mean_wall_clock_ms: f64,
    pub oracle: Option<OraclePrediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub name: String,
    pub seed: u64,
    pub n_documents: usize,
    pub fields_per_document: usize,
    pub clock: Clock,
    pub configurations: Vec<ConfigurationReport>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct CorpusManifest {
    seed: u64,
    n_documents: usize,
    fields_per_document: usize,
}

/// Generates the corpus under `work_dir/corpus` unless an identical one is
/// already there, runs every configuration, and writes
/// `bench_report.json` and `bench_report.md` into `work_dir`.
///
/// Builds its own single-threaded runtime; call it from synchronous code.
pub fn run_benchmark(spec: &BenchSpec, work_dir: &Path, log: &Logger) -> Result<BenchReport, BenchError> {
    spec.validate()?;
    let corpus = prepare_corpus(spec, work_dir)?;
    let runtime = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .start_paused(spec.clock == Clock::Virtual)
        .build()
        .map_err(|e| BenchError::Other(format!("runtime: {e}")))?;

    let documents = load_documents(&corpus)?;
    let truth_dir = corpus.join(TRUTH_DIR);
    let truths: Vec<CanonicalFieldMap> = documents
        .iter()
        .map(|d| truth_fields(&truth_dir, &d.id))
        .collect::<Result<_, _>>()?;

    let mut configurations = Vec::new();
    for configuration in &spec.configurations {
        let out = work_dir.join("runs").join(&configuration.label);
        if out.exists() {
            fs::remove_dir_all(&out).map_err(|e| BenchError::io(&out, e))?;
        }
        let cfg = pipeline_config(spec, configuration, &corpus, &out);
        let pipeline = Pipeline::new(cfg, log.clone()).map_err(|e| BenchError::SpecInvalid(e.to_string()))?;
        log.info(
            "bench_configuration",
            None,
            serde_json::json!({"label": configuration.label, "documents": documents.len()}),
        );
        let report = runtime.block_on(async {
            let mut score = Score::default();
            for (doc, truth) in documents.iter().zip(&truths) {
                let result = pipeline.process_document(doc).await;
                score.add(truth, result.vote().map(|v| &v.fields), result.timings.total_ms);
            }
            score
        });
        pipeline
            .store()
            .render_report()
            .map_err(|e| BenchError::Other(e.to_string()))?;
        configurations.push(report.finish(spec, configuration));
    }

    let report = BenchReport {
        name: spec.name.clone(),
        seed: spec.seed,
        n_documents: spec.n_documents,
        fields_per_document: spec.fields_per_document,
        clock: spec.clock,
        configurations,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    let json_path = work_dir.join("bench_report.json");
    fs::write(&json_path, json).map_err(|e| BenchError::io(&json_path, e))?;
    let md_path = work_dir.join("bench_report.md");
    fs::write(&md_path, render_bench_report(&report)).map_err(|e| BenchError::io(&md_path, e))?;
    Ok(report)
}

fn prepare_corpus(spec: &BenchSpec, work_dir: &Path) -> Result<PathBuf, BenchError> {
    let corpus = work_dir.join("corpus");
    let manifest_path = work_dir.join("corpus.json");
    let manifest = CorpusManifest {
        seed: spec.seed,
        n_documents: spec.n_documents,
        fields_per_document: spec.fields_per_document,
    };
    if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path).map_err(|e| BenchError::io(&manifest_path, e))?;
        let existing: CorpusManifest =
            serde_json::from_str(&text).map_err(|_| BenchError::CorpusMismatch(corpus.clone()))?;
        if existing != manifest {
            return Err(BenchError::CorpusMismatch(corpus));
        }
        return Ok(corpus);
    }
    generate_corpus(&corpus, spec.n_documents, spec.fields_per_document, spec.seed)?;
    let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, body).map_err(|e| BenchError::io(&manifest_path, e))?;
    Ok(corpus)
}

fn load_documents(corpus: &Path) -> Result<Vec<DocumentFile>, BenchError> {
    let images = corpus.join(IMAGES_DIR);
    let mut paths: Vec<PathBuf> = fs::read_dir(&images)
        .map_err(|e| BenchError::io(&images, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|path| {
            let bytes = fs::read(&path).map_err(|e| BenchError::io(&path, e))?;
            Ok(DocumentFile {
                id: DocumentId::from_bytes(&bytes),
                path,
                detected_at: 0,
                media_type: MediaType::Png,
            })
        })
        .collect()
}

/// The truth as the pipeline would see it: scalars as text, canonicalized.
pub fn truth_fields(truth_dir: &Path, id: &DocumentId) -> Result<CanonicalFieldMap, BenchError> {
    let record = read_sidecar(truth_dir, id).map_err(BenchError::Other)?;
    truth_from_record(&record)
}

fn truth_from_record(record: &crate::adapters::FlatRecord) -> Result<CanonicalFieldMap, BenchError> {
    let json = serde_json::to_string(record).expect("record serializes");
    canonicalize(&json).map_err(|e| BenchError::Other(format!("truth does not canonicalize: {e}")))
}

/// Parses a sidecar text into its canonical truth.
pub fn truth_from_sidecar(text: &str) -> Result<CanonicalFieldMap, BenchError> {
    truth_from_record(&parse_sidecar(text).map_err(BenchError::Other)?)
}

fn pipeline_config(spec: &BenchSpec, c: &BenchConfiguration, corpus: &Path, out: &Path) -> PipelineConfig {
    let seeded = |noise: &NoiseModel| NoiseModel {
        seed: noise.seed ^ spec.seed,
        ..*noise
    };
    let engines = spec.engines[..c.engines]
        .iter()
        .enumerate()
        .map(|(i, b)| EngineDescriptor {
            engine_id: b.id.clone(),
            backend: EngineBackend::Mock(MockEngineSpec {
                ground_truth_dir: corpus.join(TRUTH_DIR),
                noise: seeded(&b.noise),
                latency_ms: b.latency_ms,
                stream: b.stream.clone(),
            }),
            timeout_ms: 3_600_000,
            priority: i as u32 + 1,
            inter_call_delay_ms: 0,
        })
        .collect();
    let structurers = spec.structurers[..c.structurers]
        .iter()
        .enumerate()
        .map(|(i, b)| StructurerDescriptor {
            structurer_id: b.id.clone(),
            backend: StructurerBackend::Mock(MockStructurerSpec {
                noise: seeded(&b.noise),
                latency_ms: b.latency_ms,
            }),
            timeout_ms: 3_600_000,
            priority: i as u32 + 1,
            inter_call_delay_ms: 0,
        })
        .collect();
    PipelineConfig {
        engines,
        structurers,
        voting: c.voting.clone(),
        output_dir: out.to_owned(),
        audit: false,
        monitor: MonitorState::new(corpus.join(IMAGES_DIR)),
        max_in_flight: 1,
        queue_capacity: DEFAULT_QUEUE_CAPACITY,
        execution: c.execution,
    }
}

#[derive(Debug, Default)]
struct Score {
    scored: usize,
    correct: usize,
    documents: usize,
    correct_documents: usize,
    failed: usize,
    wall_clock_ms: u64,
}

impl Score {
    fn add(&mut self, truth: &CanonicalFieldMap, output: Option<&CanonicalFieldMap>, wall_clock_ms: u64) {
        self.documents += 1;
        self.wall_clock_ms += wall_clock_ms;
        self.scored += truth.len();
        let Some(output) = output else {
            self.failed += 1;
            return;
        };
        let right = truth
            .iter()
            .filter(|(path, value)| output.get(path) == Some(value))
            .count();
        self.correct += right;
        if right == truth.len() {
            self.correct_documents += 1;
        }
    }

    fn finish(self, spec: &BenchSpec, c: &BenchConfiguration) -> ConfigurationReport {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let field_accuracy = ratio(self.correct, self.scored);
        let oracle = prediction(spec, c).map(|(n, q, v, quorum, tie_model, p)| {
            let sigma = (p * (1.0 - p) / self.scored.max(1) as f64).sqrt();
            OraclePrediction {
                n_ballots: n,
                q,
                error_value_space: v,
                quorum,
                tie_model,
                field_accuracy: p,
                sigma,
                // A tiny absolute slack absorbs float rounding when p is 0 or 1.
                within_3_sigma: (field_accuracy - p).abs() <= 3.0 * sigma + 1e-12,
            }
        });
        ConfigurationReport {
            label: c.label.clone(),
            engines: c.engines,
            structurers: c.structurers,
            voting: c.voting.enabled,
            granularity: c.voting.granularity,
            execution: c.execution,
            scored_fields: self.scored,
            correct_fields: self.correct,
            field_accuracy,
            correct_documents: self.correct_documents,
            document_accuracy: ratio(self.correct_documents, self.documents),
            failed_documents: self.failed,
            mean_wall_clock_ms: self.wall_clock_ms as f64 / self.documents.max(1) as f64,
            oracle,
        }
    }
}

/// Oracle inputs when every ballot's field is an independent draw: value
/// errors only (no drops or renames), noise at exactly one stage, and no
/// shared engine streams. Field-level voting only.
fn prediction(spec: &BenchSpec, c: &BenchConfiguration) -> Option<(usize, f64, u32, usize, TieModel, f64)> {
    if c.voting.granularity != Granularity::Field {
        return None;
    }
    let engines = &spec.engines[..c.engines];
    let structurers = &spec.structurers[..c.structurers];
    let value_only = |n: &NoiseModel| n.drop_rate == 0.0 && n.rename_rate == 0.0;
    if !engines.iter().chain(structurers).all(|b| value_only(&b.noise)) {
        return None;
    }
    let engine_noise = engines.iter().any(|b| !b.noise.is_identity());
    let structurer_noise = structurers.iter().any(|b| !b.noise.is_identity());
    let noisy: &[BenchBackend] = match (engine_noise, structurer_noise) {
        (false, false) => structurers,
        (true, false) if c.structurers == 1 || !c.voting.enabled => {
            let mut streams = std::collections::BTreeSet::new();
            if !engines.iter().all(|b| b.stream.as_ref().map_or(true, |s| streams.insert(s))) {
                return None;
            }
            engines
        }
        (false, true) => structurers,
        _ => return None,
    };
    let first = &noisy[0].noise;
    let uniform = noisy.iter().all(|b| {
        b.noise.field_error_rate == first.field_error_rate
            && b.noise.error_value_space == first.error_value_space
    });
    if !uniform {
        return None;
    }
    let q = 1.0 - first.field_error_rate;
    let v = first.error_value_space;
    let (n, quorum) = if c.voting.enabled {
        let n = c.engines * c.structurers;
        (n, c.voting.inclusion_quorum.resolve(n))
    } else {
        (1, 1)
    };
    // Wrong values extend the true text, so the truth sorts first.
    let tie = match c.voting.tie_break {
        TieBreak::Priority => TieModel::Priority,
        TieBreak::Lexicographic => TieModel::For,
    };
    let p = analytic_vote_accuracy(n, q, v, quorum, tie).ok()?;
    Some((n, q, v, quorum, tie, p))
}

pub fn render_bench_report(report: &BenchReport) -> String {
    let mut out = String::new();
    let clock = match report.clock {
        Clock::Virtual => "virtual",
        Clock::Real => "real",
    };
    let _ = writeln!(out, "# Benchmark: {}\n", report.name);
    let _ = writeln!(
        out,
        "seed {}, {} documents x {} fields, {clock} clock\n",
        report.seed, report.n_documents, report.fields_per_document
    );
    out.push_str("| configuration | engines x structurers | vote | execution | field accuracy | document accuracy | failed | mean wall-clock ms | predicted field accuracy |\n");
    out.push_str("|---|---|---|---|---:|---:|---:|---:|---:|\n");
    for c in &report.configurations {
        let vote = match (c.voting, c.granularity) {
            (false, _) => "off",
            (true, Granularity::Field) => "field",
            (true, Granularity::Document) => "document",
        };
        let execution = match c.execution {
            Execution::Pipelined => "pipelined",
            Execution::Sequential => "sequential",
        };
        let predicted = c
            .oracle
            .as_ref()
            .map_or("-".to_owned(), |o| format!("{:.6}", o.field_accuracy));
        let _ = writeln!(
            out,
            "| {} | {}x{} | {} | {} | {:.4} ({}/{}) | {:.4} | {} | {:.1} | {} |",
            c.label,
            c.engines,
            c.structurers,
            vote,
            execution,
            c.field_accuracy,
            c.correct_fields,
            c.scored_fields,
            c.document_accuracy,
            c.failed_documents,
            c.mean_wall_clock_ms,
            predicted
        );
    }
    out
}

/// Reads a spec file.
pub fn load_spec(path: &Path) -> Result<BenchSpec, BenchError> {
    let text = fs::read_to_string(path).map_err(|e| BenchError::io(path, e))?;
    let spec: BenchSpec = serde_json::from_str(&text)
        .map_err(|e| BenchError::SpecInvalid(format!("{}: {e}", path.display())))?;
    spec.validate()?;
    Ok(spec)
}

/// Parses a spec document held in memory.
pub fn parse_spec(text: &str) -> Result<BenchSpec, BenchError> {
    let spec: BenchSpec = serde_json::from_str(text).map_err(|e| BenchError::SpecInvalid(e.to_string()))?;
    spec.validate()?;
    Ok(spec)
}

/// Shipped presets, by name.
pub fn preset(name: &str) -> Option<&'static str> {
    match name {
        "tables" => Some(include_str!("../../presets/tables.json")),
        "correlated" => Some(include_str!("../../presets/correlated.json")),
        _ => None,
    }
}
