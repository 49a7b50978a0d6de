//! Clients for extraction engines and structurer backends.
//!
//! Wire contracts:
//! - subprocess engine: argv = configured command + document path; stdout is
//!   the UTF-8 text; exit status 0 means success
//! - HTTP engine: `POST` the document bytes as `application/octet-stream`,
//!   expect `200` with `{"text": string}`
//! - HTTP structurer: `POST {"text": string}` as `application/json`, expect
//!   `200` with `{"json": object}`
//!
//! No call ever returns an error: timeouts, crashes, bad statuses and
//! malformed bodies all become a [`CallStatus`] so the pipeline can keep the
//! surviving ballots.

mod mock;
mod noise;

use std::process::Stdio;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tokio::process::Command;
use tokio::sync::Mutex;
use tokio::time::{sleep_until, timeout, Instant};

pub use mock::{
    mock_extract, mock_structure, parse_key_values, parse_sidecar, read_sidecar, sidecar_name,
    MockEngineSpec, MockStructurerSpec,
};
pub use noise::{
    corrupt_record, field_seed, render_record, stream_key, unit, wrong_value, FlatRecord,
    NoiseModel, RENAME_SUFFIX,
};

use crate::canon;
use crate::model::{
    ballot_priority, Ballot, CallStatus, CanonicalFieldMap, DocumentFile, EngineBackend,
    EngineDescriptor, Extraction, StructurerBackend, StructurerDescriptor,
};

const STDERR_EXCERPT: usize = 200;

/// Serializes dispatches to one backend so consecutive calls start at least
/// `delay` apart.
#[derive(Debug)]
struct Gate {
    delay: Duration,
    last: Mutex<Option<Instant>>,
}

impl Gate {
    fn new(delay_ms: u64) -> Self {
        Gate {
            delay: Duration::from_millis(delay_ms),
            last: Mutex::new(None),
        }
    }

    async fn pass(&self) {
        if self.delay.is_zero() {
            return;
        }
        let mut last = self.last.lock().await;
        if let Some(prev) = *last {
            sleep_until(prev + self.delay).await;
        }
        *last = Some(Instant::now());
    }
}

/// Request body sent to HTTP structurers.
#[derive(Debug, Serialize, Deserialize)]
pub struct StructureRequest {
    pub text: String,
    /// Reserved; never populated by this crate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema_hint: Option<serde_json::Value>,
}

#[derive(Debug, Deserialize)]
struct TextResponse {
    text: String,
}

#[derive(Debug, Deserialize)]
struct JsonResponse<'a> {
    #[serde(borrow)]
    json: &'a serde_json::value::RawValue,
}

fn excerpt(text: &str) -> String {
    let trimmed = text.trim();
    match trimmed.char_indices().nth(STDERR_EXCERPT) {
        Some((cut, _)) => format!("{}...", &trimmed[..cut]),
        None => trimmed.to_owned(),
    }
}

fn elapsed_ms(start: Instant) -> u64 {
    start.elapsed().as_millis() as u64
}

#[derive(Debug)]
pub struct EngineClient {
    pub descriptor: EngineDescriptor,
    http: reqwest::Client,
    gate: Gate,
}

impl EngineClient {
    pub fn new(descriptor: EngineDescriptor, http: reqwest::Client) -> Self {
        let gate = Gate::new(descriptor.inter_call_delay_ms);
        EngineClient {
            descriptor,
            http,
            gate,
        }
    }

    pub fn id(&self) -> &str {
        &self.descriptor.engine_id
    }

    /// Runs the engine on one document.
    pub async fn extract_text(&self, doc: &DocumentFile) -> Extraction {
        self.gate.pass().await;
        let start = Instant::now();
        let limit = Duration::from_millis(self.descriptor.timeout_ms);
        let (text, status) = match timeout(limit, self.call(doc)).await {
            Ok(Ok(text)) => (text, CallStatus::Ok),
            Ok(Err(reason)) => (String::new(), CallStatus::Failed(reason)),
            Err(_) => (String::new(), CallStatus::Timeout),
        };
        Extraction {
            document_id: doc.id.clone(),
            engine_id: self.descriptor.engine_id.clone(),
            text,
            latency_ms: elapsed_ms(start),
            status,
        }
    }

    async fn call(&self, doc: &DocumentFile) -> Result<String, String> {
        match &self.descriptor.backend {
            EngineBackend::Subprocess(argv) => run_subprocess(argv, doc).await,
            EngineBackend::Http(url) => {
                let bytes = tokio::fs::read(&doc.path)
                    .await
                    .map_err(|e| format!("cannot read {}: {e}", doc.path.display()))?;
                let response = self
                    .http
                    .post(url)
                    .header(reqwest::header::CONTENT_TYPE, "application/octet-stream")
                    .body(bytes)
                    .send()
                    .await
                    .map_err(|e| format!("request failed: {e}"))?;
                let status = response.status();
                if status != reqwest::StatusCode::OK {
                    return Err(format!("http status {}", status.as_u16()));
                }
                let body = response
                    .bytes()
                    .await
                    .map_err(|e| format!("reading body: {e}"))?;
                serde_json::from_slice::<TextResponse>(&body)
                    .map(|r| r.text)
                    .map_err(|e| format!("malformed response: {e}"))
            }
            EngineBackend::Mock(spec) => {
                let text = mock_extract(spec, &self.descriptor.engine_id, &doc.id)?;
                tokio::time::sleep(Duration::from_millis(spec.latency_ms)).await;
                Ok(text)
            }
        }
    }
}

async fn run_subprocess(argv: &[String], doc: &DocumentFile) -> Result<String, String> {
    let (program, args) = argv
        .split_first()
        .ok_or_else(|| "empty subprocess command".to_owned())?;
    let output = Command::new(program)
        .args(args)
        .arg(&doc.path)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .kill_on_drop(true)
        .output()
        .await
        .map_err(|e| format!("cannot spawn {program}: {e}"))?;
    if !output.status.success() {
        let stderr = String::from_utf8_lossy(&output.stderr);
        return Err(format!("{}: {}", output.status, excerpt(&stderr)));
    }
    String::from_utf8(output.stdout).map_err(|_| "stdout is not valid UTF-8".to_owned())
}

#[derive(Debug)]
pub struct StructurerClient {
    pub descriptor: StructurerDescriptor,
    http: reqwest::Client,
    gate: Gate,
}

impl StructurerClient {
    pub fn new(descriptor: StructurerDescriptor, http: reqwest::Client) -> Self {
        let gate = Gate::new(descriptor.inter_call_delay_ms);
        StructurerClient {
            descriptor,
            http,
            gate,
        }
    }

    pub fn id(&self) -> &str {
        &self.descriptor.structurer_id
    }

    /// Turns one extraction into a ballot. `engine_priority` feeds the
    /// ballot's tie-break weight.
    pub async fn structure_text(&self, extraction: &Extraction, engine_priority: u32) -> Ballot {
        let mut ballot = Ballot {
            document_id: extraction.document_id.clone(),
            engine_id: extraction.engine_id.clone(),
            structurer_id: self.descriptor.structurer_id.clone(),
            priority: ballot_priority(engine_priority, self.descriptor.priority),
            raw_json: String::new(),
            fields: CanonicalFieldMap::new(),
            latency_ms: 0,
            status: CallStatus::Ok,
        };
        if !extraction.status.is_ok() {
            ballot.status = CallStatus::Failed("extraction did not succeed".into());
            return ballot;
        }
        self.gate.pass().await;
        let start = Instant::now();
        let limit = Duration::from_millis(self.descriptor.timeout_ms);
        match timeout(limit, self.call(extraction)).await {
            Ok(Ok(raw)) => {
                match canon::canonicalize(&raw) {
                    Ok(fields) => ballot.fields = fields,
                    Err(e) => ballot.status = CallStatus::InvalidJson(e.to_string()),
                }
                ballot.raw_json = raw;
            }
            Ok(Err(status)) => ballot.status = status,
            Err(_) => ballot.status = CallStatus::Timeout,
        }
        ballot.latency_ms = elapsed_ms(start);
        ballot
    }

    /// Returns the raw JSON object text, or a terminal status.
    async fn call(&self, extraction: &Extraction) -> Result<String, CallStatus> {
        match &self.descriptor.backend {
            StructurerBackend::Http(url) => {
                let request = StructureRequest {
                    text: extraction.text.clone(),
                    schema_hint: None,
                };
                let response = self
                    .http
                    .post(url)
                    .json(&request)
                    .send()
                    .await
                    .map_err(|e| CallStatus::Failed(format!("request failed: {e}")))?;
                let status = response.status();
                if status != reqwest::StatusCode::OK {
                    return Err(CallStatus::Failed(format!("http status {}", status.as_u16())));
                }
                let body = response
                    .text()
                    .await
                    .map_err(|e| CallStatus::Failed(format!("reading body: {e}")))?;
                let parsed: JsonResponse<'_> = serde_json::from_str(&body)
                    .map_err(|e| CallStatus::InvalidJson(format!("malformed response: {e}")))?;
                Ok(parsed.json.get().to_owned())
            }
            StructurerBackend::Mock(spec) => {
                let raw = mock_structure(
                    spec,
                    &extraction.text,
                    &extraction.document_id,
                    &extraction.engine_id,
                    &self.descriptor.structurer_id,
                );
                tokio::time::sleep(Duration::from_millis(spec.latency_ms)).await;
                Ok(raw)
            }
        }
    }
}
