//! Deterministic mock backends driven by sidecar truth files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::noise::{corrupt_record, stream_key, FlatRecord, NoiseModel};
use crate::model::DocumentId;

/// Sidecar file name for a document.
pub fn sidecar_name(id: &DocumentId) -> String {
    format!("{id}.truth.json")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockEngineSpec {
    /// Directory holding `<document_id>.truth.json` sidecars.
    pub ground_truth_dir: PathBuf,
    #[serde(default)]
    pub noise: NoiseModel,
    #[serde(default)]
    pub latency_ms: u64,
    /// Corruption stream name; engines sharing a stream make identical
    /// mistakes. Defaults to the engine id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stream: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockStructurerSpec {
    /// Applied to the parsed record, keyed per (document, engine, structurer).
    #[serde(default)]
    pub noise: NoiseModel,
    #[serde(default)]
    pub latency_ms: u64,
}

/// Reads a sidecar truth file as a flat record. Scalar values are kept as
/// their text; strings verbatim, others as JSON text.
pub fn read_sidecar(dir: &Path, id: &DocumentId) -> Result<FlatRecord, String> {
    let path = dir.join(sidecar_name(id));
    let text = std::fs::read_to_string(&path)
        .map_err(|e| format!("cannot read sidecar {}: {e}", path.display()))?;
    parse_sidecar(&text).map_err(|e| format!("{}: {e}", path.display()))
}

pub fn parse_sidecar(text: &str) -> Result<FlatRecord, String> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| format!("malformed sidecar: {e}"))?;
    let serde_json::Value::Object(map) = value else {
        return Err("sidecar is not a JSON object".into());
    };
    map.into_iter()
        .map(|(k, v)| match v {
            serde_json::Value::String(s) => Ok((k, s)),
            serde_json::Value::Array(_) | serde_json::Value::Object(_) => {
                Err(format!("sidecar field {k:?} is not a scalar"))
            }
            other => Ok((k, other.to_string())),
        })
        .collect()
}

/// Noisy text for one (document, engine) pair.
pub fn mock_extract(spec: &MockEngineSpec, engine_id: &str, doc: &DocumentId) -> Result<String, String> {
    let truth = read_sidecar(&spec.ground_truth_dir, doc)?;
    let stream = spec.stream.as_deref().unwrap_or(engine_id);
    let key = stream_key(&[doc.as_str(), stream]);
    Ok(corrupt_record(&truth, &spec.noise, key).0)
}

/// Mock structurer grammar: one `key: value` per line, split at the first
/// colon, both sides trimmed. Lines without a colon are ignored and later
/// duplicates win.
pub fn parse_key_values(text: &str) -> FlatRecord {
    let mut record = FlatRecord::new();
    for line in text.lines() {
        if let Some((key, value)) = line.split_once(':') {
            record.insert(key.trim().to_owned(), value.trim().to_owned());
        }
    }
    record
}

/// JSON object text produced by the mock structurer for one ballot.
pub fn mock_structure(
    spec: &MockStructurerSpec,
    text: &str,
    doc: &DocumentId,
    engine_id: &str,
    structurer_id: &str,
) -> String {
    let mut record = parse_key_values(text);
    if !spec.noise.is_identity() {
        let key = stream_key(&[doc.as_str(), engine_id, structurer_id]);
        record = corrupt_record(&record, &spec.noise, key).1;
    }
    serde_json::to_string(&record).expect("string map serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_value_grammar() {
        let rec = parse_key_values("vendor: ACME\nnot a field\ntotal: 1,200.00\nurl: http://x\nvendor: ACME 2\n");
        assert_eq!(rec.len(), 3);
        assert_eq!(rec["vendor"], "ACME 2");
        assert_eq!(rec["url"], "http://x");
        assert_eq!(rec["total"], "1,200.00");
    }

    #[test]
    fn sidecar_scalars() {
        let rec = parse_sidecar(r#"{"a": "x", "b": 2.5, "c": true, "d": null}"#).unwrap();
        assert_eq!(rec["a"], "x");
        assert_eq!(rec["b"], "2.5");
        assert_eq!(rec["c"], "true");
        assert_eq!(rec["d"], "null");
        assert!(parse_sidecar(r#"{"a": [1]}"#).is_err());
        assert!(parse_sidecar("[]").is_err());
    }

    #[test]
    fn structurer_without_noise_is_a_plain_parse() {
        let doc = DocumentId::from_bytes(b"d");
        let json = mock_structure(&MockStructurerSpec::default(), "b: 2\na: 1\n", &doc, "e", "s");
        assert_eq!(json, r#"{"a":"1","b":"2"}"#);
    }

    #[test]
    fn structurer_noise_differs_per_pair() {
        let doc = DocumentId::from_bytes(b"d");
        let spec = MockStructurerSpec {
            noise: NoiseModel::with_error_rate(0.5, 1000, 1),
            latency_ms: 0,
        };
        let text: String = (0..40).map(|i| format!("f{i}: v{i}\n")).collect();
        let a = mock_structure(&spec, &text, &doc, "e1", "s1");
        let b = mock_structure(&spec, &text, &doc, "e1", "s2");
        let c = mock_structure(&spec, &text, &doc, "e2", "s1");
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, mock_structure(&spec, &text, &doc, "e1", "s1"));
    }
}
