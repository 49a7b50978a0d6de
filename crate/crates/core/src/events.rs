//! Structured log lines: one JSON object per line with `ts`, `level`,
//! `event`, `document_id` and `detail`.

use std::io::Write;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::model::{now_ms, DocumentId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Debug,
    Info,
    Warn,
    Error,
}

impl Level {
    pub fn as_str(self) -> &'static str {
        match self {
            Level::Debug => "debug",
            Level::Info => "info",
            Level::Warn => "warn",
            Level::Error => "error",
        }
    }
}

impl FromStr for Level {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "debug" => Ok(Level::Debug),
            "info" => Ok(Level::Info),
            "warn" | "warning" => Ok(Level::Warn),
            "error" => Ok(Level::Error),
            other => Err(format!("unknown log level {other:?}")),
        }
    }
}

#[derive(Debug, Clone)]
enum Sink {
    Stderr,
    Memory(Arc<Mutex<Vec<Value>>>),
    Discard,
}

/// Cheap to clone; all clones write to the same sink.
#[derive(Debug, Clone)]
pub struct Logger {
    min: Level,
    sink: Sink,
}

impl Logger {
    pub fn stderr(min: Level) -> Self {
        Logger { min, sink: Sink::Stderr }
    }

    pub fn discard() -> Self {
        Logger {
            min: Level::Error,
            sink: Sink::Discard,
        }
    }

    /// Keeps every line in memory; the returned handle sees them as parsed
    /// JSON values.
    pub fn memory(min: Level) -> (Self, Arc<Mutex<Vec<Value>>>) {
        let lines = Arc::new(Mutex::new(Vec::new()));
        let logger = Logger {
            min,
            sink: Sink::Memory(lines.clone()),
        };
        (logger, lines)
    }

    pub fn log(&self, level: Level, event: &str, document: Option<&DocumentId>, detail: Value) {
        if level < self.min || matches!(self.sink, Sink::Discard) {
            return;
        }
        let line = json!({
            "ts": now_ms(),
            "level": level.as_str(),
            "event": event,
            "document_id": document.map(|d| d.as_str()),
            "detail": detail,
        });
        match &self.sink {
            Sink::Stderr => {
                let mut err = std::io::stderr().lock();
                let _ = writeln!(err, "{line}");
            }
            Sink::Memory(lines) => lines.lock().expect("log sink poisoned").push(line),
            Sink::Discard => {}
        }
    }

    pub fn debug(&self, event: &str, document: Option<&DocumentId>, detail: Value) {
        self.log(Level::Debug, event, document, detail);
    }

    pub fn info(&self, event: &str, document: Option<&DocumentId>, detail: Value) {
        self.log(Level::Info, event, document, detail);
    }

    pub fn warn(&self, event: &str, document: Option<&DocumentId>, detail: Value) {
        self.log(Level::Warn, event, document, detail);
    }

    pub fn error(&self, event: &str, document: Option<&DocumentId>, detail: Value) {
        self.log(Level::Error, event, document, detail);
    }
}
