//! Seeded field-level corruption used by the mock backends.
//!
//! Every field draws from its own ChaCha8 stream, seeded from
//! `(noise.seed ^ stream_key, field key)`, so a field's fate never depends on
//! which other fields are present. Each field consumes exactly four draws in
//! this order: drop, error, wrong-value index, rename.

use std::collections::BTreeMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// A flat `key -> value` record (sidecar truth, mock engine output).
pub type FlatRecord = BTreeMap<String, String>;

/// Suffix appended to a key when it is perturbed.
pub const RENAME_SUFFIX: &str = "_x";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    /// Probability that a surviving field's value is replaced.
    pub field_error_rate: f64,
    /// Probability that a field is omitted entirely.
    pub drop_rate: f64,
    /// Probability that a surviving field's key is perturbed.
    pub rename_rate: f64,
    /// Number of distinct wrong values a corrupted field can take (V).
    pub error_value_space: u32,
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            field_error_rate: 0.0,
            drop_rate: 0.0,
            rename_rate: 0.0,
            error_value_space: 1,
            seed: 0,
        }
    }
}

impl NoiseModel {
    pub fn with_error_rate(field_error_rate: f64, error_value_space: u32, seed: u64) -> Self {
        NoiseModel {
            field_error_rate,
            error_value_space,
            seed,
            ..Self::default()
        }
    }

    pub fn is_identity(&self) -> bool {
        self.field_error_rate == 0.0 && self.drop_rate == 0.0 && self.rename_rate == 0.0
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, p) in [
            ("field_error_rate", self.field_error_rate),
            ("drop_rate", self.drop_rate),
            ("rename_rate", self.rename_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} must be within [0, 1], got {p}"));
            }
        }
        if self.error_value_space == 0 {
            return Err("error_value_space must be at least 1".into());
        }
        Ok(())
    }
}

/// Stable 64-bit key for a tuple of identifiers (first 8 bytes of SHA-256
/// over the NUL-separated parts, little endian).
pub fn stream_key(parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    for (i, part) in parts.iter().enumerate() {
        if i > 0 {
            hasher.update([0u8]);
        }
        hasher.update(part.as_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Seed of the per-field stream.
pub fn field_seed(base: u64, key: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(key.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Uniform draw in [0, 1) from the top 53 bits of a u64.
pub fn unit(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// The `index`-th wrong value for `truth`; distinct from `truth` and from
/// every other index, also after canonicalization.
pub fn wrong_value(truth: &str, index: u64) -> String {
    format!("{truth}~{index}")
}

/// Renders a record as `key: value` lines in key order.
pub fn render_record(record: &FlatRecord) -> String {
    let mut text = String::new();
    for (key, value) in record {
        text.push_str(key);
        text.push_str(": ");
        text.push_str(value);
        text.push('\n');
    }
    text
}

/// Applies `noise` to `truth`; returns the rendered text and the corrupted
/// record. Deterministic in `(noise.seed, stream_key)`.
pub fn corrupt_record(truth: &FlatRecord, noise: &NoiseModel, stream_key: u64) -> (String, FlatRecord) {
    let base = noise.seed ^ stream_key;
    let space = u64::from(noise.error_value_space.max(1));
    let mut out = FlatRecord::new();
    for (key, value) in truth {
        let mut rng = ChaCha8Rng::seed_from_u64(field_seed(base, key));
        let drop = unit(&mut rng) < noise.drop_rate;
        let corrupt = unit(&mut rng) < noise.field_error_rate;
        let index = rng.next_u64() % space;
        let rename = unit(&mut rng) < noise.rename_rate;
        if drop {
            continue;
        }
        let value = if corrupt {
            wrong_value(value, index)
        } else {
            value.clone()
        };
        let key = if rename {
            format!("{key}{RENAME_SUFFIX}")
        } else {
            key.clone()
        };
        out.insert(key, value);
    }
    (render_record(&out), out)
}
