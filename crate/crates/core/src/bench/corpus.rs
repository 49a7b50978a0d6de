//! Synthetic documents: a placeholder PNG per document plus a truth
//! sidecar holding an invoice-like flat record.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{Map, Value};

use super::BenchError;
use crate::adapters::sidecar_name;
use crate::model::DocumentId;

const KEYS: &[&str] = &[
    "vendor",
    "invoice_number",
    "invoice_date",
    "due_date",
    "total",
    "subtotal",
    "tax",
    "currency",
    "po_number",
    "customer",
    "customer_id",
    "payment_terms",
    "line_count",
    "iban",
    "bill_to",
    "ship_to",
    "reference",
    "discount",
];

const COMPANIES: &[&str] = &[
    "ACME Corp",
    "Globex",
    "Initech",
    "Umbrella Ltd",
    "Stark Industries",
    "Wayne Enterprises",
    "Hooli",
    "Vandelay Imports",
];

const CITIES: &[&str] = &["Berlin", "Lagos", "Osaka", "Lima", "Oslo", "Dhaka", "Quito", "Perth"];

pub const IMAGES_DIR: &str = "images";
pub const TRUTH_DIR: &str = "truth";

/// A 1x1 grayscale PNG; `comment` goes into a tEXt chunk before IEND so
/// every document hashes differently.
pub fn placeholder_png(comment: &str) -> Vec<u8> {
    fn chunk(out: &mut Vec<u8>, kind: &[u8; 4], data: &[u8]) {
        out.extend_from_slice(&(data.len() as u32).to_be_bytes());
        let start = out.len();
        out.extend_from_slice(kind);
        out.extend_from_slice(data);
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_be_bytes());
    }
    let mut png = b"\x89PNG\r\n\x1a\n".to_vec();
    // width 1, height 1, bit depth 8, grayscale, deflate, no filter, no interlace
    chunk(&mut png, b"IHDR", &[0, 0, 0, 1, 0, 0, 0, 1, 8, 0, 0, 0, 0]);
    // zlib stream of one scanline: filter byte 0, pixel 0
    chunk(&mut png, b"IDAT", &[0x78, 0x9c, 0x63, 0x60, 0x00, 0x00, 0x00, 0x02, 0x00, 0x01]);
    let mut text = b"Comment\0".to_vec();
    text.extend_from_slice(comment.as_bytes());
    chunk(&mut png, b"tEXt", &text);
    chunk(&mut png, b"IEND", &[]);
    png
}

fn key_for(slot: usize) -> String {
    match KEYS.get(slot) {
        Some(k) => (*k).to_owned(),
        None => format!("field_{slot:03}"),
    }
}

fn amount(rng: &mut ChaCha8Rng) -> String {
    let cents: u64 = rng.gen_range(100..10_000_000);
    let whole = cents / 100;
    // Half the amounts carry thousands separators, as printed invoices do.
    let whole = if rng.gen_bool(0.5) { group_thousands(whole) } else { whole.to_string() };
    format!("{whole}.{:02}", cents % 100)
}

fn group_thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn value_for(key: &str, rng: &mut ChaCha8Rng) -> Value {
    let date = |rng: &mut ChaCha8Rng| {
        format!(
            "{}-{:02}-{:02}",
            rng.gen_range(2019..2026),
            rng.gen_range(1..13),
            rng.gen_range(1..29)
        )
    };
    match key {
        "vendor" | "customer" => Value::from(*COMPANIES.choose(rng).expect("non-empty")),
        "invoice_number" => Value::from(format!("INV-{:06}", rng.gen_range(0..1_000_000))),
        "invoice_date" | "due_date" => Value::from(date(rng)),
        "total" | "subtotal" | "tax" | "discount" => Value::from(amount(rng)),
        "currency" => Value::from(*["EUR", "USD", "NGN", "JPY"].choose(rng).expect("non-empty")),
        "po_number" => Value::from(format!("PO-{}", rng.gen_range(1000..99_999))),
        "customer_id" | "line_count" => Value::from(rng.gen_range(1..5000u32)),
        "payment_terms" => Value::from(format!("net {}", [15, 30, 45, 60].choose(rng).expect("non-empty"))),
        "iban" => Value::from(format!("DE{:020}", rng.gen_range(0..u64::MAX / 2))),
        "bill_to" | "ship_to" => Value::from(format!(
            "{} {} Street, {}",
            rng.gen_range(1..300),
            ["Main", "Harbor", "Station", "Mill"].choose(rng).expect("non-empty"),
            CITIES.choose(rng).expect("non-empty")
        )),
        _ => Value::from(format!("value {}", rng.gen_range(0..1_000_000))),
    }
}

/// One truth record; keys are a seeded pick from the invoice vocabulary.
pub fn truth_record(rng: &mut ChaCha8Rng, fields: usize) -> Map<String, Value> {
    let mut slots: Vec<usize> = (0..fields.max(KEYS.len())).collect();
    slots.shuffle(rng);
    let mut chosen: Vec<String> = slots[..fields].iter().map(|&s| key_for(s)).collect();
    chosen.sort();
    chosen
        .into_iter()
        .map(|key| {
            let value = value_for(&key, rng);
            (key, value)
        })
        .collect()
}

/// Writes `<dir>/images/doc_NNNNN.png` and `<dir>/truth/<id>.truth.json`
/// for every document. `dir` must be empty or absent.
pub fn generate_corpus(dir: &Path, n_documents: usize, fields: usize, seed: u64) -> Result<Vec<PathBuf>, BenchError> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(|e| BenchError::io(dir, e))?;
        if entries.next().is_some() {
            return Err(BenchError::TargetNotEmpty(dir.to_owned()));
        }
    }
    let images = dir.join(IMAGES_DIR);
    let truth = dir.join(TRUTH_DIR);
    fs::create_dir_all(&images).map_err(|e| BenchError::io(&images, e))?;
    fs::create_dir_all(&truth).map_err(|e| BenchError::io(&truth, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut paths = Vec::with_capacity(n_documents);
    for i in 0..n_documents {
        let png = placeholder_png(&format!("synthetic document {i} seed {seed}"));
        let id = DocumentId::from_bytes(&png);
        let path = images.join(format!("doc_{i:05}.png"));
        fs::write(&path, &png).map_err(|e| BenchError::io(&path, e))?;
        let record = truth_record(&mut rng, fields);
        let sidecar = truth.join(sidecar_name(&id));
        let body = serde_json::to_string_pretty(&Value::Object(record)).expect("record serializes");
        fs::write(&sidecar, body).map_err(|e| BenchError::io(&sidecar, e))?;
        paths.push(path);
    }
    Ok(paths)
}
