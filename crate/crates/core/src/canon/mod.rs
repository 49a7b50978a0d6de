//! Canonical field maps: the voting domain for structured JSON candidates.
//!
//! A candidate JSON object is flattened into `KeyPath -> CanonValue` entries so
//! that two backends which agree on content (but not on key spelling, key
//! order, whitespace or thousands separators) produce equal maps.
//!
//! Normalization rules:
//! - object keys are trimmed, lowercased, and runs of whitespace or hyphens
//!   become a single `_`; the path metacharacters `.`, `[`, `]` are escaped
//!   as `%2E`, `%5B`, `%5D`
//! - strings are trimmed with internal whitespace collapsed to one space;
//!   strings that are plain decimals with well-formed comma grouping lose the
//!   commas (`"1,234.50"` becomes `"1234.50"`) but keep string kind, and
//!   ID-like strings with a leading zero (`"007"`) are left alone
//! - numbers are rewritten in minimal plain decimal form (`1.50e2` is `150`)
//! - empty objects and arrays contribute nothing, except as array elements,
//!   where an element without entries becomes a `null` placeholder so that
//!   index alignment survives a render round trip

mod json;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use json::Node;

/// Containers may nest at most this deep.
pub const MAX_DEPTH: usize = 32;
/// Rendered key paths longer than this (in chars) are rejected.
pub const MAX_PATH_LEN: usize = 1024;
/// Decimal exponents outside this range are rejected rather than expanded.
const MAX_EXPONENT: i64 = 1024;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CanonError {
    #[error("invalid JSON: {0}")]
    InvalidJson(String),
    #[error("top-level JSON value is not an object")]
    NotAnObject,
    #[error("nesting deeper than {0} levels")]
    DepthExceeded(usize),
    #[error("key path longer than {MAX_PATH_LEN} characters: {0}...")]
    PathTooLong(String),
    #[error("path conflict between {0} and {1}")]
    PathConflict(String, String),
    #[error("invalid key path {0:?}: {1}")]
    InvalidKeyPath(String, &'static str),
}

/// One step of a key path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    /// Normalized (and escaped) object key.
    Key(String),
    Index(usize),
}

/// Dotted/bracketed address of a leaf, e.g. `items[0].qty`.
///
/// Ordered by its rendered form.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct KeyPath(String);

impl KeyPath {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Parses and validates a rendered key path.
    pub fn parse(text: &str) -> Result<Self, CanonError> {
        let segments = parse_segments(text)?;
        Ok(KeyPath::from_segments(&segments))
    }

    pub fn from_segments(segments: &[Segment]) -> Self {
        let mut out = String::new();
        for seg in segments {
            match seg {
                Segment::Key(k) => {
                    if !out.is_empty() {
                        out.push('.');
                    }
                    out.push_str(k);
                }
                Segment::Index(i) => {
                    out.push('[');
                    out.push_str(&i.to_string());
                    out.push(']');
                }
            }
        }
        KeyPath(out)
    }

    pub fn segments(&self) -> Vec<Segment> {
        parse_segments(&self.0).expect("KeyPath holds a validated path")
    }
}

impl fmt::Display for KeyPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl Serialize for KeyPath {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for KeyPath {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        KeyPath::parse(&text).map_err(serde::de::Error::custom)
    }
}

fn parse_segments(text: &str) -> Result<Vec<Segment>, CanonError> {
    let bad = |why| CanonError::InvalidKeyPath(text.to_owned(), why);
    let mut segments = Vec::new();
    let mut rest = text;
    // A path always starts with an object key.
    let mut expect_key = true;
    while !rest.is_empty() || expect_key {
        if expect_key {
            let end = rest.find(['.', '[', ']']).unwrap_or(rest.len());
            let key = &rest[..end];
            if key.is_empty() {
                return Err(bad("empty key segment"));
            }
            if normalize_key(&unescape_key(key)) != key {
                return Err(bad("key segment is not normalized"));
            }
            segments.push(Segment::Key(key.to_owned()));
            rest = &rest[end..];
            expect_key = false;
            continue;
        }
        if let Some(after) = rest.strip_prefix('.') {
            rest = after;
            expect_key = true;
        } else if let Some(after) = rest.strip_prefix('[') {
            let close = after.find(']').ok_or_else(|| bad("unclosed index"))?;
            let digits = &after[..close];
            if digits.is_empty()
                || !digits.bytes().all(|b| b.is_ascii_digit())
                || (digits.len() > 1 && digits.starts_with('0'))
            {
                return Err(bad("malformed index"));
            }
            let index = digits.parse().map_err(|_| bad("index out of range"))?;
            segments.push(Segment::Index(index));
            rest = &after[close + 1..];
        } else {
            return Err(bad("unexpected character"));
        }
    }
    Ok(segments)
}

/// Normalizes a raw JSON object key into a key-path segment.
pub fn normalize_key(raw: &str) -> String {
    let lowered = raw.trim().to_lowercase();
    let mut out = String::with_capacity(lowered.len());
    let mut in_run = false;
    for c in lowered.chars() {
        if c.is_whitespace() || c == '-' {
            if !in_run {
                out.push('_');
                in_run = true;
            }
            continue;
        }
        in_run = false;
        match c {
            '.' => out.push_str("%2E"),
            '[' => out.push_str("%5B"),
            ']' => out.push_str("%5D"),
            c => out.push(c),
        }
    }
    out
}

/// Inverse of the metacharacter escaping in [`normalize_key`].
fn unescape_key(segment: &str) -> String {
    segment
        .replace("%2E", ".")
        .replace("%5B", "[")
        .replace("%5D", "]")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    String,
    Number,
    Boolean,
    Null,
}

/// Canonical leaf value. Equality is `(kind, text)` equality.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CanonValue {
    pub kind: ValueKind,
    pub text: String,
}

impl CanonValue {
    /// Builds a string value, applying whitespace and numeric normalization.
    pub fn string(raw: &str) -> Self {
        CanonValue {
            kind: ValueKind::String,
            text: normalize_string(raw),
        }
    }

    /// Builds a number value from JSON number text.
    pub fn number(raw: &str) -> Result<Self, CanonError> {
        Ok(CanonValue {
            kind: ValueKind::Number,
            text: normalize_number(raw)?,
        })
    }

    pub fn boolean(b: bool) -> Self {
        CanonValue {
            kind: ValueKind::Boolean,
            text: b.to_string(),
        }
    }

    pub fn null() -> Self {
        CanonValue {
            kind: ValueKind::Null,
            text: "null".to_owned(),
        }
    }

    /// JSON text for this value.
    pub fn to_json(&self) -> String {
        match self.kind {
            ValueKind::String => serde_json::to_string(&self.text).expect("string serializes"),
            _ => self.text.clone(),
        }
    }
}

impl fmt::Display for CanonValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_json())
    }
}

fn normalize_string(raw: &str) -> String {
    let collapsed = raw.split_whitespace().collect::<Vec<_>>().join(" ");
    match grouped_decimal(&collapsed) {
        Some(plain) => plain,
        None => collapsed,
    }
}

/// Returns the comma-free form of a plain decimal string (`-?digits(.digits)?`
/// with optional well-formed thousands grouping), or `None` when the text is
/// not such a number or is an ID-like code with a leading zero.
fn grouped_decimal(text: &str) -> Option<String> {
    let unsigned = text.strip_prefix('-').unwrap_or(text);
    let (int_part, frac_part) = match unsigned.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (unsigned, None),
    };
    if let Some(frac) = frac_part {
        if frac.is_empty() || !frac.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
    }
    let groups: Vec<&str> = int_part.split(',').collect();
    let well_formed = match groups.as_slice() {
        [single] => !single.is_empty() && single.bytes().all(|b| b.is_ascii_digit()),
        [head, tail @ ..] => {
            (1..=3).contains(&head.len())
                && head.bytes().all(|b| b.is_ascii_digit())
                && tail
                    .iter()
                    .all(|g| g.len() == 3 && g.bytes().all(|b| b.is_ascii_digit()))
        }
        [] => false,
    };
    if !well_formed {
        return None;
    }
    let digits: String = groups.concat();
    if digits.len() > 1 && digits.starts_with('0') {
        return None;
    }
    Some(text.replace(',', ""))
}

/// Minimal plain decimal rendering of a JSON number: no exponent, no leading
/// zeros, no trailing fractional zeros, `-0` is `0`.
fn normalize_number(raw: &str) -> Result<String, CanonError> {
    let bad = || CanonError::InvalidJson(format!("malformed number {raw:?}"));
    let (negative, unsigned) = match raw.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, raw),
    };
    let (mantissa, exponent) = match unsigned.find(['e', 'E']) {
        Some(i) => {
            let exp_text = &unsigned[i + 1..];
            let exp_text = exp_text.strip_prefix('+').unwrap_or(exp_text);
            // Clamp absurd exponents before parsing so huge digit strings
            // cannot overflow.
            let exp: i64 = match exp_text.trim_start_matches('-').len() {
                0 => return Err(bad()),
                n if n > 8 => return Err(out_of_range(raw)),
                _ => exp_text.parse().map_err(|_| bad())?,
            };
            (&unsigned[..i], exp)
        }
        None => (unsigned, 0),
    };
    let (int_digits, frac_digits) = mantissa.split_once('.').unwrap_or((mantissa, ""));
    if int_digits.is_empty()
        || !int_digits.bytes().all(|b| b.is_ascii_digit())
        || !frac_digits.bytes().all(|b| b.is_ascii_digit())
    {
        return Err(bad());
    }
    let all_digits = format!("{int_digits}{frac_digits}");
    let mut scale = exponent - frac_digits.len() as i64;
    let trimmed = all_digits.trim_start_matches('0');
    if trimmed.is_empty() {
        return Ok("0".to_owned());
    }
    let significant = trimmed.trim_end_matches('0');
    scale += (trimmed.len() - significant.len()) as i64;
    let magnitude = scale + significant.len() as i64;
    if !(-MAX_EXPONENT..=MAX_EXPONENT).contains(&scale)
        || !(-MAX_EXPONENT..=MAX_EXPONENT).contains(&magnitude)
    {
        return Err(out_of_range(raw));
    }

    let mut out = String::new();
    if negative {
        out.push('-');
    }
    if scale >= 0 {
        out.push_str(significant);
        out.extend(std::iter::repeat('0').take(scale as usize));
    } else {
        let point = significant.len() as i64 + scale;
        if point > 0 {
            let (int, frac) = significant.split_at(point as usize);
            out.push_str(int);
            out.push('.');
            out.push_str(frac);
        } else {
            out.push_str("0.");
            out.extend(std::iter::repeat('0').take((-point) as usize));
            out.push_str(significant);
        }
    }
    Ok(out)
}

fn out_of_range(raw: &str) -> CanonError {
    let shown: String = raw.chars().take(40).collect();
    CanonError::InvalidJson(format!("number magnitude out of range: {shown}"))
}

/// Flat, path-sorted representation of one JSON object.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CanonicalFieldMap {
    pub entries: BTreeMap<KeyPath, CanonValue>,
}

impl CanonicalFieldMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, path: &KeyPath) -> Option<&CanonValue> {
        self.entries.get(path)
    }

    pub fn insert(&mut self, path: KeyPath, value: CanonValue) -> Option<CanonValue> {
        self.entries.insert(path, value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&KeyPath, &CanonValue)> {
        self.entries.iter()
    }

    pub fn paths(&self) -> impl Iterator<Item = &KeyPath> {
        self.entries.keys()
    }
}

impl FromIterator<(KeyPath, CanonValue)> for CanonicalFieldMap {
    fn from_iter<I: IntoIterator<Item = (KeyPath, CanonValue)>>(iter: I) -> Self {
        CanonicalFieldMap {
            entries: iter.into_iter().collect(),
        }
    }
}

/// Result of canonicalization together with non-fatal diagnostics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Canonicalized {
    pub fields: CanonicalFieldMap,
    /// One message per duplicate (post-normalization) key that was overridden.
    pub warnings: Vec<String>,
}

/// Parses and flattens a JSON object. See the module docs for the rules.
pub fn canonicalize(raw_json: &str) -> Result<CanonicalFieldMap, CanonError> {
    canonicalize_with_warnings(raw_json).map(|c| c.fields)
}

pub fn canonicalize_with_warnings(raw_json: &str) -> Result<Canonicalized, CanonError> {
    let root = json::parse(raw_json, MAX_DEPTH)?;
    if !matches!(root, Node::Object(_)) {
        return Err(CanonError::NotAnObject);
    }
    let mut flattener = Flattener::default();
    let mut path = Vec::new();
    flattener.walk(&root, &mut path, false)?;
    Ok(Canonicalized {
        fields: flattener.fields,
        warnings: flattener.warnings,
    })
}

#[derive(Default)]
struct Flattener {
    fields: CanonicalFieldMap,
    warnings: Vec<String>,
}

impl Flattener {
    /// Flattens `node` under `path`; returns how many entries it produced.
    fn walk(
        &mut self,
        node: &Node,
        path: &mut Vec<Segment>,
        in_array: bool,
    ) -> Result<usize, CanonError> {
        let produced = match node {
            Node::Object(members) => {
                // Last occurrence of a normalized key wins.
                let mut slots: Vec<(String, &Node)> = Vec::with_capacity(members.len());
                for (raw_key, value) in members {
                    let key = normalize_key(raw_key);
                    if key.is_empty() {
                        return Err(CanonError::InvalidJson(format!(
                            "empty object key {raw_key:?}"
                        )));
                    }
                    if let Some(slot) = slots.iter_mut().find(|(k, _)| *k == key) {
                        let mut at = path.clone();
                        at.push(Segment::Key(key.clone()));
                        self.warnings.push(format!(
                            "duplicate key {} (last occurrence wins)",
                            KeyPath::from_segments(&at)
                        ));
                        slot.1 = value;
                    } else {
                        slots.push((key, value));
                    }
                }
                let mut total = 0;
                for (key, value) in slots {
                    path.push(Segment::Key(key));
                    total += self.walk(value, path, false)?;
                    path.pop();
                }
                total
            }
            Node::Array(items) => {
                let mut total = 0;
                for (i, item) in items.iter().enumerate() {
                    path.push(Segment::Index(i));
                    total += self.walk(item, path, true)?;
                    path.pop();
                }
                total
            }
            Node::String(s) => self.leaf(path, CanonValue::string(s))?,
            Node::Number(n) => self.leaf(path, CanonValue::number(n)?)?,
            Node::Bool(b) => self.leaf(path, CanonValue::boolean(*b))?,
            Node::Null => self.leaf(path, CanonValue::null())?,
        };
        if produced == 0 && in_array {
            return self.leaf(path, CanonValue::null());
        }
        Ok(produced)
    }

    fn leaf(&mut self, path: &[Segment], value: CanonValue) -> Result<usize, CanonError> {
        let key_path = KeyPath::from_segments(path);
        if key_path.0.chars().count() > MAX_PATH_LEN {
            let shown: String = key_path.0.chars().take(64).collect();
            return Err(CanonError::PathTooLong(shown));
        }
        self.fields.insert(key_path, value);
        Ok(1)
    }
}

enum Tree<'a> {
    /// Slot created by a path walk but not yet filled or typed.
    Pending,
    Leaf(&'a CanonValue),
    Object(BTreeMap<String, Tree<'a>>),
    Array(Vec<Tree<'a>>),
}

/// Rebuilds a nested JSON document from a field map.
///
/// Keys are emitted in lexicographic order with two-space indentation; array
/// gaps are filled with `null`. Output is byte-deterministic.
pub fn render(fields: &CanonicalFieldMap) -> Result<String, CanonError> {
    let mut root = Tree::Object(BTreeMap::new());
    for (path, value) in fields.iter() {
        insert_path(&mut root, path, value).map_err(|_| conflict(path, fields))?;
    }
    let mut out = String::new();
    write_tree(&root, 0, &mut out);
    Ok(out)
}

fn conflict(path: &KeyPath, fields: &CanonicalFieldMap) -> CanonError {
    let other = fields
        .paths()
        .find(|p| *p != path && shares_container(p, path))
        .map(|p| p.0.clone())
        .unwrap_or_default();
    CanonError::PathConflict(other, path.0.clone())
}

fn shares_container(a: &KeyPath, b: &KeyPath) -> bool {
    let (sa, sb) = (a.segments(), b.segments());
    let common = sa.iter().zip(&sb).take_while(|(x, y)| x == y).count();
    common == sa.len().min(sb.len())
        || matches!(
            (&sa[common], &sb[common]),
            (Segment::Key(_), Segment::Index(_)) | (Segment::Index(_), Segment::Key(_))
        )
}

fn insert_path<'a>(root: &mut Tree<'a>, path: &KeyPath, value: &'a CanonValue) -> Result<(), ()> {
    let mut slot = root;
    for seg in path.segments() {
        if matches!(slot, Tree::Pending) {
            *slot = match seg {
                Segment::Key(_) => Tree::Object(BTreeMap::new()),
                Segment::Index(_) => Tree::Array(Vec::new()),
            };
        }
        slot = match (slot, seg) {
            (Tree::Object(map), Segment::Key(k)) => map.entry(unescape_key(&k)).or_insert(Tree::Pending),
            (Tree::Array(items), Segment::Index(idx)) => {
                if items.len() <= idx {
                    items.resize_with(idx + 1, || Tree::Pending);
                }
                &mut items[idx]
            }
            _ => return Err(()),
        };
    }
    match slot {
        Tree::Pending => {
            *slot = Tree::Leaf(value);
            Ok(())
        }
        _ => Err(()),
    }
}

fn indent(depth: usize, out: &mut String) {
    for _ in 0..depth {
        out.push_str("  ");
    }
}

fn write_tree(tree: &Tree<'_>, depth: usize, out: &mut String) {
    match tree {
        // Array gaps.
        Tree::Pending => out.push_str("null"),
        Tree::Leaf(v) => out.push_str(&v.to_json()),
        Tree::Object(map) if map.is_empty() => out.push_str("{}"),
        Tree::Object(map) => {
            out.push_str("{\n");
            for (i, (key, child)) in map.iter().enumerate() {
                indent(depth + 1, out);
                out.push_str(&serde_json::to_string(key).expect("string serializes"));
                out.push_str(": ");
                write_tree(child, depth + 1, out);
                if i + 1 < map.len() {
                    out.push(',');
                }
                out.push('\n');
            }
            indent(depth, out);
            out.push('}');
        }
        Tree::Array(items) => {
            out.push_str("[\n");
            for (i, item) in items.iter().enumerate() {
                indent(depth + 1, out);
                write_tree(item, depth + 1, out);
                if i + 1 < items.len() {
                    out.push(',');
                }
                out.push('\n');
            }
            indent(depth, out);
            out.push(']');
        }
    }
}

#[cfg(test)]
mod tests;
