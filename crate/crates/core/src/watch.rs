//! Directory polling by set difference.
//!
//! A scan lists the top level of the watched directory, compares it with the
//! previous file set and emits the new valid images in path order. The I/O
//! part ([`list_directory`]) is separate from the decision part ([`diff`]) so
//! a recorded listing can be replayed.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, Read};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::model::{now_ms, DocumentFile, DocumentId, MediaType, MonitorState};

#[derive(Debug, thiserror::Error)]
pub enum WatchError {
    #[error("directory {path} unreadable: {source}")]
    DirectoryUnreadable { path: PathBuf, source: io::Error },
}

/// One regular file as seen by a single listing pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ListedFile {
    pub path: PathBuf,
    /// SHA-256 of the content, hex.
    pub hash: String,
    /// False when the size changed while the file was being read, or the
    /// file is empty; such files are reconsidered on the next scan.
    pub stable: bool,
    /// Set when the file passes [`is_valid_image`].
    pub media_type: Option<MediaType>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanOutcome {
    pub new_documents: Vec<DocumentFile>,
    pub next_state: MonitorState,
    /// Newly seen files rejected as non-images.
    pub ignored: Vec<PathBuf>,
    /// Files skipped because they are still being written.
    pub deferred: Vec<PathBuf>,
}

/// True iff the lowercase extension is an image type and, in strict mode,
/// the leading bytes carry that format's signature.
pub fn is_valid_image(path: &Path, strict: bool) -> bool {
    image_type(path, strict).is_some()
}

fn image_type(path: &Path, strict: bool) -> Option<MediaType> {
    let media = MediaType::from_path(path)?;
    if !strict {
        return Some(media);
    }
    let mut head = [0u8; 8];
    let mut file = File::open(path).ok()?;
    let mut filled = 0;
    while filled < head.len() {
        match file.read(&mut head[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(_) => return None,
        }
    }
    media.matches_magic(&head[..filled]).then_some(media)
}

/// Reads the top level of `dir`. Entries that vanish or cannot be read
/// mid-listing are left out.
pub fn list_directory(dir: &Path, strict: bool) -> Result<Vec<ListedFile>, WatchError> {
    let unreadable = |source| WatchError::DirectoryUnreadable {
        path: dir.to_owned(),
        source,
    };
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(unreadable)? {
        let entry = entry.map_err(unreadable)?;
        let path = entry.path();
        let Ok(before) = std::fs::metadata(&path) else {
            continue;
        };
        if !before.is_file() {
            continue;
        }
        let Ok(bytes) = std::fs::read(&path) else {
            continue;
        };
        let Ok(after) = std::fs::metadata(&path) else {
            continue;
        };
        let stable = !bytes.is_empty()
            && before.len() == bytes.len() as u64
            && after.len() == before.len();
        files.push(ListedFile {
            hash: hex::encode(Sha256::digest(&bytes)),
            media_type: image_type(&path, strict),
            path,
            stable,
        });
    }
    files.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(files)
}

/// Pure set difference of a listing against the previous state.
pub fn diff(listing: &[ListedFile], state: &MonitorState, detected_at: u64) -> ScanOutcome {
    let mut known = BTreeMap::new();
    let mut outcome = ScanOutcome {
        new_documents: Vec::new(),
        next_state: state.clone(),
        ignored: Vec::new(),
        deferred: Vec::new(),
    };
    let mut sorted: Vec<&ListedFile> = listing.iter().collect();
    sorted.sort_by(|a, b| a.path.cmp(&b.path));
    for file in sorted {
        if let Some(hash) = state.known_files.get(&file.path) {
            known.insert(file.path.clone(), hash.clone());
            continue;
        }
        if !file.stable {
            outcome.deferred.push(file.path.clone());
            continue;
        }
        known.insert(file.path.clone(), file.hash.clone());
        match file.media_type {
            Some(media_type) => outcome.new_documents.push(DocumentFile {
                id: DocumentId::parse(&file.hash).expect("listing hashes are sha256 hex"),
                path: file.path.clone(),
                detected_at,
                media_type,
            }),
            None => outcome.ignored.push(file.path.clone()),
        }
    }
    outcome.next_state.known_files = known;
    outcome
}

/// Lists the directory and diffs it against `state`.
pub fn scan(state: &MonitorState) -> Result<ScanOutcome, WatchError> {
    let listing = list_directory(&state.directory, state.strict_magic)?;
    Ok(diff(&listing, state, now_ms()))
}
