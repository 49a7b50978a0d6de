//! Field-level plurality voting over canonical ballots.
//!
//! With `n` ballots and quorum `κ` (default `⌊n/2⌋ + 1`), a key path enters
//! the consensus iff at least `κ` ballots contain it; its value is the
//! candidate with the most supporting ballots. Equal counts are settled by
//! the smallest supporting ballot priority, or by the least canonical text.
//! Nothing depends on the order ballots are passed in.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::canon::{CanonValue, CanonicalFieldMap, KeyPath};
use crate::model::{
    Ballot, DocumentId, Granularity, Quorum, Tally, TieBreak, VoteOutcome, VotingConfig,
};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VoteError {
    #[error("insufficient ballots: {got} ok, {need} required")]
    InsufficientBallots { got: usize, need: usize },
    #[error("ballots span more than one document ({0} and {1})")]
    MixedDocuments(DocumentId, DocumentId),
    #[error("ballot {engine}/{structurer} does not have status ok")]
    BallotNotOk { engine: String, structurer: String },
    #[error("fixed quorum must be at least 1")]
    InvalidQuorum,
}

/// Computes the consensus for one document.
///
/// `degraded` is always false here; the pipeline sets it when fewer ballots
/// arrived than were configured.
pub fn majority_vote(ballots: &[Ballot], cfg: &VotingConfig) -> Result<VoteOutcome, VoteError> {
    let need = if cfg.enabled { cfg.min_ballots.max(1) } else { 1 };
    if ballots.len() < need {
        return Err(VoteError::InsufficientBallots {
            got: ballots.len(),
            need,
        });
    }
    if cfg.inclusion_quorum == Quorum::Fixed(0) {
        return Err(VoteError::InvalidQuorum);
    }
    let document_id = ballots[0].document_id.clone();
    for b in ballots {
        if b.document_id != document_id {
            return Err(VoteError::MixedDocuments(document_id, b.document_id.clone()));
        }
        if !b.status.is_ok() {
            return Err(VoteError::BallotNotOk {
                engine: b.engine_id.clone(),
                structurer: b.structurer_id.clone(),
            });
        }
    }

    if !cfg.enabled {
        let chosen = ballots
            .iter()
            .min_by(|a, b| {
                (a.priority, &a.engine_id, &a.structurer_id)
                    .cmp(&(b.priority, &b.engine_id, &b.structurer_id))
            })
            .expect("at least one ballot");
        let tallies = tally_paths(std::slice::from_ref(chosen), cfg.tie_break);
        return Ok(VoteOutcome {
            document_id,
            fields: chosen.fields.clone(),
            tallies,
            n_ballots: 1,
            quorum: 1,
            tie_broken_paths: BTreeSet::new(),
            degraded: false,
            granularity: cfg.granularity,
            tie_break: cfg.tie_break,
        });
    }

    let n = ballots.len();
    let quorum = cfg.inclusion_quorum.resolve(n);
    let tallies = tally_paths(ballots, cfg.tie_break);
    let (fields, tie_broken_paths) = match cfg.granularity {
        Granularity::Field => field_consensus(&tallies, quorum),
        Granularity::Document => document_consensus(ballots, cfg.tie_break),
    };
    Ok(VoteOutcome {
        document_id,
        fields,
        tallies,
        n_ballots: n,
        quorum,
        tie_broken_paths,
        degraded: false,
        granularity: cfg.granularity,
        tie_break: cfg.tie_break,
    })
}

/// Best-first order for candidates: more votes, then the tie-break rule,
/// then value order so the result is total.
fn rank(a: &Tally, b: &Tally, tie_break: TieBreak) -> Ordering {
    b.count.cmp(&a.count).then_with(|| match tie_break {
        TieBreak::Priority => a
            .best_priority
            .cmp(&b.best_priority)
            .then_with(|| lexicographic(&a.value, &b.value)),
        TieBreak::Lexicographic => lexicographic(&a.value, &b.value),
    })
}

fn lexicographic(a: &CanonValue, b: &CanonValue) -> Ordering {
    a.text.cmp(&b.text).then_with(|| a.kind.cmp(&b.kind))
}

fn tally_paths(ballots: &[Ballot], tie_break: TieBreak) -> BTreeMap<KeyPath, Vec<Tally>> {
    let mut by_path: BTreeMap<&KeyPath, BTreeMap<&CanonValue, Tally>> = BTreeMap::new();
    for ballot in ballots {
        for (path, value) in ballot.fields.iter() {
            let tally = by_path
                .entry(path)
                .or_default()
                .entry(value)
                .or_insert_with(|| Tally {
                    value: value.clone(),
                    count: 0,
                    priority_sum: 0,
                    best_priority: u32::MAX,
                });
            tally.count += 1;
            tally.priority_sum += u64::from(ballot.priority);
            tally.best_priority = tally.best_priority.min(ballot.priority);
        }
    }
    by_path
        .into_iter()
        .map(|(path, candidates)| {
            let mut list: Vec<Tally> = candidates.into_values().collect();
            list.sort_by(|a, b| rank(a, b, tie_break));
            (path.clone(), list)
        })
        .collect()
}

fn field_consensus(
    tallies: &BTreeMap<KeyPath, Vec<Tally>>,
    quorum: usize,
) -> (CanonicalFieldMap, BTreeSet<KeyPath>) {
    let mut fields = CanonicalFieldMap::new();
    let mut ties = BTreeSet::new();
    for (path, candidates) in tallies {
        let support: usize = candidates.iter().map(|c| c.count).sum();
        if support < quorum {
            continue;
        }
        let winner = &candidates[0];
        if candidates.get(1).is_some_and(|c| c.count == winner.count) {
            ties.insert(path.clone());
        }
        fields.insert(path.clone(), winner.value.clone());
    }
    (fields, ties)
}

fn document_consensus(
    ballots: &[Ballot],
    tie_break: TieBreak,
) -> (CanonicalFieldMap, BTreeSet<KeyPath>) {
    struct Candidate<'a> {
        fields: &'a CanonicalFieldMap,
        text: String,
        count: usize,
        best_priority: u32,
    }
    let mut candidates: Vec<Candidate<'_>> = Vec::new();
    for ballot in ballots {
        match candidates.iter_mut().find(|c| *c.fields == ballot.fields) {
            Some(c) => {
                c.count += 1;
                c.best_priority = c.best_priority.min(ballot.priority);
            }
            None => candidates.push(Candidate {
                fields: &ballot.fields,
                text: serde_json::to_string(&ballot.fields).expect("field map serializes"),
                count: 1,
                best_priority: ballot.priority,
            }),
        }
    }
    candidates.sort_by(|a, b| {
        b.count.cmp(&a.count).then_with(|| match tie_break {
            TieBreak::Priority => a
                .best_priority
                .cmp(&b.best_priority)
                .then_with(|| a.text.cmp(&b.text)),
            TieBreak::Lexicographic => a.text.cmp(&b.text),
        })
    });
    let winner = &candidates[0];
    let tied = candidates.get(1).is_some_and(|c| c.count == winner.count);
    let ties = if tied {
        winner.fields.paths().cloned().collect()
    } else {
        BTreeSet::new()
    };
    (winner.fields.clone(), ties)
}

/// Renders the tally table for the audit trail, one row per key path.
pub fn explain(outcome: &VoteOutcome) -> String {
    let mut out = String::new();
    let granularity = match outcome.granularity {
        Granularity::Field => "field",
        Granularity::Document => "document",
    };
    let tie_marker = match outcome.tie_break {
        TieBreak::Priority => "tie→priority",
        TieBreak::Lexicographic => "tie→lexicographic",
    };
    let _ = writeln!(
        out,
        "document {}  ballots {}  quorum {}  granularity {}  degraded {}",
        outcome.document_id,
        outcome.n_ballots,
        outcome.quorum,
        granularity,
        if outcome.degraded { "yes" } else { "no" }
    );

    let rows: Vec<[String; 3]> = outcome
        .tallies
        .iter()
        .map(|(path, candidates)| {
            let winner = outcome.fields.get(path);
            let cells: Vec<String> = candidates
                .iter()
                .map(|c| {
                    let mark = if Some(&c.value) == winner { "*" } else { "" };
                    format!("{mark}{} x{}", c.value, c.count)
                })
                .collect();
            let support = outcome.support(path);
            let mut status = if winner.is_some() {
                format!("included {support}/{}", outcome.n_ballots)
            } else if support < outcome.quorum {
                format!(
                    "below quorum {}/{} (present in {support})",
                    outcome.quorum, outcome.n_ballots
                )
            } else {
                format!("not in winning document ({support}/{})", outcome.n_ballots)
            };
            if outcome.tie_broken_paths.contains(path) {
                status.push_str(", ");
                status.push_str(tie_marker);
            }
            [path.to_string(), cells.join("; "), status]
        })
        .collect();

    let header = ["path".to_owned(), "candidates".to_owned(), "status".to_owned()];
    let mut widths = header.clone().map(|h| h.chars().count());
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &[String; 3], out: &mut String| {
        let padded: Vec<String> = cells
            .iter()
            .zip(widths)
            .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        let _ = writeln!(out, "{}", padded.join(" | ").trim_end());
    };
    line(&header, &mut out);
    let rule = widths.map(|w| "-".repeat(w));
    let _ = writeln!(out, "{}", rule.join("-+-"));
    for row in &rows {
        line(row, &mut out);
    }
    out
}
