//! Exact probability that a field-level plurality vote returns the true
//! value, when each of `n` ballots is independently correct with
//! probability `q` and otherwise carries one of `V` wrong values uniformly.
//!
//! Enumerates the number of correct ballots `c` and every integer partition
//! of the `n - c` wrong ballots. A partition with `k` parts and part
//! multiplicities `m_j` corresponds to
//! `(n-c)! / prod(parts!) * V!/(V-k)! / prod(m_j!)` labelled assignments.

use serde::{Deserialize, Serialize};

/// Who wins when the true value ties with wrong ones on the top count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieModel {
    /// Ties always go to a wrong value.
    Against,
    /// Ties always go to the true value.
    For,
    /// Exchangeable priorities: a `t`-way tie is won with probability `1/t`.
    Priority,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum OracleError {
    #[error("exact enumeration limited to n <= 12 or V <= 8 (got n = {n}, V = {v})")]
    EnumerationTooLarge { n: usize, v: u32 },
    #[error("invalid oracle input: {0}")]
    Invalid(String),
}

pub fn analytic_vote_accuracy(
    n: usize,
    q: f64,
    v: u32,
    quorum: usize,
    tie: TieModel,
) -> Result<f64, OracleError> {
    if n > 12 && v > 8 {
        return Err(OracleError::EnumerationTooLarge { n, v });
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(OracleError::Invalid(format!("q = {q} outside [0, 1]")));
    }
    if v == 0 || n == 0 {
        return Err(OracleError::Invalid("n and V must be at least 1".into()));
    }
    // Every ballot carries the field, so it is included iff n reaches quorum.
    if n < quorum {
        return Ok(0.0);
    }
    let wrong_each = (1.0 - q) / f64::from(v);
    let mut total = 0.0;
    for c in 1..=n {
        let weight = binomial(n, c) * q.powi(c as i32) * wrong_each.powi((n - c) as i32);
        if weight == 0.0 {
            continue;
        }
        let mut win = 0.0;
        for parts in partitions(n - c, n - c) {
            let top = parts.first().copied().unwrap_or(0);
            let share = if top < c {
                1.0
            } else if top > c {
                0.0
            } else {
                let t = 1 + parts.iter().filter(|&&p| p == c).count();
                match tie {
                    TieModel::Against => 0.0,
                    TieModel::For => 1.0,
                    TieModel::Priority => 1.0 / t as f64,
                }
            };
            if share > 0.0 {
                win += share * labelled_assignments(&parts, v);
            }
        }
        total += weight * win;
    }
    Ok(total.clamp(0.0, 1.0))
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

/// Ways to give the wrong ballots values so that the value counts form
/// `parts` (non-increasing); zero when there are more parts than values.
fn labelled_assignments(parts: &[usize], v: u32) -> f64 {
    let k = parts.len();
    if k as u64 > u64::from(v) {
        return 0.0;
    }
    let total: usize = parts.iter().sum();
    let mut ways = factorial(total);
    for &p in parts {
        ways /= factorial(p);
    }
    for i in 0..k {
        ways *= f64::from(v) - i as f64;
    }
    let mut i = 0;
    while i < k {
        let run = parts[i..].iter().take_while(|&&p| p == parts[i]).count();
        ways /= factorial(run);
        i += run;
    }
    ways
}

/// Partitions of `n` into parts of at most `max`, each non-increasing.
fn partitions(n: usize, max: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for first in (1..=max.min(n)).rev() {
        for mut rest in partitions(n - first, first) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_counts() {
        // p(n) for n = 0..10.
        let expected = [1, 1, 2, 3, 5, 7, 11, 15, 22, 30, 42];
        for (n, &p) in expected.iter().enumerate() {
            assert_eq!(partitions(n, n).len(), p, "n = {n}");
        }
    }

    #[test]
    fn assignments_sum_to_all_labellings() {
        // Summing over partitions must give V^m labelled assignments.
        for m in 0..7usize {
            for v in 1..5u32 {
                let sum: f64 = partitions(m, m).iter().map(|p| labelled_assignments(p, v)).sum();
                assert_eq!(sum, f64::from(v).powi(m as i32), "m = {m}, V = {v}");
            }
        }
    }

    #[test]
    fn single_ballot_is_identity() {
        let p = analytic_vote_accuracy(1, 0.94, 1000, 1, TieModel::Against).unwrap();
        assert!((p - 0.94).abs() < 1e-12);
    }

    #[test]
    fn perfect_ballots() {
        for n in 1..=12 {
            let p = analytic_vote_accuracy(n, 1.0, 7, n / 2 + 1, TieModel::Priority).unwrap();
            assert!((p - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn three_ballots_by_hand() {
        // n = 3, V = 1: the true value wins iff at least 2 of 3 are correct.
        let q: f64 = 0.8;
        let p = analytic_vote_accuracy(3, q, 1, 2, TieModel::Against).unwrap();
        let by_hand = q.powi(3) + 3.0 * q * q * (1.0 - q);
        assert!((p - by_hand).abs() < 1e-12);
        // With a huge V, one correct plus two distinct wrong is a 3-way tie.
        let p = analytic_vote_accuracy(3, q, 8, 2, TieModel::For).unwrap();
        let w = (1.0 - q) / 8.0;
        let by_hand = q.powi(3) + 3.0 * q * q * (1.0 - q) + 3.0 * q * (8.0 * 7.0 * w * w);
        assert!((p - by_hand).abs() < 1e-12);
    }

    #[test]
    fn below_quorum_is_never_right() {
        assert_eq!(analytic_vote_accuracy(2, 0.9, 10, 3, TieModel::For).unwrap(), 0.0);
    }

    #[test]
    fn enumeration_limit() {
        assert!(matches!(
            analytic_vote_accuracy(13, 0.9, 9, 7, TieModel::For),
            Err(OracleError::EnumerationTooLarge { .. })
        ));
        assert!(analytic_vote_accuracy(13, 0.9, 8, 7, TieModel::For).is_ok());
        assert!(analytic_vote_accuracy(12, 0.9, 1000, 7, TieModel::For).is_ok());
    }

    #[test]
    fn monotone_in_q() {
        for tie in [TieModel::Against, TieModel::For, TieModel::Priority] {
            for (n, v) in [(3, 1), (4, 2), (8, 1000), (5, 3)] {
                let mut last = 0.0;
                for i in 0..=100 {
                    let q = f64::from(i) / 100.0;
                    let p = analytic_vote_accuracy(n, q, v, n / 2 + 1, tie).unwrap();
                    assert!(p + 1e-12 >= last, "n={n} V={v} q={q} {tie:?}");
                    last = p;
                }
            }
        }
    }

    #[test]
    fn ensemble_dominates_single_ballot() {
        for q in [0.6, 0.8, 0.94, 0.99] {
            let p = analytic_vote_accuracy(8, q, 1000, 5, TieModel::Against).unwrap();
            assert!(p >= q, "q = {q}: {p}");
        }
    }
}
