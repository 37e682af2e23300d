//! Artificial evidence for position-leakage ablations.

use std::ops::Range;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ExplainedSample;
use crate::error::{Error, Result};

/// Furthest distance (in tokens) from the correction span for adjacent evidence.
pub const ADJACENT_MAX_DISTANCE: usize = 5;

/// As many distinct source positions as the sample has gold evidence words,
/// drawn uniformly without replacement.
pub fn random_evidence(sample: &ExplainedSample, seed: u64) -> Result<Vec<usize>> {
    let n = sample.source.len();
    let k = sample.evidence.len();
    if k > n {
        return Err(Error::Validation(format!(
            "sample {}: cannot draw {k} distinct indices from {n} tokens",
            sample.id
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, n, k).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Positions 1 to [`ADJACENT_MAX_DISTANCE`] tokens away from `span`, clipped
/// to the sentence and never inside the span. For an insertion point the
/// token right after it is at distance 1.
pub fn adjacent_window(n: usize, span: Range<usize>) -> Vec<usize> {
    let mut out = Vec::new();
    let lo = span.start.saturating_sub(ADJACENT_MAX_DISTANCE);
    out.extend(lo..span.start.min(n));
    let hi = (span.end + ADJACENT_MAX_DISTANCE).min(n);
    out.extend(span.end..hi);
    out
}

/// `min(k, |window|)` distinct positions sampled from [`adjacent_window`],
/// where `k` is the gold evidence count.
pub fn adjacent_evidence(sample: &ExplainedSample, span: Range<usize>, seed: u64) -> Vec<usize> {
    let window = adjacent_window(sample.source.len(), span);
    let k = sample.evidence.len().min(window.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = index::sample(&mut rng, window.len(), k)
        .into_iter()
        .map(|i| window[i])
        .collect();
    picked.sort_unstable();
    picked
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(n: usize, evidence: Vec<usize>) -> ExplainedSample {
        ExplainedSample {
            id: "s".into(),
            source: (0..n).map(|i| format!("w{i}")).collect(),
            target: vec![],
            evidence,
            error_type: None,
        }
    }

    #[test]
    fn random_with_no_gold_is_empty() {
        assert!(random_evidence(&sample(5, vec![]), 1).unwrap().is_empty());
    }

    #[test]
    fn random_single_token_is_forced() {
        assert_eq!(random_evidence(&sample(1, vec![0]), 9).unwrap(), vec![0]);
    }

    #[test]
    fn random_is_deterministic() {
        let s = sample(10, vec![1, 4, 7]);
        let a = random_evidence(&s, 42).unwrap();
        assert_eq!(a, random_evidence(&s, 42).unwrap());
        assert_eq!(a.len(), 3);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn random_rejects_more_than_n() {
        let mut s = sample(2, vec![0, 1]);
        s.evidence = vec![0, 1, 2];
        assert!(random_evidence(&s, 0).is_err());
    }

    #[test]
    fn window_enumeration() {
        assert_eq!(adjacent_window(10, 2..3), vec![0, 1, 3, 4, 5, 6, 7]);
        assert!(adjacent_window(4, 0..4).is_empty());
        assert_eq!(adjacent_window(10, 4..4), vec![0, 1, 2, 3, 4, 5, 6, 7, 8]);
    }

    #[test]
    fn adjacent_full_span_is_empty() {
        assert!(adjacent_evidence(&sample(4, vec![1]), 0..4, 3).is_empty());
    }

    #[test]
    fn adjacent_is_stable_and_in_window() {
        let s = sample(10, vec![0, 9]);
        let a = adjacent_evidence(&s, 2..3, 11);
        assert_eq!(a, adjacent_evidence(&s, 2..3, 11));
        assert_eq!(a.len(), 2);
        let w = adjacent_window(10, 2..3);
        assert!(a.iter().all(|i| w.contains(i)));
    }
}
