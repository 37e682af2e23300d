//! Token alignment and span edits.
//!
//! Sentences are compared with a unit-cost Levenshtein alignment. Contiguous
//! runs of non-matching operations become [`Edit`]s, and two edits separated
//! by a short matched gap are merged when a token moves across the gap (for
//! instance `fit myself` -> `keep myself fit`).

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Longest run of matched tokens that a moved token may jump over before the
/// two surrounding edits are reported separately.
pub const MAX_MOVE_GAP: usize = 2;

/// A replacement of the half-open source span `[start, end)` by `replacement`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Edit {
    #[serde(rename = "i")]
    pub start: usize,
    #[serde(rename = "j")]
    pub end: usize,
    #[serde(rename = "rep")]
    pub replacement: Vec<String>,
}

impl Edit {
    pub fn new(start: usize, end: usize, replacement: Vec<String>) -> Result<Self> {
        if start > end {
            return Err(Error::Validation(format!(
                "edit span [{start}, {end}) is reversed"
            )));
        }
        if start == end && replacement.is_empty() {
            return Err(Error::Validation(format!(
                "empty insertion at position {start}"
            )));
        }
        Ok(Edit {
            start,
            end,
            replacement,
        })
    }

    pub fn is_insertion(&self) -> bool {
        self.start == self.end
    }

    /// Change in sentence length caused by this edit.
    pub fn len_delta(&self) -> isize {
        self.replacement.len() as isize - (self.end - self.start) as isize
    }

    /// True when `index` lies inside the replaced source span.
    pub fn covers(&self, index: usize) -> bool {
        self.start <= index && index < self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentOp {
    Match { src: usize, tgt: usize },
    Substitute { src: usize, tgt: usize },
    Delete { src: usize },
    Insert { tgt: usize },
}

impl AlignmentOp {
    pub fn cost(&self) -> usize {
        match self {
            AlignmentOp::Match { .. } => 0,
            _ => 1,
        }
    }
}

/// Total cost of an alignment under unit substitution/insertion/deletion costs.
pub fn alignment_cost(ops: &[AlignmentOp]) -> usize {
    ops.iter().map(AlignmentOp::cost).sum()
}

/// Minimal-cost alignment of `source` onto `target`.
///
/// Ties are resolved left to right, preferring match, then substitute, then
/// delete, then insert.
pub fn align_tokens<S: AsRef<str>, T: AsRef<str>>(source: &[S], target: &[T]) -> Vec<AlignmentOp> {
    let n = source.len();
    let m = target.len();
    let width = m + 1;
    // suffix[i * width + j] = cost of aligning source[i..] with target[j..]
    let mut suffix = vec![0usize; (n + 1) * width];
    for i in (0..=n).rev() {
        for j in (0..=m).rev() {
            let idx = i * width + j;
            suffix[idx] = if i == n {
                m - j
            } else if j == m {
                n - i
            } else {
                let diag = usize::from(source[i].as_ref() != target[j].as_ref());
                let d = diag + suffix[(i + 1) * width + j + 1];
                let del = 1 + suffix[(i + 1) * width + j];
                let ins = 1 + suffix[i * width + j + 1];
                d.min(del).min(ins)
            };
        }
    }

    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (0, 0);
    while i < n || j < m {
        let here = suffix[i * width + j];
        if i < n && j < m {
            let same = source[i].as_ref() == target[j].as_ref();
            let diag = usize::from(!same);
            if diag + suffix[(i + 1) * width + j + 1] == here {
                ops.push(if same {
                    AlignmentOp::Match { src: i, tgt: j }
                } else {
                    AlignmentOp::Substitute { src: i, tgt: j }
                });
                i += 1;
                j += 1;
                continue;
            }
        }
        if i < n && 1 + suffix[(i + 1) * width + j] == here {
            ops.push(AlignmentOp::Delete { src: i });
            i += 1;
        } else {
            ops.push(AlignmentOp::Insert { tgt: j });
            j += 1;
        }
    }
    ops
}

/// Raw edit with its target-side extent, used while merging.
#[derive(Debug, Clone)]
struct Region {
    src: (usize, usize),
    tgt: (usize, usize),
}

/// Edits transforming `source` into `target`.
pub fn extract_edits<S: AsRef<str>, T: AsRef<str>>(source: &[S], target: &[T]) -> Vec<Edit> {
    let ops = align_tokens(source, target);
    let mut regions: Vec<Region> = Vec::new();
    let mut open: Option<Region> = None;
    let (mut si, mut ti) = (0usize, 0usize);
    for op in &ops {
        match op {
            AlignmentOp::Match { .. } => {
                if let Some(r) = open.take() {
                    regions.push(r);
                }
                si += 1;
                ti += 1;
            }
            other => {
                let r = open.get_or_insert(Region {
                    src: (si, si),
                    tgt: (ti, ti),
                });
                match other {
                    AlignmentOp::Substitute { .. } => {
                        si += 1;
                        ti += 1;
                    }
                    AlignmentOp::Delete { .. } => si += 1,
                    AlignmentOp::Insert { .. } => ti += 1,
                    AlignmentOp::Match { .. } => unreachable!(),
                }
                r.src.1 = si;
                r.tgt.1 = ti;
            }
        }
    }
    if let Some(r) = open.take() {
        regions.push(r);
    }

    let regions = merge_moves(regions, source, target);
    regions
        .into_iter()
        .map(|r| Edit {
            start: r.src.0,
            end: r.src.1,
            replacement: target[r.tgt.0..r.tgt.1]
                .iter()
                .map(|t| t.as_ref().to_string())
                .collect(),
        })
        .collect()
}

fn merge_moves<S: AsRef<str>, T: AsRef<str>>(
    regions: Vec<Region>,
    source: &[S],
    target: &[T],
) -> Vec<Region> {
    let mut merged: Vec<Region> = Vec::with_capacity(regions.len());
    for next in regions {
        if let Some(prev) = merged.last_mut() {
            let gap = next.src.0 - prev.src.1;
            if gap <= MAX_MOVE_GAP && token_moves(prev, &next, source, target) {
                prev.src.1 = next.src.1;
                prev.tgt.1 = next.tgt.1;
                continue;
            }
        }
        merged.push(next);
    }
    merged
}

/// A token removed by one region and re-added by the other.
fn token_moves<S: AsRef<str>, T: AsRef<str>>(
    a: &Region,
    b: &Region,
    source: &[S],
    target: &[T],
) -> bool {
    let removed = |r: &Region| -> Vec<&str> {
        source[r.src.0..r.src.1].iter().map(|s| s.as_ref()).collect()
    };
    let added = |r: &Region| -> Vec<&str> {
        target[r.tgt.0..r.tgt.1].iter().map(|s| s.as_ref()).collect()
    };
    let (ra, aa, rb, ab) = (removed(a), added(a), removed(b), added(b));
    ra.iter().any(|t| ab.contains(t) && !aa.contains(t))
        || rb.iter().any(|t| aa.contains(t) && !ab.contains(t))
}

/// Checks that `edits` are individually valid, sorted, non-overlapping and
/// within a source of length `n`.
pub fn check_edits(edits: &[Edit], n: usize) -> Result<()> {
    let mut prev: Option<&Edit> = None;
    for e in edits {
        if e.start > e.end || e.end > n {
            return Err(Error::Validation(format!(
                "edit span [{}, {}) out of range for source length {n}",
                e.start, e.end
            )));
        }
        if e.is_insertion() && e.replacement.is_empty() {
            return Err(Error::Validation(format!(
                "empty insertion at position {}",
                e.start
            )));
        }
        if let Some(p) = prev {
            let ordered = match e.start.cmp(&p.end) {
                Ordering::Greater => true,
                Ordering::Equal => !(p.is_insertion() && e.is_insertion()) && p.start <= e.start,
                Ordering::Less => false,
            };
            if !ordered {
                return Err(Error::Validation(format!(
                    "edit [{}, {}) overlaps or precedes edit [{}, {})",
                    e.start, e.end, p.start, p.end
                )));
            }
        }
        prev = Some(e);
    }
    Ok(())
}

/// Splices `edits` into `source`.
pub fn apply_edits<S: AsRef<str>>(source: &[S], edits: &[Edit]) -> Result<Vec<String>> {
    check_edits(edits, source.len())?;
    let mut out = Vec::with_capacity(source.len());
    let mut cursor = 0;
    for e in edits {
        out.extend(source[cursor..e.start].iter().map(|s| s.as_ref().to_string()));
        out.extend(e.replacement.iter().cloned());
        cursor = e.end;
    }
    out.extend(source[cursor..].iter().map(|s| s.as_ref().to_string()));
    Ok(out)
}

/// Result of shifting indices through a list of edits.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Remapped {
    pub remapped: Vec<usize>,
    pub dropped: Vec<usize>,
}

/// Moves source indices through `edits`; indices inside a replaced span are
/// reported as dropped. Insertions at an index push that index right.
pub fn remap_indices(indices: &[usize], edits: &[Edit]) -> Remapped {
    let mut out = Remapped::default();
    'outer: for &idx in indices {
        let mut delta: isize = 0;
        for e in edits {
            if e.covers(idx) {
                out.dropped.push(idx);
                continue 'outer;
            }
            if idx >= e.end {
                delta += e.len_delta();
            }
        }
        out.remapped.push((idx as isize + delta) as usize);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn identity_alignment_is_all_matches() {
        let ops = align_tokens(&toks("a cat"), &toks("a cat"));
        assert_eq!(
            ops,
            vec![
                AlignmentOp::Match { src: 0, tgt: 0 },
                AlignmentOp::Match { src: 1, tgt: 1 }
            ]
        );
    }

    #[test]
    fn single_substitution() {
        let ops = align_tokens(&toks("a cat"), &toks("a dog"));
        assert_eq!(
            ops,
            vec![
                AlignmentOp::Match { src: 0, tgt: 0 },
                AlignmentOp::Substitute { src: 1, tgt: 1 }
            ]
        );
    }

    #[test]
    fn insertion_edit() {
        let edits = extract_edits(&toks("a b c"), &toks("a X b c"));
        assert_eq!(edits, vec![Edit::new(1, 1, toks("X")).unwrap()]);
    }

    #[test]
    fn identical_sentences_have_no_edits() {
        assert!(extract_edits(&toks("a b c"), &toks("a b c")).is_empty());
    }

    #[test]
    fn moved_token_merges_into_one_edit() {
        let src = toks("However , I sometimes do skipping to fit myself .");
        let tgt = toks("However , I sometimes do skipping to keep myself fit .");
        let edits = extract_edits(&src, &tgt);
        assert_eq!(edits, vec![Edit::new(7, 9, toks("keep myself fit")).unwrap()]);
        assert_eq!(apply_edits(&src, &edits).unwrap(), tgt);
    }

    #[test]
    fn unrelated_edits_stay_separate() {
        let edits = extract_edits(&toks("a b c d"), &toks("X b Y d"));
        assert_eq!(edits.len(), 2);
    }

    #[test]
    fn comma_insertion_from_table_row() {
        let src = toks("However I sometimes do skipping to fit myself .");
        let edits = vec![Edit::new(1, 1, toks(",")).unwrap()];
        assert_eq!(
            apply_edits(&src, &edits).unwrap(),
            toks("However , I sometimes do skipping to fit myself .")
        );
    }

    #[test]
    fn apply_rejects_overlap_and_range() {
        let src = toks("a b c d");
        let overlapping = vec![
            Edit::new(0, 2, toks("x")).unwrap(),
            Edit::new(1, 3, toks("y")).unwrap(),
        ];
        assert!(apply_edits(&src, &overlapping).is_err());
        let out_of_range = vec![Edit::new(3, 5, toks("x")).unwrap()];
        assert!(apply_edits(&src, &out_of_range).is_err());
        let double_insert = vec![
            Edit::new(1, 1, toks("x")).unwrap(),
            Edit::new(1, 1, toks("y")).unwrap(),
        ];
        assert!(apply_edits(&src, &double_insert).is_err());
        assert!(Edit::new(2, 2, vec![]).is_err());
    }

    #[test]
    fn apply_empty_is_identity() {
        let src = toks("a b c");
        assert_eq!(apply_edits(&src, &[]).unwrap(), src);
    }

    #[test]
    fn remap_shifts_after_insertion() {
        let edits = vec![Edit::new(1, 1, toks("x")).unwrap()];
        let r = remap_indices(&[0, 4], &edits);
        assert_eq!(r.remapped, vec![0, 5]);
        assert!(r.dropped.is_empty());
    }

    #[test]
    fn remap_drops_inside_span() {
        let edits = vec![Edit::new(2, 5, toks("x")).unwrap()];
        let r = remap_indices(&[1, 3, 6], &edits);
        assert_eq!(r.remapped, vec![1, 4]);
        assert_eq!(r.dropped, vec![3]);
    }

    #[test]
    fn remap_without_edits_is_identity() {
        let r = remap_indices(&[0, 2, 7], &[]);
        assert_eq!(r.remapped, vec![0, 2, 7]);
        assert!(r.dropped.is_empty());
    }

    #[test]
    fn edit_serializes_with_short_keys() {
        let e = Edit::new(1, 2, toks("x")).unwrap();
        assert_eq!(
            serde_json::to_string(&e).unwrap(),
            r#"{"i":1,"j":2,"rep":["x"]}"#
        );
    }
}
