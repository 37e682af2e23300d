//! Reconstruction of a one-error-per-sentence corpus.
//!
//! Each sample keeps a single annotated error, but its sentence may still
//! contain other mistakes that were fixed in the original fully corrected
//! pair. Denoising retrieves that pair, applies every other correction to
//! both sides of the sample and moves the evidence indices along.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::align::{apply_edits, check_edits, extract_edits, remap_indices, Edit};
use crate::corpus::ExplainedSample;
use crate::error::{Error, Result};
use crate::exec::{map_collect, ExecMode};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// An original sentence with all of its errors corrected.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferencePair {
    #[serde(rename = "source")]
    pub orig_source: Vec<String>,
    #[serde(rename = "target")]
    pub orig_target: Vec<String>,
}

/// Reads a JSON-lines reference file (`source` and `target` token arrays;
/// other fields are ignored).
pub fn load_references(path: impl AsRef<Path>) -> Result<Vec<ReferencePair>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: k + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `2·LCS(a, b) / (|a| + |b|)`, and 1 for two empty sentences.
pub fn similarity(a: &[String], b: &[String]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    2.0 * lcs_len(a, b) as f64 / (a.len() + b.len()) as f64
}

/// Index and score of the reference whose source is most similar to the
/// sample's source. The first reference wins ties.
pub fn retrieve_reference(sample: &ExplainedSample, refs: &[ReferencePair], threshold: f64) -> Result<(usize, f64)> {
    if refs.is_empty() {
        return Err(Error::Validation("reference list is empty".into()));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, r) in refs.iter().enumerate() {
        let s = similarity(&sample.source, &r.orig_source);
        if s > best.1 {
            best = (i, s);
        }
    }
    if best.1 < threshold {
        return Err(Error::NoMatch {
            best_score: best.1,
            threshold,
        });
    }
    Ok(best)
}

/// The annotated error of a sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KeptEdit {
    /// Source and target are identical.
    NoError,
    Single(Edit),
    /// More than one edit; the first is treated as the kept one.
    Multiple { first: Edit, count: usize },
}

impl KeptEdit {
    pub fn edit(&self) -> Option<&Edit> {
        match self {
            KeptEdit::NoError => None,
            KeptEdit::Single(e) | KeptEdit::Multiple { first: e, .. } => Some(e),
        }
    }
}

pub fn identify_kept_edit(sample: &ExplainedSample) -> KeptEdit {
    let mut edits = extract_edits(&sample.source, &sample.target);
    match edits.len() {
        0 => KeptEdit::NoError,
        1 => KeptEdit::Single(edits.remove(0)),
        count => KeptEdit::Multiple {
            first: edits.remove(0),
            count,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiseFlag {
    /// No reference passed the similarity threshold.
    NoMatch,
    /// The sample has no error; passed through.
    NoError,
    /// The sample has several edits; only the first was kept.
    MultiError,
    /// A residual correction overlaps the kept edit, or applying it would
    /// split the kept error into several edits; passed through.
    Conflict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseRecord {
    pub sample_id: String,
    pub changed: bool,
    /// Residual corrections, as edits of the original source.
    pub applied_edits: Vec<Edit>,
    /// Evidence indices that fell inside a residual correction.
    pub dropped_evidence: Vec<usize>,
    pub retrieval_score: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<DenoiseFlag>,
}

impl DenoiseRecord {
    fn unchanged(sample: &ExplainedSample, score: f64, flags: Vec<DenoiseFlag>) -> Self {
        DenoiseRecord {
            sample_id: sample.id.clone(),
            changed: false,
            applied_edits: Vec::new(),
            dropped_evidence: Vec::new(),
            retrieval_score: score,
            flags,
        }
    }
}

/// Moves a target-side edit onto the source through the kept edit, or `None`
/// when it overlaps the kept edit's target span.
fn project(e: &Edit, kept: &Edit) -> Option<Edit> {
    let ks = kept.start;
    let ke = kept.start + kept.replacement.len();
    let shift = |p: usize| p + kept.end - ke;
    let (start, end) = if e.end <= ks && !(e.is_insertion() && e.start == ks && ks < ke) {
        (e.start, e.end)
    } else if e.start >= ke && !(e.is_insertion() && e.start == ke && ks < ke && kept.is_insertion()) {
        (shift(e.start), shift(e.end))
    } else {
        return None;
    };
    Some(Edit {
        start,
        end,
        replacement: e.replacement.clone(),
    })
}

/// Applies every correction of `reference` other than the sample's own error
/// to both sides of the sample. Passed-through samples come back unchanged
/// with a flag on the record.
pub fn denoise_sample(sample: &ExplainedSample, reference: &ReferencePair, score: f64) -> (ExplainedSample, DenoiseRecord) {
    let mut flags = Vec::new();
    let kept = identify_kept_edit(sample);
    let kept = match kept {
        KeptEdit::NoError => {
            return (sample.clone(), DenoiseRecord::unchanged(sample, score, vec![DenoiseFlag::NoError]));
        }
        KeptEdit::Single(e) => e,
        KeptEdit::Multiple { first, .. } => {
            flags.push(DenoiseFlag::MultiError);
            first
        }
    };
    let residual = extract_edits(&sample.target, &reference.orig_target);
    let projected: Option<Vec<Edit>> = residual.iter().map(|e| project(e, &kept)).collect();
    let applied = match projected {
        Some(p) if check_edits(&p, sample.source.len()).is_ok() => p,
        _ => {
            flags.push(DenoiseFlag::Conflict);
            return (sample.clone(), DenoiseRecord::unchanged(sample, score, flags));
        }
    };
    if applied.is_empty() {
        return (sample.clone(), DenoiseRecord::unchanged(sample, score, flags));
    }
    let source = apply_edits(&sample.source, &applied).expect("projected edits were checked");
    let target = apply_edits(&sample.target, &residual).expect("extracted edits are valid");
    if !flags.contains(&DenoiseFlag::MultiError) && extract_edits(&source, &target).len() != 1 {
        // an adjacent residual correction realigned the pair
        flags.push(DenoiseFlag::Conflict);
        return (sample.clone(), DenoiseRecord::unchanged(sample, score, flags));
    }
    let moved = remap_indices(&sample.evidence, &applied);
    let out = ExplainedSample {
        id: sample.id.clone(),
        source,
        target,
        evidence: moved.remapped,
        error_type: sample.error_type,
    };
    let record = DenoiseRecord {
        sample_id: sample.id.clone(),
        changed: true,
        applied_edits: applied,
        dropped_evidence: moved.dropped,
        retrieval_score: score,
        flags,
    };
    (out, record)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DenoiseSummary {
    pub total: usize,
    pub changed: usize,
    pub changed_pct: f64,
    /// Samples that lost at least one evidence index.
    pub dropped_evidence_samples: usize,
    pub no_match: usize,
    pub no_error: usize,
    pub multi_error: usize,
    pub conflicts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseReport {
    pub summary: DenoiseSummary,
    pub records: Vec<DenoiseRecord>,
}

/// Denoises every sample. Failures are recorded per sample and never abort
/// the run.
pub fn denoise_corpus(
    corpus: &[ExplainedSample],
    refs: &[ReferencePair],
    threshold: f64,
    exec: ExecMode,
) -> (Vec<ExplainedSample>, DenoiseReport) {
    let results = map_collect(exec, corpus, |s| match retrieve_reference(s, refs, threshold) {
        Ok((i, score)) => denoise_sample(s, &refs[i], score),
        Err(e) => {
            let score = match e {
                Error::NoMatch { best_score, .. } => best_score,
                _ => 0.0,
            };
            (s.clone(), DenoiseRecord::unchanged(s, score, vec![DenoiseFlag::NoMatch]))
        }
    });
    let mut samples = Vec::with_capacity(results.len());
    let mut records = Vec::with_capacity(results.len());
    let mut summary = DenoiseSummary {
        total: corpus.len(),
        ..DenoiseSummary::default()
    };
    for (s, r) in results {
        summary.changed += r.changed as usize;
        summary.dropped_evidence_samples += !r.dropped_evidence.is_empty() as usize;
        for f in &r.flags {
            match f {
                DenoiseFlag::NoMatch => summary.no_match += 1,
                DenoiseFlag::NoError => summary.no_error += 1,
                DenoiseFlag::MultiError => summary.multi_error += 1,
                DenoiseFlag::Conflict => summary.conflicts += 1,
            }
        }
        samples.push(s);
        records.push(r);
    }
    if summary.total > 0 {
        summary.changed_pct = 100.0 * summary.changed as f64 / summary.total as f64;
    }
    (samples, DenoiseReport { summary, records })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn sample(src: &str, tgt: &str, evidence: Vec<usize>) -> ExplainedSample {
        ExplainedSample {
            id: "s".into(),
            source: toks(src),
            target: toks(tgt),
            evidence,
            error_type: Some(0),
        }
    }

    fn pair(src: &str, tgt: &str) -> ReferencePair {
        ReferencePair {
            orig_source: toks(src),
            orig_target: toks(tgt),
        }
    }

    #[test]
    fn similarity_is_lcs_ratio() {
        let a = toks("a b c d e f g h i j");
        let b = toks("a b c d e f g h x y");
        assert!((similarity(&a, &b) - 0.8).abs() < 1e-12);
        assert_eq!(similarity(&a, &a), 1.0);
    }

    #[test]
    fn retrieval_prefers_closer_reference_and_first_on_ties() {
        let s = sample("a b c d e f g h i j", "a b c d e f g h i k", vec![]);
        let refs = vec![
            pair("a b x x x x x x x x", "-"),
            pair("a b c d e f g h y z", "-"),
            pair("a b c d e f g h z y", "-"),
        ];
        let (i, score) = retrieve_reference(&s, &refs, 0.5).unwrap();
        assert_eq!(i, 1);
        assert!((score - 0.8).abs() < 1e-12);
        assert!(matches!(retrieve_reference(&s, &refs[..1], 0.5), Err(Error::NoMatch { .. })));
        assert!(matches!(retrieve_reference(&s, &[], 0.5), Err(Error::Validation(_))));
    }

    #[test]
    fn kept_edit_kinds() {
        let s = sample("its name", "and its name", vec![]);
        assert_eq!(identify_kept_edit(&s), KeptEdit::Single(Edit::new(0, 0, toks("and")).unwrap()));
        assert_eq!(identify_kept_edit(&sample("a b", "a b", vec![])), KeptEdit::NoError);
        let two = sample("a b c d e f", "x b c d e y", vec![]);
        assert!(matches!(identify_kept_edit(&two), KeptEdit::Multiple { count: 2, .. }));
    }

    #[test]
    fn reference_equal_to_target_changes_nothing() {
        let s = sample("a b c", "a x c", vec![0]);
        let (out, rec) = denoise_sample(&s, &pair("a b c", "a x c"), 1.0);
        assert_eq!(out, s);
        assert!(!rec.changed && rec.applied_edits.is_empty());
    }

    #[test]
    fn residual_edits_shift_evidence() {
        // kept: c -> C at 2; residual: insert "z" at 0 and delete "e" at 4
        let s = sample("a b c d e f", "a b C d e f", vec![1, 3, 4]);
        let (out, rec) = denoise_sample(&s, &pair("?", "z a b C d f"), 1.0);
        assert_eq!(out.source, toks("z a b c d f"));
        assert_eq!(out.target, toks("z a b C d f"));
        assert_eq!(out.evidence, vec![2, 4]);
        assert_eq!(rec.dropped_evidence, vec![4]);
        assert_eq!(extract_edits(&out.source, &out.target).len(), 1);
    }

    #[test]
    fn overlapping_residual_is_a_conflict() {
        let s = sample("a b c d", "a B c d", vec![]);
        let (out, rec) = denoise_sample(&s, &pair("?", "a X c d"), 1.0);
        assert_eq!(out, s);
        assert_eq!(rec.flags, vec![DenoiseFlag::Conflict]);
    }

    #[test]
    fn corpus_summary_counts() {
        let corpus = vec![
            sample("a b c d", "a B c d", vec![]),
            sample("p q r s", "p q R s", vec![]),
            sample("u v w", "u v w", vec![]),
        ];
        let refs = vec![pair("a b c d", "a B c d ."), pair("p q r s", "p q R s"), pair("u v w", "u v w")];
        let (out, report) = denoise_corpus(&corpus, &refs, 0.5, ExecMode::Sequential);
        assert_eq!(out[0].target, toks("a B c d ."));
        assert_eq!(report.summary.changed, 1);
        assert_eq!(report.summary.no_error, 1);
        assert!((report.summary.changed_pct - 100.0 / 3.0).abs() < 1e-9);
    }
}
