//! Micro-averaged edit-level correction scores, word-level evidence scores
//! and type accuracy.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::align::{extract_edits, Edit};
use crate::codec::{encode_source, SubwordTokenizer};
use crate::corpus::{ErrorTypeRegistry, ExplainedSample};
use crate::error::{Error, Result};
use crate::infer::PredictionRecord;

/// `(1+β²)PR / (β²P + R)`, or 0 when both are 0.
pub fn fbeta(p: f64, r: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let den = b2 * p + r;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + b2) * p * r / den
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// Number of predicted items (`TP + FP`).
    pub fn predicted(&self) -> usize {
        self.tp + self.fp
    }

    fn add(&mut self, o: Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectionScores {
    #[serde(flatten)]
    pub counts: Counts,
    pub p: f64,
    pub r: f64,
    pub f05: f64,
}

impl From<Counts> for CorrectionScores {
    fn from(c: Counts) -> Self {
        let (p, r) = (c.precision(), c.recall());
        CorrectionScores {
            counts: c,
            p,
            r,
            f05: fbeta(p, r, 0.5),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExplanationScores {
    #[serde(flatten)]
    pub counts: Counts,
    pub p: f64,
    pub r: f64,
    pub f1: f64,
    pub f05: f64,
}

impl From<Counts> for ExplanationScores {
    fn from(c: Counts) -> Self {
        let (p, r) = (c.precision(), c.recall());
        ExplanationScores {
            counts: c,
            p,
            r,
            f1: fbeta(p, r, 1.0),
            f05: fbeta(p, r, 0.5),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correction: Option<Counts>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub explanation: Option<Counts>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub type_correct: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub correction: Option<CorrectionScores>,
    pub explanation: Option<ExplanationScores>,
    pub type_accuracy: Option<f64>,
    pub per_sample: Vec<SampleScore>,
}

/// Predictions reordered to follow `gold`; ids must match one-to-one.
fn align_by_id<'a>(preds: &'a [PredictionRecord], gold: &[ExplainedSample]) -> Result<Vec<&'a PredictionRecord>> {
    if preds.len() != gold.len() {
        return Err(Error::Validation(format!(
            "{} predictions for {} gold samples",
            preds.len(),
            gold.len()
        )));
    }
    let by_id: HashMap<&str, &PredictionRecord> = preds.iter().map(|p| (p.id.as_str(), p)).collect();
    if by_id.len() != preds.len() {
        return Err(Error::Validation("duplicate prediction ids".into()));
    }
    gold.iter()
        .map(|g| {
            by_id
                .get(g.id.as_str())
                .copied()
                .ok_or_else(|| Error::Validation(format!("no prediction for sample {}", g.id)))
        })
        .collect()
}

/// Edit counts of one sentence: a hypothesis edit is a TP iff an identical
/// (span, replacement) edit is among the reference edits.
pub fn edit_counts(source: &[String], hypothesis: &[String], reference: &[String]) -> Counts {
    let hyp = extract_edits(source, hypothesis);
    let gold: Vec<Edit> = extract_edits(source, reference);
    let tp = hyp.iter().filter(|e| gold.contains(e)).count();
    Counts {
        tp,
        fp: hyp.len() - tp,
        fn_: gold.len() - tp,
    }
}

fn correction_counts(preds: &[&PredictionRecord], gold: &[ExplainedSample]) -> Vec<Counts> {
    preds
        .iter()
        .zip(gold)
        .map(|(p, g)| edit_counts(&g.source, &p.correction, &g.target))
        .collect()
}

pub fn score_correction(preds: &[PredictionRecord], gold: &[ExplainedSample]) -> Result<CorrectionScores> {
    let aligned = align_by_id(preds, gold)?;
    let mut total = Counts::default();
    correction_counts(&aligned, gold).into_iter().for_each(|c| total.add(c));
    Ok(total.into())
}

/// Evidence counts of one sentence over words. A gold word is a TP only if
/// every one of its units was predicted; a word with any predicted unit
/// counts as predicted.
pub fn evidence_counts<T: SubwordTokenizer + ?Sized>(pred: &PredictionRecord, gold: &ExplainedSample, tok: &T) -> Counts {
    let enc = encode_source(gold, tok);
    let units: BTreeSet<usize> = if pred.evidence_units.is_empty() {
        enc.expand_words(&pred.evidence_word_indices).into_iter().collect()
    } else {
        pred.evidence_units.iter().copied().collect()
    };
    let gold_words: BTreeSet<usize> = gold.evidence.iter().copied().collect();
    let mut c = Counts::default();
    for (w, span) in enc.spans.iter().enumerate() {
        let hit = span.clone().filter(|u| units.contains(u)).count();
        let full = hit == span.len();
        match (gold_words.contains(&w), hit > 0) {
            (true, _) if full => c.tp += 1,
            (true, _) => c.fn_ += 1,
            (false, true) => c.fp += 1,
            (false, false) => {}
        }
    }
    c
}

pub fn score_explanation<T: SubwordTokenizer + ?Sized>(
    preds: &[PredictionRecord],
    gold: &[ExplainedSample],
    tok: &T,
) -> Result<ExplanationScores> {
    let aligned = align_by_id(preds, gold)?;
    let mut total = Counts::default();
    for (p, g) in aligned.iter().zip(gold) {
        total.add(evidence_counts(p, g, tok));
    }
    Ok(total.into())
}

fn type_hits(preds: &[&PredictionRecord], gold: &[ExplainedSample], registry: &ErrorTypeRegistry) -> Vec<Option<bool>> {
    preds
        .iter()
        .zip(gold)
        .map(|(p, g)| {
            g.error_type
                .map(|t| p.error_type.as_deref().is_some_and(|l| registry.label(t) == Some(l)))
        })
        .collect()
}

/// Accuracy over samples that have a gold type; `0` when there are none.
pub fn score_types(preds: &[PredictionRecord], gold: &[ExplainedSample], registry: &ErrorTypeRegistry) -> Result<f64> {
    let aligned = align_by_id(preds, gold)?;
    let hits = type_hits(&aligned, gold, registry);
    let typed = hits.iter().flatten().count();
    Ok(ratio(hits.iter().flatten().filter(|&&h| h).count(), typed))
}

/// Which blocks of an [`EvalReport`] to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalScope {
    pub correction: bool,
    pub explanation: bool,
}

pub fn evaluate<T: SubwordTokenizer + ?Sized>(
    preds: &[PredictionRecord],
    gold: &[ExplainedSample],
    tok: &T,
    registry: &ErrorTypeRegistry,
    scope: EvalScope,
) -> Result<EvalReport> {
    let aligned = align_by_id(preds, gold)?;
    let cor = scope.correction.then(|| correction_counts(&aligned, gold));
    let exp: Option<Vec<Counts>> = scope
        .explanation
        .then(|| aligned.iter().zip(gold).map(|(p, g)| evidence_counts(p, g, tok)).collect());
    let types = scope.explanation.then(|| type_hits(&aligned, gold, registry));
    let sum = |v: &Vec<Counts>| {
        let mut t = Counts::default();
        v.iter().for_each(|&c| t.add(c));
        t
    };
    let per_sample = gold
        .iter()
        .enumerate()
        .map(|(i, g)| SampleScore {
            id: g.id.clone(),
            correction: cor.as_ref().map(|c| c[i]),
            explanation: exp.as_ref().map(|c| c[i]),
            type_correct: types.as_ref().and_then(|t| t[i]),
        })
        .collect();
    Ok(EvalReport {
        correction: cor.as_ref().map(|c| sum(c).into()),
        explanation: exp.as_ref().map(|c| sum(c).into()),
        type_accuracy: types.map(|t| {
            let typed = t.iter().flatten().count();
            ratio(t.iter().flatten().filter(|&&h| h).count(), typed)
        }),
        per_sample,
    })
}

impl EvalReport {
    /// Markdown summary table.
    pub fn to_markdown(&self) -> String {
        let pct = |x: f64| format!("{:.2}", 100.0 * x);
        let mut s = String::from("| block | TP | FP | FN | P | R | F1 | F0.5 |\n|---|---|---|---|---|---|---|---|\n");
        if let Some(c) = &self.correction {
            s += &format!(
                "| correction | {} | {} | {} | {} | {} | - | {} |\n",
                c.counts.tp,
                c.counts.fp,
                c.counts.fn_,
                pct(c.p),
                pct(c.r),
                pct(c.f05)
            );
        }
        if let Some(e) = &self.explanation {
            s += &format!(
                "| explanation | {} | {} | {} | {} | {} | {} | {} |\n",
                e.counts.tp,
                e.counts.fp,
                e.counts.fn_,
                pct(e.p),
                pct(e.r),
                pct(e.f1),
                pct(e.f05)
            );
        }
        if let Some(a) = self.type_accuracy {
            s += &format!("\ntype accuracy: {}\n", pct(a));
        }
        s
    }
}
