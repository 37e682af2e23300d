//! Explanation-annotated samples, the error-type registry, JSON-lines I/O and
//! corpus statistics.

mod evidence;
pub mod synth;

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::align::Edit;
use crate::error::{Error, Result};

pub use evidence::{adjacent_evidence, adjacent_window, random_evidence, ADJACENT_MAX_DISTANCE};
pub use synth::{gen_synthetic_corpus, RuleKind, RuleSpec, SynthConfig};

/// One sentence with its correction and explanation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExplainedSample {
    pub id: String,
    pub source: Vec<String>,
    pub target: Vec<String>,
    /// Strictly ascending source word indices.
    pub evidence: Vec<usize>,
    /// Label id in the corpus registry.
    pub error_type: Option<usize>,
}

impl ExplainedSample {
    pub fn validate(&self, registry: &ErrorTypeRegistry) -> Result<()> {
        if self.source.is_empty() {
            return Err(Error::Validation(format!("sample {}: empty source", self.id)));
        }
        let n = self.source.len();
        for (k, &e) in self.evidence.iter().enumerate() {
            if e >= n {
                return Err(Error::Validation(format!(
                    "sample {}: evidence index {e} out of range for source length {n}",
                    self.id
                )));
            }
            if k > 0 && self.evidence[k - 1] >= e {
                return Err(Error::Validation(format!(
                    "sample {}: evidence indices not strictly ascending",
                    self.id
                )));
            }
        }
        if let Some(t) = self.error_type {
            if t >= registry.len() {
                return Err(Error::Validation(format!(
                    "sample {}: error type id {t} not registered",
                    self.id
                )));
            }
        }
        Ok(())
    }

    pub fn has_evidence(&self) -> bool {
        !self.evidence.is_empty()
    }

    /// The same sample with different evidence indices (sorted, deduplicated).
    pub fn with_evidence(&self, mut evidence: Vec<usize>) -> Self {
        evidence.sort_unstable();
        evidence.dedup();
        ExplainedSample {
            evidence,
            ..self.clone()
        }
    }
}

/// Ordered set of error-type labels; the position of a label is its id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct ErrorTypeRegistry {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl ErrorTypeRegistry {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Validation("error-type registry is empty".into()));
        }
        let mut index = HashMap::with_capacity(labels.len());
        for (i, l) in labels.iter().enumerate() {
            if l.trim().is_empty() {
                return Err(Error::Validation(format!("blank error-type label at position {i}")));
            }
            if index.insert(l.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate error-type label {l:?}")));
            }
        }
        Ok(ErrorTypeRegistry { labels, index })
    }

    /// Reads one label per line; blank lines are ignored.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_string)
                .collect(),
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.labels.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, id: usize) -> Option<&str> {
        self.labels.get(id).map(String::as_str)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

impl TryFrom<Vec<String>> for ErrorTypeRegistry {
    type Error = Error;
    fn try_from(labels: Vec<String>) -> Result<Self> {
        Self::new(labels)
    }
}

impl From<ErrorTypeRegistry> for Vec<String> {
    fn from(r: ErrorTypeRegistry) -> Self {
        r.labels
    }
}

/// On-disk form of a sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub source: Vec<String>,
    pub target: Vec<String>,
    #[serde(default)]
    pub evidence_indices: Vec<usize>,
    #[serde(default)]
    pub error_type: Option<String>,
}

impl SampleRecord {
    pub fn into_sample(self, registry: &ErrorTypeRegistry) -> Result<ExplainedSample> {
        let error_type = match self.error_type {
            None => None,
            Some(label) => Some(registry.id(&label).ok_or_else(|| {
                Error::Validation(format!(
                    "sample {}: unknown error type {label:?} (registered: {})",
                    self.id,
                    registry.labels().join(", ")
                ))
            })?),
        };
        let sample = ExplainedSample {
            id: self.id,
            source: self.source,
            target: self.target,
            evidence: self.evidence_indices,
            error_type,
        };
        sample.validate(registry)?;
        Ok(sample)
    }

    pub fn from_sample(sample: &ExplainedSample, registry: &ErrorTypeRegistry) -> Self {
        SampleRecord {
            id: sample.id.clone(),
            source: sample.source.clone(),
            target: sample.target.clone(),
            evidence_indices: sample.evidence.clone(),
            error_type: sample
                .error_type
                .and_then(|t| registry.label(t))
                .map(str::to_string),
        }
    }
}

pub fn read_corpus(reader: impl BufRead, registry: &ErrorTypeRegistry) -> Result<Vec<ExplainedSample>> {
    let mut out = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line_no = k + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        out.push(rec.into_sample(registry)?);
    }
    Ok(out)
}

/// Loads a JSON-lines corpus, validating every sample against `registry`.
pub fn load_corpus(path: impl AsRef<Path>, registry: &ErrorTypeRegistry) -> Result<Vec<ExplainedSample>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_corpus(BufReader::new(file), registry)
}

pub fn write_corpus_to(
    mut writer: impl Write,
    samples: &[ExplainedSample],
    registry: &ErrorTypeRegistry,
) -> Result<()> {
    for s in samples {
        let line = serde_json::to_string(&SampleRecord::from_sample(s, registry))?;
        writeln!(writer, "{line}").map_err(|e| Error::io("<writer>", e))?;
    }
    Ok(())
}

pub fn write_corpus(
    path: impl AsRef<Path>,
    samples: &[ExplainedSample],
    registry: &ErrorTypeRegistry,
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_corpus_to(&mut w, samples, registry)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Dataset statistics in the shape of a corpus summary table.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub sentence_count: usize,
    pub with_evidence_count: usize,
    pub with_evidence_pct: f64,
    pub words_per_sentence: f64,
    pub edits_per_sentence: f64,
    /// Averaged over samples that carry at least one evidence word.
    pub evidence_per_sentence: f64,
}

pub fn compute_stats<F>(corpus: &[ExplainedSample], edit_fn: F) -> CorpusStats
where
    F: Fn(&[String], &[String]) -> Vec<Edit>,
{
    if corpus.is_empty() {
        return CorpusStats::default();
    }
    let n = corpus.len() as f64;
    let with_evidence: Vec<&ExplainedSample> = corpus.iter().filter(|s| s.has_evidence()).collect();
    let words: usize = corpus.iter().map(|s| s.source.len()).sum();
    let edits: usize = corpus.iter().map(|s| edit_fn(&s.source, &s.target).len()).sum();
    let evidence: usize = with_evidence.iter().map(|s| s.evidence.len()).sum();
    CorpusStats {
        sentence_count: corpus.len(),
        with_evidence_count: with_evidence.len(),
        with_evidence_pct: 100.0 * with_evidence.len() as f64 / n,
        words_per_sentence: words as f64 / n,
        edits_per_sentence: edits as f64 / n,
        evidence_per_sentence: if with_evidence.is_empty() {
            0.0
        } else {
            evidence as f64 / with_evidence.len() as f64
        },
    }
}
