//! The extended output alphabet and the per-setting layouts of model inputs
//! and targets.
//!
//! A decoder emits symbols from three disjoint classes: vocabulary units,
//! pointers into the encoded source, and error types. Segments are delimited
//! only by class transitions, so the alphabet size is exactly
//! `|V| + n_units + |C|`.

mod tokenizer;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::corpus::ExplainedSample;
use crate::error::{Error, Result};
use crate::infer::DecodeGrammar;

pub use tokenizer::{type_unit, SubwordTokenizer, Tokenizer, TokenizerKind, BOS, CONTINUATION, EOS, SEP, UNK};

/// Source units together with each word's half-open unit span.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSource {
    pub units: Vec<usize>,
    pub spans: Vec<Range<usize>>,
}

impl EncodedSource {
    /// Unit positions covering every listed word.
    pub fn expand_words(&self, words: &[usize]) -> Vec<usize> {
        let mut out: Vec<usize> = words
            .iter()
            .filter_map(|&w| self.spans.get(w))
            .flat_map(|s| s.clone())
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Words whose units all appear in `positions`.
    pub fn covered_words(&self, positions: &[usize]) -> Vec<usize> {
        self.spans
            .iter()
            .enumerate()
            .filter(|(_, span)| (*span).clone().all(|u| positions.contains(&u)))
            .map(|(w, _)| w)
            .collect()
    }
}

pub fn encode_words<T: SubwordTokenizer + ?Sized>(words: &[String], tok: &T) -> EncodedSource {
    let mut units = Vec::with_capacity(words.len());
    let mut spans = Vec::with_capacity(words.len());
    for w in words {
        let start = units.len();
        units.extend(tok.encode_word(w));
        spans.push(start..units.len());
    }
    EncodedSource { units, spans }
}

pub fn encode_source<T: SubwordTokenizer + ?Sized>(sample: &ExplainedSample, tok: &T) -> EncodedSource {
    encode_words(&sample.source, tok)
}

/// One output symbol of the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtendedSymbol {
    Vocab(usize),
    Pointer(usize),
    ErrType(usize),
}

/// Index layout of the extended alphabet for one source.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExtendedSpace {
    pub vocab: usize,
    pub n_units: usize,
    pub types: usize,
}

impl ExtendedSpace {
    pub fn size(&self) -> usize {
        self.vocab + self.n_units + self.types
    }

    pub fn index(&self, s: ExtendedSymbol) -> usize {
        match s {
            ExtendedSymbol::Vocab(v) => v,
            ExtendedSymbol::Pointer(p) => self.vocab + p,
            ExtendedSymbol::ErrType(t) => self.vocab + self.n_units + t,
        }
    }

    pub fn symbol(&self, index: usize) -> ExtendedSymbol {
        if index < self.vocab {
            ExtendedSymbol::Vocab(index)
        } else if index < self.vocab + self.n_units {
            ExtendedSymbol::Pointer(index - self.vocab)
        } else {
            ExtendedSymbol::ErrType(index - self.vocab - self.n_units)
        }
    }

    pub fn contains(&self, s: ExtendedSymbol) -> bool {
        match s {
            ExtendedSymbol::Vocab(v) => v < self.vocab,
            ExtendedSymbol::Pointer(p) => p < self.n_units,
            ExtendedSymbol::ErrType(t) => t < self.types,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Baseline,
    Infusion,
    Explanation,
    SelfRationalization,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExplainOrder {
    #[serde(rename = "pre_explaining")]
    Pre,
    #[serde(rename = "post_explaining")]
    Post,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfusionPart {
    Evidence,
    Type,
}

/// A training setting: what the model reads and what it must emit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SettingSpec {
    pub setting: Setting,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order: Option<ExplainOrder>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub infusion_content: Vec<InfusionPart>,
}

impl SettingSpec {
    pub fn baseline() -> Self {
        SettingSpec {
            setting: Setting::Baseline,
            order: None,
            infusion_content: vec![],
        }
    }

    pub fn explanation() -> Self {
        SettingSpec {
            setting: Setting::Explanation,
            ..Self::baseline()
        }
    }

    pub fn infusion(content: Vec<InfusionPart>) -> Self {
        SettingSpec {
            setting: Setting::Infusion,
            order: None,
            infusion_content: content,
        }
    }

    pub fn self_rationalization(order: ExplainOrder) -> Self {
        SettingSpec {
            setting: Setting::SelfRationalization,
            order: Some(order),
            infusion_content: vec![],
        }
    }

    /// Every valid spec, with evidence-only and evidence+type infusion.
    pub fn all() -> Vec<SettingSpec> {
        vec![
            Self::baseline(),
            Self::infusion(vec![InfusionPart::Evidence]),
            Self::infusion(vec![InfusionPart::Evidence, InfusionPart::Type]),
            Self::explanation(),
            Self::self_rationalization(ExplainOrder::Pre),
            Self::self_rationalization(ExplainOrder::Post),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let sr = self.setting == Setting::SelfRationalization;
        if sr != self.order.is_some() {
            return Err(Error::Config(format!(
                "{:?}: an explaining order is required for self-rationalization and only there",
                self.setting
            )));
        }
        let inf = self.setting == Setting::Infusion;
        if inf == self.infusion_content.is_empty() {
            return Err(Error::Config(format!(
                "{:?}: infusion content must be non-empty for infusion and empty otherwise",
                self.setting
            )));
        }
        Ok(())
    }

    pub fn emits_correction(&self) -> bool {
        self.setting != Setting::Explanation
    }

    pub fn emits_explanation(&self) -> bool {
        matches!(self.setting, Setting::Explanation | Setting::SelfRationalization)
    }

    pub fn infuses(&self, part: InfusionPart) -> bool {
        self.setting == Setting::Infusion && self.infusion_content.contains(&part)
    }

    /// Short stable name, e.g. `self_rationalization_post`.
    pub fn name(&self) -> String {
        match (self.setting, self.order) {
            (Setting::Baseline, _) => "baseline".into(),
            (Setting::Explanation, _) => "explanation".into(),
            (Setting::SelfRationalization, Some(ExplainOrder::Pre)) => "self_rationalization_pre".into(),
            (Setting::SelfRationalization, _) => "self_rationalization_post".into(),
            (Setting::Infusion, _) => {
                let parts: Vec<&str> = self
                    .infusion_content
                    .iter()
                    .map(|p| match p {
                        InfusionPart::Evidence => "evidence",
                        InfusionPart::Type => "type",
                    })
                    .collect();
                format!("infusion_{}", parts.join("_"))
            }
        }
    }

    /// Additive logit mask (`0` or `-inf`) restricting the output space of
    /// the setting: vocabulary only when no explanation is produced, pointers
    /// and types (plus end-of-sequence) when only an explanation is produced.
    pub fn class_mask(&self, space: ExtendedSpace) -> Vec<f64> {
        let mut mask = vec![0.0; space.size()];
        let block = |mask: &mut Vec<f64>, range: Range<usize>| {
            mask[range].iter_mut().for_each(|m| *m = f64::NEG_INFINITY);
        };
        match self.setting {
            Setting::Baseline | Setting::Infusion => block(&mut mask, space.vocab..space.size()),
            Setting::Explanation => {
                block(&mut mask, 0..space.vocab);
                mask[EOS] = 0.0;
            }
            Setting::SelfRationalization => {}
        }
        mask
    }
}

fn evidence_units(sample: &ExplainedSample, enc: &EncodedSource) -> Vec<usize> {
    enc.expand_words(&sample.evidence)
}

/// Encoder input: source units, plus `SEP` and the infused explanation for
/// the infusion setting.
pub fn encoder_input<T: SubwordTokenizer + ?Sized>(
    sample: &ExplainedSample,
    spec: &SettingSpec,
    tok: &T,
) -> Result<Vec<usize>> {
    if spec.setting == Setting::Infusion {
        serialize_infusion_input(sample, spec, tok)
    } else {
        Ok(encode_source(sample, tok).units)
    }
}

/// `source ⊕ SEP ⊕ evidence units (source order) ⊕ type unit`, with the two
/// trailing parts present only when selected by the spec.
pub fn serialize_infusion_input<T: SubwordTokenizer + ?Sized>(
    sample: &ExplainedSample,
    spec: &SettingSpec,
    tok: &T,
) -> Result<Vec<usize>> {
    if spec.setting != Setting::Infusion {
        return Err(Error::Validation(format!(
            "infusion input requested for {:?}",
            spec.setting
        )));
    }
    let enc = encode_source(sample, tok);
    let mut units = enc.units.clone();
    units.push(tok.sep());
    if spec.infuses(InfusionPart::Evidence) {
        units.extend(evidence_units(sample, &enc).into_iter().map(|p| enc.units[p]));
    }
    if spec.infuses(InfusionPart::Type) {
        if let Some(t) = sample.error_type {
            units.push(tok.type_unit(t));
        }
    }
    Ok(units)
}

/// Gold decoder sequence, starting with `BOS` and ending with `EOS`.
pub fn serialize_target<T: SubwordTokenizer + ?Sized>(
    sample: &ExplainedSample,
    spec: &SettingSpec,
    tok: &T,
) -> Result<Vec<ExtendedSymbol>> {
    let correction = || -> Vec<ExtendedSymbol> {
        sample
            .target
            .iter()
            .flat_map(|w| tok.encode_word(w))
            .map(ExtendedSymbol::Vocab)
            .collect()
    };
    let explanation = || -> Result<Vec<ExtendedSymbol>> {
        let t = sample.error_type.ok_or_else(|| {
            Error::Validation(format!("sample {}: missing gold error type", sample.id))
        })?;
        let enc = encode_source(sample, tok);
        let mut out: Vec<ExtendedSymbol> = evidence_units(sample, &enc)
            .into_iter()
            .map(ExtendedSymbol::Pointer)
            .collect();
        out.push(ExtendedSymbol::ErrType(t));
        Ok(out)
    };
    let mut seq = vec![ExtendedSymbol::Vocab(tok.bos())];
    match (spec.setting, spec.order) {
        (Setting::Baseline | Setting::Infusion, _) => seq.extend(correction()),
        (Setting::Explanation, _) => seq.extend(explanation()?),
        (Setting::SelfRationalization, Some(ExplainOrder::Pre)) => {
            seq.extend(explanation()?);
            seq.extend(correction());
        }
        (Setting::SelfRationalization, _) => {
            seq.extend(correction());
            seq.extend(explanation()?);
        }
    }
    seq.push(ExtendedSymbol::Vocab(tok.eos()));
    Ok(seq)
}

/// The unit fed back to the decoder after emitting `symbol`.
pub fn index_to_token<T: SubwordTokenizer + ?Sized>(
    symbol: ExtendedSymbol,
    input_units: &[usize],
    tok: &T,
) -> Result<usize> {
    match symbol {
        ExtendedSymbol::Vocab(v) => Ok(v),
        ExtendedSymbol::Pointer(p) => input_units.get(p).copied().ok_or(Error::Index {
            index: p,
            len: input_units.len(),
        }),
        ExtendedSymbol::ErrType(t) => Ok(tok.type_unit(t)),
    }
}

/// A decoder output split by symbol class.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedOutput {
    pub correction: Vec<usize>,
    /// Sorted, distinct pointer positions.
    pub evidence_positions: Vec<usize>,
    pub error_type: Option<usize>,
    pub well_formed: bool,
}

/// Splits `symbols` (with or without a leading `BOS`; anything after the
/// first `EOS` is ignored) into correction, evidence and type. Out-of-order
/// sequences are still split by class but flagged as not well formed.
pub fn parse_output(symbols: &[ExtendedSymbol], spec: &SettingSpec) -> ParsedOutput {
    let body = match symbols.first() {
        Some(ExtendedSymbol::Vocab(BOS)) => &symbols[1..],
        _ => symbols,
    };
    let end = body
        .iter()
        .position(|s| *s == ExtendedSymbol::Vocab(EOS))
        .map_or(body.len(), |p| p + 1);
    let body = &body[..end];
    let mut out = ParsedOutput {
        well_formed: DecodeGrammar::new(spec.clone(), true).accepts(body),
        ..ParsedOutput::default()
    };
    for &s in body {
        match s {
            ExtendedSymbol::Vocab(EOS) => {}
            ExtendedSymbol::Vocab(v) => out.correction.push(v),
            ExtendedSymbol::Pointer(p) => out.evidence_positions.push(p),
            ExtendedSymbol::ErrType(t) => {
                out.error_type.get_or_insert(t);
            }
        }
    }
    out.evidence_positions.sort_unstable();
    out.evidence_positions.dedup();
    out
}
