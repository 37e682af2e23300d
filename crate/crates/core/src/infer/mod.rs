//! Grammar-constrained greedy and beam decoding, and batch prediction.

mod grammar;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::codec::{encode_source, encoder_input, parse_output, ExtendedSpace, ExtendedSymbol, SettingSpec, SubwordTokenizer, EOS};
use crate::corpus::{ErrorTypeRegistry, ExplainedSample};
use crate::error::{Error, Result};
use crate::exec::{map_collect, ExecMode};
use crate::model::{tagging, DecoderCache, EncoderState, Model};

pub use grammar::{DecodeGrammar, GrammarState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Beam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub beam_size: usize,
    pub max_len: usize,
    /// Scores are `log p / len^length_penalty`.
    pub length_penalty: f64,
    /// Enforce the setting's segment order (class restrictions always apply).
    pub constrained: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            strategy: Strategy::Beam,
            beam_size: 5,
            max_len: 64,
            length_penalty: 1.0,
            constrained: true,
        }
    }
}

impl DecodeConfig {
    pub fn greedy() -> Self {
        DecodeConfig {
            strategy: Strategy::Greedy,
            beam_size: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || self.max_len == 0 {
            return Err(Error::Config("beam_size and max_len must be at least 1".into()));
        }
        Ok(())
    }

    fn normalise(&self, logp: f64, len: usize) -> f64 {
        logp / (len.max(1) as f64).powf(self.length_penalty)
    }
}

/// A decoded output sequence (without the leading `BOS`).
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub symbols: Vec<ExtendedSymbol>,
    pub log_prob: f64,
    /// Length-normalised log-probability.
    pub score: f64,
    /// The length limit was hit before `EOS`.
    pub truncated: bool,
}

#[derive(Clone)]
struct Hyp {
    symbols: Vec<ExtendedSymbol>,
    state: GrammarState,
    cache: DecoderCache,
    log_prob: f64,
    next: Vec<f64>,
}

/// Log-probabilities renormalised over the legal symbols; illegal ones are `-inf`.
fn legal_log_probs(logits: &[f64], legal: &[bool]) -> Vec<f64> {
    let max = logits
        .iter()
        .zip(legal)
        .filter(|(_, &ok)| ok)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits
        .iter()
        .zip(legal)
        .filter(|(_, &ok)| ok)
        .map(|(&l, _)| (l - max).exp())
        .sum();
    let lz = max + z.ln();
    logits
        .iter()
        .zip(legal)
        .map(|(&l, &ok)| if ok { l - lz } else { f64::NEG_INFINITY })
        .collect()
}

struct Decoder<'a> {
    model: &'a Model,
    enc: EncoderState,
    space: ExtendedSpace,
    grammar: DecodeGrammar,
    reserved: &'a [usize],
    cfg: &'a DecodeConfig,
}

impl Decoder<'_> {
    fn unit_of(&self, s: ExtendedSymbol) -> usize {
        match s {
            ExtendedSymbol::Vocab(v) => v,
            ExtendedSymbol::Pointer(p) => self.enc.units[p],
            ExtendedSymbol::ErrType(t) => crate::codec::type_unit(t),
        }
    }

    fn start(&self) -> Result<Hyp> {
        let mut cache = self.model.new_cache();
        let next = self.model.step_logits(&self.enc, &mut cache, crate::codec::BOS)?;
        Ok(Hyp {
            symbols: vec![],
            state: self.grammar.start(),
            cache,
            log_prob: 0.0,
            next,
        })
    }

    fn log_probs(&self, h: &Hyp) -> Vec<f64> {
        let legal = self.grammar.allowed_symbols(h.state, self.space, self.reserved);
        legal_log_probs(&h.next, &legal)
    }

    fn extend(&self, h: &Hyp, index: usize, lp: f64) -> Result<Hyp> {
        let s = self.space.symbol(index);
        let state = self.grammar.advance(h.state, s).expect("masked to legal symbols");
        let mut symbols = h.symbols.clone();
        symbols.push(s);
        let mut cache = h.cache.clone();
        let next = if state.finished() {
            vec![]
        } else {
            self.model.step_logits(&self.enc, &mut cache, self.unit_of(s))?
        };
        Ok(Hyp {
            symbols,
            state,
            cache,
            log_prob: h.log_prob + lp,
            next,
        })
    }

    fn finish(&self, h: Hyp) -> Decoded {
        let truncated = !h.state.finished();
        Decoded {
            score: self.cfg.normalise(h.log_prob, h.symbols.len()),
            symbols: h.symbols,
            log_prob: h.log_prob,
            truncated,
        }
    }

    fn greedy(&self) -> Result<Decoded> {
        let mut h = self.start()?;
        while !h.state.finished() && h.symbols.len() < self.cfg.max_len {
            let lps = self.log_probs(&h);
            // first maximum, i.e. the lowest index among ties
            let (best, lp) = lps
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
            if lp == f64::NEG_INFINITY {
                break;
            }
            h = self.extend(&h, best, lp)?;
        }
        Ok(self.finish(h))
    }

    fn beam(&self) -> Result<Decoded> {
        let k = self.cfg.beam_size;
        let mut alive = vec![self.start()?];
        let mut done: Vec<Decoded> = Vec::new();
        for _ in 0..self.cfg.max_len {
            let mut cands: Vec<(f64, usize, usize, f64)> = Vec::new();
            for (hi, h) in alive.iter().enumerate() {
                for (i, &lp) in self.log_probs(h).iter().enumerate() {
                    if lp > f64::NEG_INFINITY {
                        cands.push((h.log_prob + lp, hi, i, lp));
                    }
                }
            }
            cands.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap_or(Ordering::Equal)
                    .then(a.1.cmp(&b.1))
                    .then(a.2.cmp(&b.2))
            });
            let mut next = Vec::with_capacity(k);
            for (rank, &(_, hi, i, lp)) in cands.iter().enumerate() {
                if i == EOS {
                    if rank < k {
                        let h = self.extend(&alive[hi], i, lp)?;
                        done.push(self.finish(h));
                    }
                } else if next.len() < k {
                    next.push(self.extend(&alive[hi], i, lp)?);
                }
            }
            alive = next;
            if alive.is_empty() || done.len() >= k {
                break;
            }
        }
        // the greedy path is always a candidate, so beam never scores below it
        let greedy = self.greedy()?;
        let pool_empty = done.is_empty();
        done.push(greedy);
        if pool_empty {
            done.extend(alive.into_iter().map(|h| self.finish(h)));
        }
        Ok(pick_best(done))
    }
}

fn symbol_key(s: &[ExtendedSymbol], space: &ExtendedSpace) -> Vec<usize> {
    s.iter().map(|&x| space.index(x)).collect()
}

/// Highest score; finished before truncated; ties go to the sequence with
/// the lexicographically smallest symbol indices.
fn pick_best(mut pool: Vec<Decoded>) -> Decoded {
    let space = ExtendedSpace {
        vocab: usize::MAX / 4,
        n_units: usize::MAX / 4,
        types: 0,
    };
    pool.sort_by(|a, b| {
        a.truncated
            .cmp(&b.truncated)
            .then(b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal))
            .then_with(|| symbol_key(&a.symbols, &space).cmp(&symbol_key(&b.symbols, &space)))
    });
    pool.swap_remove(0)
}

/// Decodes one encoder input under the grammar of `spec`. Vocabulary ids in
/// `reserved` are never emitted.
pub fn decode(model: &Model, enc_units: &[usize], spec: &SettingSpec, cfg: &DecodeConfig, reserved: &[usize]) -> Result<Decoded> {
    cfg.validate()?;
    let enc = model.encode(enc_units)?;
    let d = Decoder {
        space: model.space(&enc),
        model,
        enc,
        grammar: DecodeGrammar::new(spec.clone(), cfg.constrained),
        reserved,
        cfg,
    };
    match cfg.strategy {
        Strategy::Greedy => d.greedy(),
        Strategy::Beam => d.beam(),
    }
}

/// One line of a prediction dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub correction: Vec<String>,
    pub evidence_word_indices: Vec<usize>,
    /// Predicted evidence positions over source units.
    #[serde(default)]
    pub evidence_units: Vec<usize>,
    pub error_type: Option<String>,
    pub well_formed: bool,
    pub score: f64,
    pub truncated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl PredictionRecord {
    fn failed(id: &str, e: &Error) -> Self {
        PredictionRecord {
            id: id.to_string(),
            correction: vec![],
            evidence_word_indices: vec![],
            evidence_units: vec![],
            error_type: None,
            well_formed: false,
            score: f64::NEG_INFINITY,
            truncated: false,
            error: Some(e.to_string()),
        }
    }
}

fn predict_one<T: SubwordTokenizer + ?Sized>(
    model: &Model,
    sample: &ExplainedSample,
    spec: &SettingSpec,
    cfg: &DecodeConfig,
    tok: &T,
    registry: &ErrorTypeRegistry,
) -> Result<PredictionRecord> {
    let units = encoder_input(sample, spec, tok)?;
    let reserved = tok.reserved();
    let out = decode(model, &units, spec, cfg, &reserved)?;
    let parsed = parse_output(&out.symbols, spec);
    let enc = encode_source(sample, tok);
    let (mut positions, mut ty) = (parsed.evidence_positions, parsed.error_type);
    // pointers beyond the source (infused tail) are not evidence
    positions.retain(|&p| p < enc.units.len());
    if model.has_tagging_head() && !spec.emits_explanation() {
        let st = model.encode(&units)?;
        let (u, t) = tagging::decode_tags(&model.tag_logits(&st)?, tok.type_count());
        positions = u;
        ty = t;
    }
    Ok(PredictionRecord {
        id: sample.id.clone(),
        correction: tok.decode_units(&parsed.correction),
        evidence_word_indices: enc.covered_words(&positions),
        evidence_units: positions,
        error_type: ty.and_then(|t| registry.label(t)).map(str::to_string),
        well_formed: parsed.well_formed,
        score: out.score,
        truncated: out.truncated,
        error: None,
    })
}

/// Decodes every sample; failures are recorded per sample.
pub fn predict<T: SubwordTokenizer + ?Sized>(
    model: &Model,
    corpus: &[ExplainedSample],
    spec: &SettingSpec,
    cfg: &DecodeConfig,
    tok: &T,
    registry: &ErrorTypeRegistry,
    exec: ExecMode,
) -> Vec<PredictionRecord> {
    map_collect(exec, corpus, |s| {
        predict_one(model, s, spec, cfg, tok, registry).unwrap_or_else(|e| {
            log::warn!("sample {}: {e}", s.id);
            PredictionRecord::failed(&s.id, &e)
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{ExplainOrder, InfusionPart, Tokenizer, TokenizerKind};
    use crate::model::ModelConfig;

    fn model(vocab: usize, types: usize, seed: u64) -> Model {
        Model::new(ModelConfig {
            d_model: 8,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            ff_dim: 8,
            vocab_size: vocab,
            type_count: types,
            dropout: 0.0,
            seed,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn beam_one_is_greedy_and_beam_dominates() {
        for seed in 0..5 {
            let m = model(14, 3, seed);
            for spec in SettingSpec::all() {
                let g = decode(&m, &[7, 8, 9, 10], &spec, &DecodeConfig { max_len: 12, ..DecodeConfig::greedy() }, &[0, 2]).unwrap();
                let b1 = DecodeConfig {
                    strategy: Strategy::Beam,
                    beam_size: 1,
                    max_len: 12,
                    ..DecodeConfig::default()
                };
                assert_eq!(decode(&m, &[7, 8, 9, 10], &spec, &b1, &[0, 2]).unwrap(), g);
                let b5 = DecodeConfig { max_len: 12, ..DecodeConfig::default() };
                let b = decode(&m, &[7, 8, 9, 10], &spec, &b5, &[0, 2]).unwrap();
                assert!(b.truncated || g.truncated || b.score >= g.score - 1e-12);
                let grammar = DecodeGrammar::new(spec.clone(), true);
                for d in [&g, &b] {
                    assert!(grammar.accepts(&d.symbols) || (d.truncated && grammar.accepts_prefix(&d.symbols)));
                }
            }
        }
    }

    #[test]
    fn truncation_is_flagged() {
        let m = model(14, 3, 1);
        let cfg = DecodeConfig {
            max_len: 1,
            ..DecodeConfig::greedy()
        };
        let d = decode(&m, &[7], &SettingSpec::explanation(), &cfg, &[]).unwrap();
        assert!(d.truncated || d.symbols == vec![ExtendedSymbol::Vocab(EOS)]);
        assert_eq!(d.symbols.len(), 1);
    }

    #[test]
    fn predict_record_shapes() {
        let tok = Tokenizer::fit(TokenizerKind::Whitespace, ["a", "b", "c"], 2);
        let reg = ErrorTypeRegistry::new(vec!["x".into(), "y".into()]).unwrap();
        let m = model(tok.vocab_size(), 2, 4);
        let s = ExplainedSample {
            id: "s1".into(),
            source: vec!["a".into(), "b".into()],
            target: vec!["a".into(), "c".into()],
            evidence: vec![0],
            error_type: Some(1),
        };
        let cfg = DecodeConfig {
            max_len: 8,
            ..DecodeConfig::greedy()
        };
        assert!(predict(&m, &[], &SettingSpec::baseline(), &cfg, &tok, &reg, ExecMode::Sequential).is_empty());
        let base = predict(&m, std::slice::from_ref(&s), &SettingSpec::baseline(), &cfg, &tok, &reg, ExecMode::Sequential);
        assert!(base[0].evidence_word_indices.is_empty() && base[0].error_type.is_none());
        let exp = predict(&m, std::slice::from_ref(&s), &SettingSpec::explanation(), &cfg, &tok, &reg, ExecMode::Sequential);
        assert!(exp[0].correction.is_empty());
        for spec in [
            SettingSpec::self_rationalization(ExplainOrder::Pre),
            SettingSpec::infusion(vec![InfusionPart::Evidence, InfusionPart::Type]),
        ] {
            let r = predict(&m, std::slice::from_ref(&s), &spec, &cfg, &tok, &reg, ExecMode::Parallel);
            assert_eq!(r[0].id, "s1");
            assert!(r[0].error.is_none());
        }
    }
}
