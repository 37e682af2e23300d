use crate::codec::{ExplainOrder, ExtendedSpace, ExtendedSymbol, Setting, SettingSpec, EOS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Segment {
    /// Zero or more vocabulary units.
    Vocab,
    /// Zero or more strictly ascending pointers.
    Pointers,
    /// Exactly one error type.
    Type,
}

impl Segment {
    fn optional(self) -> bool {
        self != Segment::Type
    }

    fn admits(self, s: ExtendedSymbol) -> bool {
        matches!(
            (self, s),
            (Segment::Vocab, ExtendedSymbol::Vocab(_))
                | (Segment::Pointers, ExtendedSymbol::Pointer(_))
                | (Segment::Type, ExtendedSymbol::ErrType(_))
        )
    }
}

/// Position of a decoder inside its setting's segment layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GrammarState {
    segment: usize,
    last_pointer: Option<usize>,
    finished: bool,
}

impl GrammarState {
    pub fn finished(&self) -> bool {
        self.finished
    }
}

/// Legal segment order of a setting's output, e.g. `Vocab* Pointer* ErrType
/// EOS` for post-explaining. With `constrained == false` only the setting's
/// symbol classes are enforced and any order is allowed.
#[derive(Debug, Clone)]
pub struct DecodeGrammar {
    spec: SettingSpec,
    constrained: bool,
    segments: Vec<Segment>,
}

impl DecodeGrammar {
    pub fn new(spec: SettingSpec, constrained: bool) -> Self {
        use Segment::*;
        let segments = match (spec.setting, spec.order) {
            (Setting::Baseline | Setting::Infusion, _) => vec![Vocab],
            (Setting::Explanation, _) => vec![Pointers, Type],
            (Setting::SelfRationalization, Some(ExplainOrder::Pre)) => vec![Pointers, Type, Vocab],
            (Setting::SelfRationalization, _) => vec![Vocab, Pointers, Type],
        };
        DecodeGrammar {
            spec,
            constrained,
            segments,
        }
    }

    pub fn spec(&self) -> &SettingSpec {
        &self.spec
    }

    pub fn start(&self) -> GrammarState {
        GrammarState {
            segment: 0,
            last_pointer: None,
            finished: false,
        }
    }

    fn class_allowed(&self, s: ExtendedSymbol) -> bool {
        self.segments.iter().any(|seg| seg.admits(s))
    }

    /// The state after emitting `s`, or `None` when `s` is illegal here.
    pub fn advance(&self, st: GrammarState, s: ExtendedSymbol) -> Option<GrammarState> {
        if st.finished {
            return None;
        }
        if s == ExtendedSymbol::Vocab(EOS) {
            let complete = !self.constrained || self.segments[st.segment.min(self.segments.len())..]
                .iter()
                .all(|seg| seg.optional());
            return complete.then_some(GrammarState { finished: true, ..st });
        }
        if !self.class_allowed(s) {
            return None;
        }
        if !self.constrained {
            return Some(st);
        }
        for k in st.segment..self.segments.len() {
            let seg = self.segments[k];
            if seg.admits(s) {
                return match s {
                    ExtendedSymbol::Pointer(p) => {
                        let last = if k == st.segment { st.last_pointer } else { None };
                        (last.is_none_or(|l| p > l)).then_some(GrammarState {
                            segment: k,
                            last_pointer: Some(p),
                            finished: false,
                        })
                    }
                    ExtendedSymbol::ErrType(_) => Some(GrammarState {
                        segment: k + 1,
                        last_pointer: None,
                        finished: false,
                    }),
                    ExtendedSymbol::Vocab(_) => Some(GrammarState {
                        segment: k,
                        last_pointer: None,
                        finished: false,
                    }),
                };
            }
            if !seg.optional() {
                return None;
            }
        }
        None
    }

    /// Whether every symbol of `seq` is legal in turn.
    pub fn accepts_prefix(&self, seq: &[ExtendedSymbol]) -> bool {
        let mut st = self.start();
        seq.iter().all(|&s| match self.advance(st, s) {
            Some(next) => {
                st = next;
                true
            }
            None => false,
        })
    }

    /// Whether every symbol of `seq` is legal in turn and the sequence either
    /// ends with `EOS` or could end right away.
    pub fn accepts(&self, seq: &[ExtendedSymbol]) -> bool {
        let mut st = self.start();
        for &s in seq {
            match self.advance(st, s) {
                Some(next) => st = next,
                None => return false,
            }
        }
        st.finished || self.advance(st, ExtendedSymbol::Vocab(EOS)).is_some()
    }

    /// Per-index legality over `space`. Vocabulary ids in `reserved` (such as
    /// `BOS` or the per-type units) are never legal outputs.
    pub fn allowed_symbols(&self, st: GrammarState, space: ExtendedSpace, reserved: &[usize]) -> Vec<bool> {
        let mut out = vec![false; space.size()];
        if st.finished {
            return out;
        }
        let vocab_ok = self.advance(st, ExtendedSymbol::Vocab(UNK_PROBE)).is_some();
        if vocab_ok {
            out[..space.vocab].iter_mut().for_each(|x| *x = true);
            for &r in reserved {
                if r < space.vocab {
                    out[r] = false;
                }
            }
        }
        out[EOS] = self.advance(st, ExtendedSymbol::Vocab(EOS)).is_some();
        for p in 0..space.n_units {
            out[space.index(ExtendedSymbol::Pointer(p))] = self.advance(st, ExtendedSymbol::Pointer(p)).is_some();
        }
        if space.types > 0 && self.advance(st, ExtendedSymbol::ErrType(0)).is_some() {
            let start = space.index(ExtendedSymbol::ErrType(0));
            out[start..].iter_mut().for_each(|x| *x = true);
        }
        out
    }
}

/// Any non-`EOS` vocabulary id; legality does not depend on which.
const UNK_PROBE: usize = crate::codec::UNK;
