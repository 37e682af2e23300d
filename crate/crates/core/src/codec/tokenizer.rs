use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

/// Reserved unit ids shared by every tokenizer.
pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const SEP: usize = 2;
pub const UNK: usize = 3;
const FIRST_TYPE: usize = 4;

/// Reserved atomic unit standing for error type `t`.
pub fn type_unit(t: usize) -> usize {
    FIRST_TYPE + t
}

/// Continuation prefix of the character-bigram tokenizer.
pub const CONTINUATION: &str = "##";

/// Word-to-unit segmentation with a fixed unit vocabulary.
pub trait SubwordTokenizer: Send + Sync {
    fn vocab_size(&self) -> usize;
    fn unit(&self, id: usize) -> &str;
    /// Units of a single word; never empty.
    fn encode_word(&self, word: &str) -> Vec<usize>;
    /// Groups a unit sequence back into words.
    fn decode_units(&self, units: &[usize]) -> Vec<String>;
    fn type_count(&self) -> usize;

    /// Vocabulary ids that are never a legal correction unit.
    fn reserved(&self) -> Vec<usize> {
        let mut r = vec![BOS, SEP];
        r.extend((0..self.type_count()).map(|t| self.type_unit(t)));
        r
    }

    fn bos(&self) -> usize {
        BOS
    }
    fn eos(&self) -> usize {
        EOS
    }
    fn sep(&self) -> usize {
        SEP
    }
    /// Reserved atomic unit standing for error type `t`.
    fn type_unit(&self, t: usize) -> usize {
        type_unit(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerKind {
    /// One unit per word.
    Whitespace,
    /// Words split into two-character chunks; non-initial chunks carry `##`.
    CharBigram,
}

#[derive(Serialize, Deserialize)]
struct TokenizerRepr {
    kind: TokenizerKind,
    type_count: usize,
    units: Vec<String>,
}

/// Vocabulary-backed tokenizer; see [`TokenizerKind`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "TokenizerRepr", into = "TokenizerRepr")]
pub struct Tokenizer {
    kind: TokenizerKind,
    type_count: usize,
    units: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<TokenizerRepr> for Tokenizer {
    fn from(r: TokenizerRepr) -> Self {
        let index = r.units.iter().enumerate().map(|(i, u)| (u.clone(), i)).collect();
        Tokenizer {
            kind: r.kind,
            type_count: r.type_count,
            units: r.units,
            index,
        }
    }
}

impl From<Tokenizer> for TokenizerRepr {
    fn from(t: Tokenizer) -> Self {
        TokenizerRepr {
            kind: t.kind,
            type_count: t.type_count,
            units: t.units,
        }
    }
}

fn bigram_pieces(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    if chars.is_empty() {
        return vec![String::new()];
    }
    chars
        .chunks(2)
        .enumerate()
        .map(|(i, c)| {
            let s: String = c.iter().collect();
            if i == 0 {
                s
            } else {
                format!("{CONTINUATION}{s}")
            }
        })
        .collect()
}

impl Tokenizer {
    /// Builds the unit vocabulary from `words` (sorted, so the result does
    /// not depend on iteration order).
    pub fn fit<'a>(kind: TokenizerKind, words: impl IntoIterator<Item = &'a str>, type_count: usize) -> Self {
        let mut units: Vec<String> = vec!["<s>".into(), "</s>".into(), "<sep>".into(), "<unk>".into()];
        units.extend((0..type_count).map(|t| format!("<type_{t}>")));
        let mut pieces = BTreeSet::new();
        for w in words {
            match kind {
                TokenizerKind::Whitespace => {
                    pieces.insert(w.to_string());
                }
                TokenizerKind::CharBigram => pieces.extend(bigram_pieces(w)),
            }
        }
        for p in pieces {
            if !units.contains(&p) {
                units.push(p);
            }
        }
        Tokenizer::from(TokenizerRepr {
            kind,
            type_count,
            units,
        })
    }

    pub fn kind(&self) -> TokenizerKind {
        self.kind
    }

    pub fn unit_id(&self, unit: &str) -> Option<usize> {
        self.index.get(unit).copied()
    }
}

impl SubwordTokenizer for Tokenizer {
    fn vocab_size(&self) -> usize {
        self.units.len()
    }

    fn unit(&self, id: usize) -> &str {
        self.units.get(id).map_or("<unk>", String::as_str)
    }

    fn encode_word(&self, word: &str) -> Vec<usize> {
        match self.kind {
            TokenizerKind::Whitespace => vec![self.unit_id(word).unwrap_or(UNK)],
            TokenizerKind::CharBigram => bigram_pieces(word)
                .iter()
                .map(|p| self.unit_id(p).unwrap_or(UNK))
                .collect(),
        }
    }

    fn decode_units(&self, units: &[usize]) -> Vec<String> {
        let mut words: Vec<String> = Vec::new();
        for &u in units {
            let s = self.unit(u);
            match (self.kind, s.strip_prefix(CONTINUATION)) {
                (TokenizerKind::CharBigram, Some(rest)) if !rest.is_empty() && !words.is_empty() => {
                    words.last_mut().expect("non-empty").push_str(rest);
                }
                _ => words.push(s.to_string()),
            }
        }
        words
    }

    fn type_count(&self) -> usize {
        self.type_count
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn whitespace_is_one_unit_per_word() {
        let t = Tokenizer::fit(TokenizerKind::Whitespace, ["a", "cat"], 2);
        assert_eq!(t.encode_word("cat").len(), 1);
        assert_eq!(t.encode_word("zebra"), vec![UNK]);
        assert_eq!(t.unit(t.type_unit(1)), "<type_1>");
    }

    #[test]
    fn bigram_splits_and_rejoins() {
        let t = Tokenizer::fit(TokenizerKind::CharBigram, ["hello", "a"], 1);
        let units = t.encode_word("hello");
        let shown: Vec<&str> = units.iter().map(|&u| t.unit(u)).collect();
        assert_eq!(shown, vec!["he", "##ll", "##o"]);
        let mut seq = units.clone();
        seq.extend(t.encode_word("a"));
        assert_eq!(t.decode_units(&seq), vec!["hello", "a"]);
    }

    #[test]
    fn serde_rebuilds_index() {
        let t = Tokenizer::fit(TokenizerKind::CharBigram, ["word"], 3);
        let back: Tokenizer = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.encode_word("word"), t.encode_word("word"));
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(words in prop::collection::vec("[a-z]{1,9}", 1..6)) {
            for kind in [TokenizerKind::Whitespace, TokenizerKind::CharBigram] {
                let t = Tokenizer::fit(kind, words.iter().map(String::as_str), 2);
                let units: Vec<usize> = words.iter().flat_map(|w| t.encode_word(w)).collect();
                prop_assert_eq!(t.decode_units(&units), words.clone());
            }
        }
    }
}
