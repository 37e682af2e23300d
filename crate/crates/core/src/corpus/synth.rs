//! Seeded synthetic corpus over a closed vocabulary.
//!
//! Clean sentences follow `the [ADJ] NOUN [LOC-PP] VERB-PHRASE [ADV] .` and
//! exactly one rule corrupts each of them. Every rule has designated trigger
//! tokens that become the sample's evidence. Verb-agreement and noun-number
//! corruptions produce the same surface pattern (a subject/verb number
//! clash), so only the evidence tells which side was wrong.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ErrorTypeRegistry, ExplainedSample};
use crate::error::{Error, Result};

const NOUNS: [&str; 40] = [
    "cat", "dog", "bird", "horse", "teacher", "student", "doctor", "farmer", "king", "queen",
    "baker", "singer", "driver", "painter", "writer", "pilot", "nurse", "lawyer", "artist", "clerk",
    "girl", "boy", "friend", "neighbor", "cousin", "player", "worker", "guard", "chef", "sailor",
    "soldier", "monkey", "rabbit", "tiger", "lion", "wolf", "fox", "bear", "duck", "frog",
];
const PLACES: [&str; 12] = [
    "park", "garden", "house", "river", "bridge", "tree", "wall", "table", "station", "market",
    "school", "forest",
];
const PLACE_PREPS: [&str; 4] = ["near", "behind", "under", "beside"];
const VERBS: [(&str, &str); 20] = [
    ("runs", "run"), ("sleeps", "sleep"), ("sings", "sing"), ("jumps", "jump"), ("walks", "walk"),
    ("swims", "swim"), ("works", "work"), ("smiles", "smile"), ("dances", "dance"), ("cries", "cry"),
    ("eats", "eat"), ("reads", "read"), ("writes", "write"), ("plays", "play"), ("rests", "rest"),
    ("shouts", "shout"), ("climbs", "climb"), ("cooks", "cook"), ("travels", "travel"), ("speaks", "speak"),
];
/// Verbs with the preposition they govern.
const PREP_VERBS: [(&str, &str, &str); 10] = [
    ("depends", "depend", "on"), ("listens", "listen", "to"), ("waits", "wait", "for"),
    ("looks", "look", "at"), ("believes", "believe", "in"), ("talks", "talk", "about"),
    ("relies", "rely", "on"), ("belongs", "belong", "to"), ("asks", "ask", "for"),
    ("laughs", "laugh", "at"),
];
const PREPS: [&str; 8] = ["on", "to", "for", "at", "in", "about", "with", "from"];
const ADJECTIVES: [&str; 25] = [
    "big", "small", "old", "young", "happy", "sad", "tall", "short", "quiet", "loud", "brave",
    "kind", "angry", "busy", "clever", "lazy", "proud", "shy", "strong", "gentle", "funny", "calm",
    "rich", "poor", "wise",
];
const ADVERBS: [&str; 15] = [
    "quickly", "slowly", "often", "rarely", "happily", "quietly", "loudly", "early", "late",
    "together", "again", "today", "outside", "alone", "carefully",
];
const DET: &str = "the";
const STOP: &str = ".";

fn plural(noun: &str) -> String {
    if noun.ends_with('x') {
        format!("{noun}es")
    } else {
        format!("{noun}s")
    }
}

/// Every word the generator can emit.
pub fn vocabulary() -> Vec<String> {
    let mut v: Vec<String> = vec![DET.into(), STOP.into()];
    for n in NOUNS {
        v.push(n.into());
        v.push(plural(n));
    }
    v.extend(PLACES.iter().map(|s| s.to_string()));
    v.extend(PLACE_PREPS.iter().map(|s| s.to_string()));
    for (s, p) in VERBS {
        v.push(s.into());
        v.push(p.into());
    }
    for (s, p, _) in PREP_VERBS {
        v.push(s.into());
        v.push(p.into());
    }
    v.extend(PREPS.iter().map(|s| s.to_string()));
    v.extend(ADJECTIVES.iter().map(|s| s.to_string()));
    v.extend(ADVERBS.iter().map(|s| s.to_string()));
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    DeterminerDrop,
    VerbAgreement,
    PrepositionSwap,
    NounNumber,
    Transposition,
}

impl RuleKind {
    pub fn label(self) -> &'static str {
        match self {
            RuleKind::DeterminerDrop => "determiner",
            RuleKind::VerbAgreement => "verb_agreement",
            RuleKind::PrepositionSwap => "preposition",
            RuleKind::NounNumber => "noun_number",
            RuleKind::Transposition => "word_order",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleSpec {
    pub kind: RuleKind,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub rules: Vec<RuleSpec>,
    pub p_adjective: f64,
    pub p_location: f64,
    pub p_prep_verb: f64,
    pub p_adverb: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let rule = |kind, weight| RuleSpec { kind, weight };
        SynthConfig {
            rules: vec![
                rule(RuleKind::DeterminerDrop, 0.30),
                rule(RuleKind::VerbAgreement, 0.10),
                rule(RuleKind::PrepositionSwap, 0.25),
                rule(RuleKind::NounNumber, 0.10),
                rule(RuleKind::Transposition, 0.25),
            ],
            p_adjective: 0.5,
            p_location: 0.4,
            p_prep_verb: 0.4,
            p_adverb: 0.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rules.is_empty() {
            return Err(Error::Config("synthetic grammar needs at least one rule".into()));
        }
        for r in &self.rules {
            if !(r.weight.is_finite() && r.weight > 0.0) {
                return Err(Error::Config(format!(
                    "rule {} has non-positive weight {}",
                    r.kind.label(),
                    r.weight
                )));
            }
        }
        for (i, r) in self.rules.iter().enumerate() {
            if self.rules[..i].iter().any(|o| o.kind == r.kind) {
                return Err(Error::Config(format!("rule {} listed twice", r.kind.label())));
            }
        }
        for p in [self.p_adjective, self.p_location, self.p_prep_verb, self.p_adverb] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Labels in rule order; a sample's error type is its rule's position.
    pub fn registry(&self) -> Result<ErrorTypeRegistry> {
        self.validate()?;
        ErrorTypeRegistry::new(self.rules.iter().map(|r| r.kind.label().to_string()).collect())
    }
}

#[derive(Debug, Clone)]
struct NounPhrase {
    det: usize,
    adj: Option<usize>,
    noun: usize,
}

#[derive(Debug, Clone)]
struct Clean {
    tokens: Vec<String>,
    subject: NounPhrase,
    subject_noun: usize,
    subject_plural: bool,
    verb: usize,
    verb_entry: VerbEntry,
    /// Governed preposition position and its correct form.
    prep: Option<usize>,
    phrases: Vec<NounPhrase>,
}

#[derive(Debug, Clone, Copy)]
enum VerbEntry {
    Plain(usize),
    Prep(usize),
}

impl VerbEntry {
    fn form(self, plural: bool) -> &'static str {
        match (self, plural) {
            (VerbEntry::Plain(i), false) => VERBS[i].0,
            (VerbEntry::Plain(i), true) => VERBS[i].1,
            (VerbEntry::Prep(i), false) => PREP_VERBS[i].0,
            (VerbEntry::Prep(i), true) => PREP_VERBS[i].1,
        }
    }
}

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &'a [&'a str]) -> &'a str {
    xs.choose(rng).copied().unwrap_or(DET)
}

fn noun_phrase(rng: &mut ChaCha8Rng, tokens: &mut Vec<String>, adj: bool, noun: String) -> NounPhrase {
    let det = tokens.len();
    tokens.push(DET.into());
    let adj = adj.then(|| {
        tokens.push(pick(rng, &ADJECTIVES).into());
        tokens.len() - 1
    });
    tokens.push(noun);
    NounPhrase {
        det,
        adj,
        noun: tokens.len() - 1,
    }
}

fn random_noun(rng: &mut ChaCha8Rng, plural_form: bool) -> String {
    let n = pick(rng, &NOUNS);
    if plural_form {
        plural(n)
    } else {
        n.to_string()
    }
}

fn clean_sentence(rng: &mut ChaCha8Rng, cfg: &SynthConfig, rule: RuleKind) -> Clean {
    let mut tokens = Vec::with_capacity(16);
    let mut phrases = Vec::new();
    let subject_plural = rng.random_bool(0.5);
    let subj_adj = rule == RuleKind::Transposition || rng.random_bool(cfg.p_adjective);
    let noun = random_noun(rng, subject_plural);
    let subject = noun_phrase(rng, &mut tokens, subj_adj, noun);
    phrases.push(subject.clone());
    if rng.random_bool(cfg.p_location) {
        tokens.push(pick(rng, &PLACE_PREPS).into());
        let place = pick(rng, &PLACES).to_string();
        phrases.push(noun_phrase(rng, &mut tokens, false, place));
    }
    let prep_verb = rule == RuleKind::PrepositionSwap || rng.random_bool(cfg.p_prep_verb);
    let verb_entry = if prep_verb {
        VerbEntry::Prep(rng.random_range(0..PREP_VERBS.len()))
    } else {
        VerbEntry::Plain(rng.random_range(0..VERBS.len()))
    };
    let verb = tokens.len();
    tokens.push(verb_entry.form(subject_plural).into());
    let mut prep = None;
    if let VerbEntry::Prep(i) = verb_entry {
        prep = Some(tokens.len());
        tokens.push(PREP_VERBS[i].2.into());
        let obj_plural = rng.random_bool(0.5);
        let obj_adj = rng.random_bool(cfg.p_adjective * 0.6);
        let obj = random_noun(rng, obj_plural);
        phrases.push(noun_phrase(rng, &mut tokens, obj_adj, obj));
    }
    if rng.random_bool(cfg.p_adverb) {
        tokens.push(pick(rng, &ADVERBS).into());
    }
    tokens.push(STOP.into());
    Clean {
        subject_noun: subject.noun,
        subject,
        subject_plural,
        verb,
        verb_entry,
        prep,
        phrases,
        tokens,
    }
}

/// Corrupts `clean`, returning the erroneous source and evidence positions.
fn corrupt(rng: &mut ChaCha8Rng, clean: &Clean, rule: RuleKind) -> (Vec<String>, Vec<usize>) {
    let mut src = clean.tokens.clone();
    match rule {
        RuleKind::DeterminerDrop => {
            let np = clean.phrases.choose(rng).expect("sentence has a subject");
            src.remove(np.det);
            (src, vec![np.noun - 1])
        }
        RuleKind::VerbAgreement => {
            src[clean.verb] = clean.verb_entry.form(!clean.subject_plural).into();
            (src, vec![clean.subject_noun])
        }
        RuleKind::NounNumber => {
            let base = &clean.tokens[clean.subject_noun];
            let flipped = if clean.subject_plural {
                NOUNS
                    .iter()
                    .find(|n| plural(n) == *base)
                    .map(|n| n.to_string())
                    .expect("plural of a known noun")
            } else {
                plural(base)
            };
            src[clean.subject_noun] = flipped;
            (src, vec![clean.verb])
        }
        RuleKind::PrepositionSwap => {
            let pos = clean.prep.expect("preposition rule forces a governed preposition");
            let correct = clean.tokens[pos].clone();
            let wrong: Vec<&str> = PREPS.iter().copied().filter(|p| *p != correct).collect();
            src[pos] = pick(rng, &wrong).into();
            (src, vec![clean.verb])
        }
        RuleKind::Transposition => {
            let adj = clean.subject.adj.expect("transposition forces a subject adjective");
            src.swap(adj, clean.subject.noun);
            (src, vec![adj, clean.subject.noun])
        }
    }
}

/// `size` samples, each with exactly one injected error. The same seed and
/// config always give the same corpus.
pub fn gen_synthetic_corpus(seed: u64, size: usize, cfg: &SynthConfig) -> Result<Vec<ExplainedSample>> {
    cfg.validate()?;
    let total: f64 = cfg.rules.iter().map(|r| r.weight).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(size);
    for i in 0..size {
        let mut u = rng.random::<f64>() * total;
        let mut chosen = cfg.rules.len() - 1;
        for (k, r) in cfg.rules.iter().enumerate() {
            if u < r.weight {
                chosen = k;
                break;
            }
            u -= r.weight;
        }
        let rule = cfg.rules[chosen].kind;
        let clean = clean_sentence(&mut rng, cfg, rule);
        let (source, evidence) = corrupt(&mut rng, &clean, rule);
        out.push(ExplainedSample {
            id: format!("syn{seed}-{i:05}"),
            source,
            target: clean.tokens,
            evidence,
            error_type: Some(chosen),
        });
    }
    Ok(out)
}
