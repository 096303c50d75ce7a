//! Closed token vocabulary and the built-in synonym table.

use std::collections::HashMap;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{GenError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Token(pub u16);

impl Token {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

pub const PAD: Token = Token(0);
pub const EOS: Token = Token(1);
pub const THINK: Token = Token(2);
pub const END_THINK: Token = Token(3);
pub const ANS: Token = Token(4);
pub const END_ANS: Token = Token(5);
pub const BOS: Token = Token(6);
pub const IMG: Token = Token(7);

const MARKERS: [&str; 8] = ["PAD", "EOS", "THINK", "/THINK", "ANS", "/ANS", "BOS", "IMG"];

const WORDS: &[&str] = &[
    // digits and number words
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9",
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
    // attributes
    "round", "spiculated", "linear", "diffuse",
    "circular", "stellate", "streak", "patchy",
    "low", "mid", "high",
    "faint", "moderate", "bright",
    "small", "large",
    "minor", "major",
    // quadrants
    "upper-left", "upper-right", "lower-left", "lower-right",
    "top-left", "top-right", "bottom-left", "bottom-right",
    // presence
    "yes", "no", "present", "absent",
    // conditions
    "C1", "C2", "C3", "C4", "C5", "C6",
    "cyst", "nodule", "mass", "carcinoma", "fibrosis", "edema",
    // grid coordinates
    "r0", "r1", "r2", "r3", "r4", "r5", "r6", "r7",
    "c0", "c1", "c2", "c3", "c4", "c5", "c6", "c7",
    // modalities
    "CT", "MRI", "XRay", "US", "Der", "FP", "OCT", "Micro",
    // answer types and trace words
    "type-condition", "type-number", "type-quadrant", "type-yesno",
    "rule", "finding", "lesion", "findings", "lesions", "count", "total",
    // hallucinations, outside every value domain
    "fracture", "aneurysm", "stent", "implant", "pneumothorax", "effusion",
    // template words
    "what", "is", "the", "diagnosis", "which", "condition", "shown", "in", "this", "image",
    "how", "many", "are", "there", "where", "largest", "quadrant", "contains", "a", "an",
    "intensity", "scan", "picture", "biggest", "number", "of", "find", "identify", "locate",
    "does", "show", "any", "have", "with", "visible", "seen", "here", "please", "answer",
    "region", "area", "location", "position", "side", "part", "abnormal", "abnormality",
    "diagnose", "label", "name", "state", "tell", "me", "kind", "type", "disease", "lesion-type",
];

/// Bidirectional synonym pairs. Value-bearing pairs stay inside one value class.
const SYNONYM_PAIRS: &[(&str, &str)] = &[
    ("0", "zero"), ("1", "one"), ("2", "two"), ("3", "three"), ("4", "four"),
    ("5", "five"), ("6", "six"), ("7", "seven"), ("8", "eight"), ("9", "nine"),
    ("round", "circular"), ("spiculated", "stellate"), ("linear", "streak"), ("diffuse", "patchy"),
    ("low", "faint"), ("mid", "moderate"), ("high", "bright"),
    ("small", "minor"), ("large", "major"),
    ("upper-left", "top-left"), ("upper-right", "top-right"),
    ("lower-left", "bottom-left"), ("lower-right", "bottom-right"),
    ("yes", "present"), ("no", "absent"),
    ("C1", "cyst"), ("C2", "nodule"), ("C3", "mass"), ("C4", "carcinoma"), ("C5", "fibrosis"), ("C6", "edema"),
    ("finding", "lesion"), ("findings", "lesions"), ("count", "total"),
    ("image", "scan"), ("largest", "biggest"), ("image", "picture"),
];

pub struct Vocab {
    words: Vec<&'static str>,
    ids: HashMap<&'static str, Token>,
    canonical: Vec<Token>,
    synonyms: Vec<Vec<Token>>,
}

impl Vocab {
    fn build() -> Self {
        let words: Vec<&'static str> = MARKERS.iter().chain(WORDS.iter()).copied().collect();
        let mut ids = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            let prev = ids.insert(*w, Token(i as u16));
            assert!(prev.is_none(), "duplicate vocabulary word {w}");
        }
        let mut canonical: Vec<Token> = (0..words.len()).map(|i| Token(i as u16)).collect();
        let mut synonyms = vec![Vec::new(); words.len()];
        for (a, b) in SYNONYM_PAIRS {
            let (ta, tb) = (ids[a], ids[b]);
            synonyms[ta.index()].push(tb);
            synonyms[tb.index()].push(ta);
            // first member of a pair is canonical unless it already maps elsewhere
            if canonical[tb.index()] == tb && canonical[ta.index()] == ta {
                canonical[tb.index()] = ta;
            }
        }
        Vocab { words, ids, canonical, synonyms }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<Token> {
        self.ids.get(word).copied()
    }

    pub fn word(&self, t: Token) -> &'static str {
        self.words[t.index()]
    }

    /// Canonical representative of a token under the synonym table.
    pub fn canonical(&self, t: Token) -> Token {
        self.canonical[t.index()]
    }

    pub fn synonyms(&self, t: Token) -> &[Token] {
        &self.synonyms[t.index()]
    }

    pub fn synonym_entries(&self) -> usize {
        self.synonyms.iter().map(Vec::len).sum()
    }

    pub fn tokenize(&self, s: &str) -> Result<Vec<Token>> {
        s.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| GenError::Data(format!("token {w:?} not in vocabulary"))))
            .collect()
    }

    pub fn detokenize(&self, tokens: &[Token]) -> String {
        tokens.iter().map(|&t| self.word(t)).collect::<Vec<_>>().join(" ")
    }
}

pub fn vocab() -> &'static Vocab {
    static V: OnceLock<Vocab> = OnceLock::new();
    V.get_or_init(Vocab::build)
}

/// Token for a word known to be in the vocabulary.
pub fn tok(word: &str) -> Token {
    vocab().id(word).unwrap_or_else(|| panic!("{word:?} is not a vocabulary word"))
}

pub fn is_marker(t: Token) -> bool {
    t.index() < MARKERS.len()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_contiguous_and_stable() {
        let v = vocab();
        for i in 0..v.len() {
            assert_eq!(v.id(v.word(Token(i as u16))), Some(Token(i as u16)));
        }
        assert_eq!(v.word(PAD), "PAD");
        assert_eq!(v.word(END_ANS), "/ANS");
        assert!(v.len() > 150);
    }

    #[test]
    fn synonym_table_is_symmetric() {
        let v = vocab();
        assert!(v.synonym_entries() >= 60);
        for i in 0..v.len() {
            let t = Token(i as u16);
            for &s in v.synonyms(t) {
                assert!(v.synonyms(s).contains(&t));
                assert_eq!(v.canonical(s), v.canonical(t), "{} vs {}", v.word(s), v.word(t));
            }
        }
        assert_eq!(v.canonical(tok("three")), tok("3"));
        assert_eq!(v.canonical(tok("edema")), tok("C6"));
    }

    #[test]
    fn unknown_word_is_a_data_error() {
        assert!(matches!(vocab().tokenize("what is foo"), Err(GenError::Data(_))));
    }
}
