//! Transcription comparison: normalization, edit distance, lexicon correction.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Levenshtein distance with unit costs, over Unicode scalar values.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// How transcriptions are normalized before any comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextNormalization {
    pub case_fold: bool,
    pub alphanumeric_only: bool,
}

impl Default for TextNormalization {
    fn default() -> Self {
        Self {
            case_fold: true,
            alphanumeric_only: true,
        }
    }
}

impl TextNormalization {
    pub fn apply(&self, word: &str) -> String {
        word.chars()
            .filter(|c| !self.alphanumeric_only || c.is_alphanumeric())
            .map(|c| if self.case_fold { c.to_ascii_uppercase() } else { c })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    None,
    Full,
    Strong,
    Weak,
    Generic,
}

impl Protocol {
    pub const ALL: [Protocol; 5] = [Protocol::None, Protocol::Full, Protocol::Strong, Protocol::Weak, Protocol::Generic];

    pub fn as_str(&self) -> &'static str {
        match self {
            Protocol::None => "none",
            Protocol::Full => "full",
            Protocol::Strong => "strong",
            Protocol::Weak => "weak",
            Protocol::Generic => "generic",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidInput(format!("unknown lexicon protocol `{s}`")))
    }
}

/// A word list used to correct recognized transcriptions.
#[derive(Clone, Debug, PartialEq)]
pub struct Lexicon {
    pub protocol: Protocol,
    pub words: Vec<String>,
    pub normalization: TextNormalization,
    /// Corrections farther than this are not applied; `None` means unlimited.
    pub max_distance: Option<usize>,
}

impl Lexicon {
    pub fn none() -> Self {
        Self {
            protocol: Protocol::None,
            words: Vec::new(),
            normalization: TextNormalization::default(),
            max_distance: None,
        }
    }

    /// Builds a lexicon, normalizing and de-duplicating words in order.
    pub fn new(protocol: Protocol, words: impl IntoIterator<Item = impl AsRef<str>>, normalization: TextNormalization) -> Self {
        let mut seen = std::collections::HashSet::new();
        let words = if protocol == Protocol::None {
            Vec::new()
        } else {
            words
                .into_iter()
                .map(|w| normalization.apply(w.as_ref()))
                .filter(|w| !w.is_empty() && seen.insert(w.clone()))
                .collect()
        };
        Self {
            protocol,
            words,
            normalization,
            max_distance: None,
        }
    }

    /// Parses one word per line, skipping blank lines.
    pub fn parse(protocol: Protocol, text: &str, normalization: TextNormalization) -> Self {
        Self::new(protocol, text.lines().map(str::trim).filter(|l| !l.is_empty()), normalization)
    }
}

/// Replaces `word` by its nearest lexicon entry (ties: first in lexicon order).
pub fn lexicon_correct(word: &str, lexicon: &Lexicon) -> Result<String> {
    if lexicon.protocol == Protocol::None {
        return Ok(word.to_string());
    }
    if lexicon.words.is_empty() {
        return Err(Error::Config(format!("empty lexicon for protocol `{}`", lexicon.protocol)));
    }
    let norm = lexicon.normalization.apply(word);
    let mut best: Option<(usize, &String)> = None;
    for entry in &lexicon.words {
        let d = edit_distance(&norm, entry);
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, entry));
            if d == 0 {
                break;
            }
        }
    }
    let (d, entry) = best.expect("non-empty lexicon");
    match lexicon.max_distance {
        Some(limit) if d > limit => Ok(word.to_string()),
        _ => Ok(entry.clone()),
    }
}
