use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::emotion::Emotion;
use crate::error::{contract, Error, Result};

/// Collapses whitespace, tightens spacing around periods and applies
/// sentence-case capitalization.
pub fn normalize_text(raw: &str) -> String {
    let lowered: String = raw.chars().flat_map(char::to_lowercase).collect();
    let collapsed = lowered.split_whitespace().collect::<Vec<_>>().join(" ");

    let mut spaced = String::with_capacity(collapsed.len() + 8);
    let mut chars = collapsed.chars().peekable();
    while let Some(c) = chars.next() {
        if c == ' ' && chars.peek() == Some(&'.') {
            continue;
        }
        spaced.push(c);
        if c == '.' {
            if let Some(&next) = chars.peek() {
                if next != ' ' && next != '.' {
                    spaced.push(' ');
                }
            }
        }
    }

    let mut out = String::with_capacity(spaced.len());
    let mut sentence_start = true;
    for c in spaced.chars() {
        if c == '.' {
            sentence_start = true;
            out.push(c);
        } else if sentence_start && c.is_alphabetic() {
            let mut upper = c.to_uppercase();
            match (upper.next(), upper.next()) {
                (Some(u), None) => out.push(u),
                _ => out.push(c),
            }
            sentence_start = false;
        } else {
            out.push(c);
        }
    }
    out
}

/// Lowercase word and punctuation tokens; every non-alphanumeric,
/// non-space character is its own token.
pub fn word_tokens(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_alphanumeric() {
            word.push(c);
            continue;
        }
        if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            tokens.push(c.to_string());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const EMOTION_SEP: usize = 3;
pub const UNK: usize = 4;
pub const SPECIALS: [&str; 5] = ["[PAD]", "[BOS]", "[EOS]", "[EMOTION SEP]", "[UNK]"];

/// Bijective token/id mapping with fixed special ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(all: Vec<String>) -> Result<Self> {
        Self::from_list(all)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Full token list; the first five entries must be the specials.
    pub fn from_list(all: Vec<String>) -> Result<Self> {
        if all.len() < SPECIALS.len() || all.iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(Error::Config(
                "vocabulary must start with the five special tokens".into(),
            ));
        }
        let mut index = HashMap::with_capacity(all.len());
        for (i, t) in all.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens: all, index })
    }

    /// Specials followed by `words` in the given order.
    pub fn from_tokens(words: impl IntoIterator<Item = String>) -> Result<Self> {
        let all = SPECIALS.iter().map(|s| s.to_string()).chain(words).collect();
        Self::from_list(all)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn emotion_sep(&self) -> usize {
        EMOTION_SEP
    }

    pub fn period(&self) -> Option<usize> {
        self.id(".")
    }
}

/// Builds a vocabulary over token streams: specials first, then tokens by
/// descending frequency with lexicographic tie-breaks. The seven emotion
/// names are always included.
pub fn build_vocab<I, S>(texts: I) -> Result<Vocab>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut seen_text = false;
    for text in texts {
        seen_text = true;
        for t in word_tokens(text.as_ref()) {
            *counts.entry(t).or_default() += 1;
        }
    }
    if !seen_text {
        return contract("cannot build a vocabulary from an empty corpus");
    }
    for e in Emotion::ALL {
        counts.entry(e.name().to_string()).or_default();
    }
    for s in SPECIALS {
        counts.remove(s);
    }
    let mut ordered: Vec<(String, usize)> = counts.into_iter().collect();
    ordered.sort_by(|(a, ca), (b, cb)| cb.cmp(ca).then_with(|| a.cmp(b)));
    Vocab::from_tokens(ordered.into_iter().map(|(t, _)| t))
}

pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<usize> {
    word_tokens(text).iter().map(|t| vocab.id_or_unk(t)).collect()
}

/// Joins tokens, dropping padding and sequence markers, and normalizes.
pub fn detokenize(ids: &[usize], vocab: &Vocab) -> String {
    let words: Vec<&str> = ids
        .iter()
        .filter(|&&id| !matches!(id, PAD | BOS | EOS))
        .map(|&id| vocab.token(id).unwrap_or(SPECIALS[UNK]))
        .collect();
    normalize_text(&words.join(" "))
}

/// Splits token ids into sentences at period tokens; trailing tokens
/// without a period form a final sentence.
pub fn split_sentences(ids: &[usize], vocab: &Vocab) -> Vec<String> {
    let period = vocab.period();
    let mut out = Vec::new();
    let mut current = Vec::new();
    for &id in ids.iter().filter(|&&id| !matches!(id, PAD | BOS | EOS)) {
        current.push(id);
        if Some(id) == period {
            out.push(detokenize(&current, vocab));
            current.clear();
        }
    }
    if !current.is_empty() {
        out.push(detokenize(&current, vocab));
    }
    out
}
