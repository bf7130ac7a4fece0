//! Emotion taxonomy, cue-word classifier and emotion arcs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::BufRead;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocab;
use crate::error::{contract, Error, Result};

/// Ekman's six basic emotions plus neutral, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Emotion {
    Anger,
    Disgust,
    Fear,
    Joy,
    Sadness,
    Surprise,
    Neutral,
}

impl Emotion {
    pub const ALL: [Emotion; 7] = [
        Emotion::Anger,
        Emotion::Disgust,
        Emotion::Fear,
        Emotion::Joy,
        Emotion::Sadness,
        Emotion::Surprise,
        Emotion::Neutral,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Emotion::Anger => "anger",
            Emotion::Disgust => "disgust",
            Emotion::Fear => "fear",
            Emotion::Joy => "joy",
            Emotion::Sadness => "sadness",
            Emotion::Surprise => "surprise",
            Emotion::Neutral => "neutral",
        }
    }

    /// Position in the canonical order.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn valid_names() -> String {
        Self::ALL.iter().map(|e| e.name()).collect::<Vec<_>>().join(", ")
    }
}

impl fmt::Display for Emotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Emotion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown emotion {s:?}; valid names: {}", Self::valid_names())))
    }
}

/// Narrative segment an emotion is attached to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    Begin,
    Body,
    End,
}

impl Segment {
    pub const ALL: [Segment; 3] = [Segment::Begin, Segment::Body, Segment::End];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Segment::Begin => "begin",
            Segment::Body => "body",
            Segment::End => "end",
        }
    }
}

/// Emotions of the begin, body and end segments of a narrative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EmotionArc {
    pub begin: Emotion,
    pub body: Emotion,
    pub end: Emotion,
}

impl EmotionArc {
    pub fn new(begin: Emotion, body: Emotion, end: Emotion) -> Self {
        Self { begin, body, end }
    }

    pub fn uniform(e: Emotion) -> Self {
        Self::new(e, e, e)
    }

    pub fn get(&self, segment: Segment) -> Emotion {
        match segment {
            Segment::Begin => self.begin,
            Segment::Body => self.body,
            Segment::End => self.end,
        }
    }

    pub fn with(mut self, segment: Segment, e: Emotion) -> Self {
        match segment {
            Segment::Begin => self.begin = e,
            Segment::Body => self.body = e,
            Segment::End => self.end = e,
        }
        self
    }

    /// All 343 arcs in lexicographic canonical order.
    pub fn all() -> impl Iterator<Item = EmotionArc> {
        Emotion::ALL.into_iter().flat_map(|a| {
            Emotion::ALL
                .into_iter()
                .flat_map(move |b| Emotion::ALL.into_iter().map(move |c| EmotionArc::new(a, b, c)))
        })
    }
}

impl fmt::Display for EmotionArc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.begin, self.body, self.end)
    }
}

impl FromStr for EmotionArc {
    type Err = Error;

    /// Parses `begin,body,end` lowercase names.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(Error::Config(format!(
                "emotion arc must be three comma-separated names, got {s:?}"
            )));
        }
        Ok(Self::new(parts[0].parse()?, parts[1].parse()?, parts[2].parse()?))
    }
}

const DEFAULT_CUES: [(Emotion, [&str; 8]); 6] = [
    (
        Emotion::Anger,
        [
            "angry",
            "furious",
            "mad",
            "annoyed",
            "irritated",
            "outraged",
            "livid",
            "enraged",
        ],
    ),
    (
        Emotion::Disgust,
        [
            "disgusted",
            "gross",
            "nasty",
            "revolted",
            "repulsed",
            "sickened",
            "appalled",
            "queasy",
        ],
    ),
    (
        Emotion::Fear,
        [
            "afraid",
            "scared",
            "frightened",
            "terrified",
            "nervous",
            "anxious",
            "worried",
            "fearful",
        ],
    ),
    (
        Emotion::Joy,
        [
            "happy",
            "glad",
            "joyful",
            "cheerful",
            "delighted",
            "pleased",
            "excited",
            "smiling",
        ],
    ),
    (
        Emotion::Sadness,
        [
            "sad",
            "unhappy",
            "gloomy",
            "lonely",
            "upset",
            "miserable",
            "depressed",
            "heartbroken",
        ],
    ),
    (
        Emotion::Surprise,
        [
            "surprised",
            "amazed",
            "astonished",
            "shocked",
            "stunned",
            "startled",
            "speechless",
            "astounded",
        ],
    ),
];

/// Disjoint cue words per non-neutral emotion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    cues: BTreeMap<Emotion, BTreeSet<String>>,
    index: BTreeMap<String, Emotion>,
}

impl Default for Lexicon {
    fn default() -> Self {
        let mut lex = Self::empty();
        for (emotion, words) in DEFAULT_CUES {
            for w in words {
                lex.add(emotion, w).expect("built-in lexicon is well formed");
            }
        }
        lex
    }
}

impl Lexicon {
    pub fn empty() -> Self {
        Self {
            cues: BTreeMap::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, emotion: Emotion, word: &str) -> Result<()> {
        if emotion == Emotion::Neutral {
            return Err(Error::Config(format!("neutral cannot carry cue word {word:?}")));
        }
        let single = !word.is_empty() && word.chars().all(|c| c.is_alphanumeric());
        if !single || word.chars().any(char::is_uppercase) {
            return Err(Error::Config(format!("cue {word:?} must be a single lowercase token")));
        }
        match self.index.get(word) {
            Some(&other) if other != emotion => {
                return Err(Error::Config(format!(
                    "cue {word:?} listed under both {other} and {emotion}"
                )))
            }
            _ => {}
        }
        self.index.insert(word.to_string(), emotion);
        self.cues.entry(emotion).or_default().insert(word.to_string());
        Ok(())
    }

    /// Reads `emotion<TAB>word` lines; blank lines are skipped.
    pub fn from_reader(reader: impl BufRead) -> Result<Self> {
        let mut lex = Self::empty();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse { line: i + 1, message };
            let (emotion, word) = line
                .split_once('\t')
                .ok_or_else(|| parse_err(format!("expected emotion<TAB>word, got {line:?}")))?;
            let emotion: Emotion = emotion.trim().parse().map_err(|e: Error| parse_err(e.to_string()))?;
            lex.add(emotion, word.trim()).map_err(|e| parse_err(e.to_string()))?;
        }
        Ok(lex)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (emotion, words) in &self.cues {
            for w in words {
                out.push_str(&format!("{emotion}\t{w}\n"));
            }
        }
        out
    }

    /// Cue words of `emotion` in lexicographic order.
    pub fn cues(&self, emotion: Emotion) -> Vec<&str> {
        self.cues
            .get(&emotion)
            .map(|s| s.iter().map(String::as_str).collect())
            .unwrap_or_default()
    }

    pub fn emotion_of(&self, word: &str) -> Option<Emotion> {
        self.index.get(word).copied()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }
}

/// Lowercased alphanumeric words of `text`.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

/// Most frequent cue emotion in `text`; neutral without cues, ties resolve
/// to the earliest emotion in canonical order.
pub fn classify_emotion(text: &str, lexicon: &Lexicon) -> Emotion {
    let mut counts = [0usize; 7];
    for w in words(text) {
        if let Some(e) = lexicon.emotion_of(&w) {
            counts[e.index()] += 1;
        }
    }
    let mut best = Emotion::Neutral;
    let mut best_count = 0;
    for e in Emotion::ALL {
        if counts[e.index()] > best_count {
            best = e;
            best_count = counts[e.index()];
        }
    }
    best
}

/// Texts of the three segments of a five-sentence narrative.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segments {
    pub begin: String,
    pub body: String,
    pub end: String,
}

/// Sentence 1 / sentences 2-4 joined by spaces / sentence 5.
pub fn segment_narrative<S: AsRef<str>>(sentences: &[S]) -> Result<Segments> {
    if sentences.len() != 5 {
        return contract(format!("a narrative has 5 sentences, got {}", sentences.len()));
    }
    let s = |i: usize| sentences[i].as_ref();
    Ok(Segments {
        begin: s(0).to_string(),
        body: [s(1), s(2), s(3)].join(" "),
        end: s(4).to_string(),
    })
}

pub fn extract_arc<S: AsRef<str>>(sentences: &[S], lexicon: &Lexicon) -> Result<EmotionArc> {
    let seg = segment_narrative(sentences)?;
    Ok(EmotionArc::new(
        classify_emotion(&seg.begin, lexicon),
        classify_emotion(&seg.body, lexicon),
        classify_emotion(&seg.end, lexicon),
    ))
}

/// `[begin, SEP, body, SEP, end]` token ids.
pub fn arc_to_tokens(arc: &EmotionArc, vocab: &Vocab) -> Result<[usize; 5]> {
    let id = |e: Emotion| {
        vocab
            .id(e.name())
            .ok_or_else(|| Error::Config(format!("vocabulary lacks emotion word {e}")))
    };
    let sep = vocab.emotion_sep();
    Ok([id(arc.begin)?, sep, id(arc.body)?, sep, id(arc.end)?])
}

/// Per-segment emotion counts over a collection of narratives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FrequencyTable {
    /// `counts[segment][emotion]`
    pub counts: [[usize; 7]; 3],
}

impl FrequencyTable {
    pub fn add(&mut self, arc: &EmotionArc) {
        for seg in Segment::ALL {
            self.counts[seg.index()][arc.get(seg).index()] += 1;
        }
    }

    pub fn from_arcs<'a>(arcs: impl IntoIterator<Item = &'a EmotionArc>) -> Self {
        let mut t = Self::default();
        arcs.into_iter().for_each(|a| t.add(a));
        t
    }

    pub fn get(&self, segment: Segment, emotion: Emotion) -> usize {
        self.counts[segment.index()][emotion.index()]
    }

    pub fn row_sum(&self, segment: Segment) -> usize {
        self.counts[segment.index()].iter().sum()
    }

    /// Largest per-emotion share within a segment; 0 for an empty table.
    pub fn majority_share(&self, segment: Segment) -> f64 {
        let total = self.row_sum(segment);
        if total == 0 {
            return 0.0;
        }
        *self.counts[segment.index()].iter().max().expect("seven columns") as f64 / total as f64
    }
}

impl fmt::Display for FrequencyTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<8}", "segment")?;
        for e in Emotion::ALL {
            write!(f, "{:>10}", e.name())?;
        }
        writeln!(f)?;
        for seg in Segment::ALL {
            write!(f, "{:<8}", seg.name())?;
            for e in Emotion::ALL {
                write!(f, "{:>10}", self.get(seg, e))?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Counts extracted arcs of every narrative.
pub fn arc_frequency_table<'a, S: AsRef<str> + 'a>(
    narratives: impl IntoIterator<Item = &'a [S]>,
    lexicon: &Lexicon,
) -> Result<FrequencyTable> {
    let mut table = FrequencyTable::default();
    for sentences in narratives {
        table.add(&extract_arc(sentences, lexicon)?);
    }
    Ok(table)
}
