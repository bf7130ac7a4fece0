//! Corpus BLEU-4, segment/arc emotion accuracies and model evaluation.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hash;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{region_inputs, split_sentences, word_tokens, Corpus, Narrative, Scene, Vocab};
use crate::emotion::{extract_arc, Emotion, EmotionArc, Lexicon, Segment};
use crate::error::{contract, Error, Result};
use crate::model::{BeamConfig, Model};

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// Corpus-pooled n-gram statistics behind BLEU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NgramStats {
    /// Clipped matches for orders 1 to 4.
    pub matched: [usize; 4],
    /// Candidate n-gram totals for orders 1 to 4.
    pub total: [usize; 4],
    pub candidate_len: usize,
    pub reference_len: usize,
}

impl NgramStats {
    /// Modified precision `matched / total` of order `n` (1-based).
    pub fn precision(&self, n: usize) -> f64 {
        self.matched[n - 1] as f64 / self.total[n - 1] as f64
    }
}

pub fn ngram_stats<T, C, R>(candidates: &[C], references: &[R]) -> Result<NgramStats>
where
    T: Eq + Hash,
    C: AsRef<[T]>,
    R: AsRef<[T]>,
{
    if candidates.len() != references.len() {
        return contract(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        ));
    }
    if candidates.is_empty() {
        return contract("bleu4 of an empty corpus");
    }
    let mut stats = NgramStats {
        matched: [0; 4],
        total: [0; 4],
        candidate_len: 0,
        reference_len: 0,
    };
    for (c, r) in candidates.iter().zip(references) {
        let (c, r) = (c.as_ref(), r.as_ref());
        stats.candidate_len += c.len();
        stats.reference_len += r.len();
        for n in 1..=4 {
            let ref_counts = ngram_counts(r, n);
            for (gram, count) in ngram_counts(c, n) {
                stats.matched[n - 1] += count.min(ref_counts.get(gram).copied().unwrap_or(0));
                stats.total[n - 1] += count;
            }
        }
    }
    Ok(stats)
}

/// Corpus-level BLEU-4 on a 0-100 scale with one reference per candidate
/// and no smoothing. A zero pooled precision at any order (including an
/// order with no candidate n-grams) gives 0.
pub fn bleu4<T, C, R>(candidates: &[C], references: &[R]) -> Result<f64>
where
    T: Eq + Hash,
    C: AsRef<[T]>,
    R: AsRef<[T]>,
{
    let stats = ngram_stats(candidates, references)?;
    if stats.matched.contains(&0) {
        return Ok(0.0);
    }
    let log_precision = (1..=4).map(|n| stats.precision(n).ln()).sum::<f64>() / 4.0;
    let brevity = (1.0 - stats.reference_len as f64 / stats.candidate_len as f64).min(0.0);
    Ok(100.0 * (log_precision + brevity).exp())
}

fn check_arcs(predicted: &[EmotionArc], target: &[EmotionArc]) -> Result<()> {
    if predicted.len() != target.len() {
        return contract(format!(
            "{} predicted arcs but {} target arcs",
            predicted.len(),
            target.len()
        ));
    }
    if predicted.is_empty() {
        return contract("no arcs to compare");
    }
    Ok(())
}

/// Exact-match fraction per segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentAccuracies {
    pub begin: f64,
    pub body: f64,
    pub end: f64,
}

impl SegmentAccuracies {
    pub fn get(&self, segment: Segment) -> f64 {
        match segment {
            Segment::Begin => self.begin,
            Segment::Body => self.body,
            Segment::End => self.end,
        }
    }
}

pub fn segment_accuracies(predicted: &[EmotionArc], target: &[EmotionArc]) -> Result<SegmentAccuracies> {
    check_arcs(predicted, target)?;
    let frac = |s: Segment| {
        let hits = predicted
            .iter()
            .zip(target)
            .filter(|(p, t)| p.get(s) == t.get(s))
            .count();
        hits as f64 / predicted.len() as f64
    };
    Ok(SegmentAccuracies {
        begin: frac(Segment::Begin),
        body: frac(Segment::Body),
        end: frac(Segment::End),
    })
}

/// Matched (example, segment) pairs over `3 * N`.
pub fn seg_acc(predicted: &[EmotionArc], target: &[EmotionArc]) -> Result<f64> {
    check_arcs(predicted, target)?;
    let hits: usize = predicted
        .iter()
        .zip(target)
        .map(|(p, t)| Segment::ALL.iter().filter(|&&s| p.get(s) == t.get(s)).count())
        .sum();
    Ok(hits as f64 / (3 * predicted.len()) as f64)
}

/// Fraction of examples whose whole arc matches.
pub fn arc_acc(predicted: &[EmotionArc], target: &[EmotionArc]) -> Result<f64> {
    check_arcs(predicted, target)?;
    let hits = predicted.iter().zip(target).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / predicted.len() as f64)
}

/// Classifies generated sentences, truncating beyond five and padding with
/// empty (neutral) sentences.
pub fn generated_arc<S: AsRef<str>>(sentences: &[S], lexicon: &Lexicon) -> EmotionArc {
    let mut five: Vec<&str> = sentences.iter().take(5).map(AsRef::as_ref).collect();
    five.resize(5, "");
    extract_arc(&five, lexicon).expect("exactly five sentences")
}

/// Decoding settings; a beam width of 1 selects greedy decoding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub beam_width: usize,
    pub max_len: usize,
    pub length_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_width: 1,
            max_len: 48,
            length_penalty: 1.0,
        }
    }
}

/// Produces the sentences of a narrative for an evaluation record.
pub trait Narrator: Sync {
    fn narrate(&self, scene: &Scene, reference: &Narrative) -> Result<Vec<String>>;
}

/// Returns the reference narrative unchanged.
pub struct EchoNarrator;

impl Narrator for EchoNarrator {
    fn narrate(&self, _scene: &Scene, reference: &Narrative) -> Result<Vec<String>> {
        Ok(reference.sentences.clone())
    }
}

/// A trained model conditioned on the reference's gold arc according to its variant.
pub struct ModelNarrator<'a> {
    pub model: &'a Model<f32>,
    pub vocab: &'a Vocab,
    pub decode: DecodeConfig,
}

impl<'a> ModelNarrator<'a> {
    pub fn new(model: &'a Model<f32>, vocab: &'a Vocab, decode: DecodeConfig) -> Result<Self> {
        if vocab.len() != model.config.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} tokens, model expects {}",
                vocab.len(),
                model.config.vocab_size
            )));
        }
        if decode.beam_width == 0 {
            return Err(Error::Config("beam_width must be at least 1".into()));
        }
        Ok(Self { model, vocab, decode })
    }

    /// Generated token ids for `scene` under `arc` (ignored by image-only models).
    pub fn generate(&self, scene: &Scene, arc: Option<&EmotionArc>) -> Result<Vec<usize>> {
        let config = &self.model.config;
        let regions = region_inputs(scene, config.max_regions, config.feature_dim)?;
        let emotion = config.variant.emotion_input(arc, self.vocab)?;
        if self.decode.beam_width == 1 {
            return self
                .model
                .generate_greedy(&regions, emotion.as_ref(), self.decode.max_len);
        }
        let beam = BeamConfig {
            width: self.decode.beam_width,
            max_len: self.decode.max_len,
            length_penalty: self.decode.length_penalty,
        };
        Ok(self.model.beam(&regions, emotion.as_ref(), &beam)?.tokens)
    }

    pub fn sentences(&self, scene: &Scene, arc: Option<&EmotionArc>) -> Result<Vec<String>> {
        Ok(split_sentences(&self.generate(scene, arc)?, self.vocab))
    }
}

impl Narrator for ModelNarrator<'_> {
    fn narrate(&self, scene: &Scene, reference: &Narrative) -> Result<Vec<String>> {
        self.sentences(scene, Some(&reference.gold_arc))
    }
}

/// Outcome for one evaluated scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub scene_id: u64,
    pub generated: String,
    pub predicted_arc: EmotionArc,
    pub target_arc: EmotionArc,
}

/// BLEU-4 in percent; accuracies as fractions in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu4: f64,
    pub begin_acc: f64,
    pub body_acc: f64,
    pub end_acc: f64,
    pub seg_acc: f64,
    pub arc_acc: f64,
    pub examples: Vec<ExampleRecord>,
}

impl EvalReport {
    pub fn segment(&self, segment: Segment) -> f64 {
        match segment {
            Segment::Begin => self.begin_acc,
            Segment::Body => self.body_acc,
            Segment::End => self.end_acc,
        }
    }
}

impl fmt::Display for EvalReport {
    /// Aligned table with accuracies as percentages.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows = [
            ("BLEU-4", self.bleu4),
            ("Begin-acc", 100.0 * self.begin_acc),
            ("Body-acc", 100.0 * self.body_acc),
            ("End-acc", 100.0 * self.end_acc),
            ("Seg-acc", 100.0 * self.seg_acc),
            ("Arc-acc", 100.0 * self.arc_acc),
        ];
        writeln!(f, "{:<10} {:>8}", "metric", "value")?;
        for (name, value) in rows {
            writeln!(f, "{name:<10} {value:>8.2}")?;
        }
        write!(f, "{:<10} {:>8}", "examples", self.examples.len())
    }
}

/// Generates a narrative for every record of `corpus`, classifies its
/// segments and scores it against the gold arc and reference text.
/// Generation runs in parallel; results are folded in scene-id order.
pub fn evaluate_model(narrator: &dyn Narrator, corpus: &Corpus, lexicon: &Lexicon) -> Result<EvalReport> {
    if Emotion::ALL.iter().all(|&e| lexicon.cues(e).is_empty()) {
        return Err(Error::Config("emotion lexicon has no cue words".into()));
    }
    let pairs: Vec<(&Scene, &Narrative)> = corpus.examples().collect();
    if pairs.is_empty() {
        return contract("evaluation set is empty");
    }
    let generated: Vec<Vec<String>> = pairs
        .par_iter()
        .map(|(scene, narrative)| narrator.narrate(scene, narrative))
        .collect::<Result<_>>()?;

    let mut examples = Vec::with_capacity(pairs.len());
    let mut candidates = Vec::with_capacity(pairs.len());
    let mut references = Vec::with_capacity(pairs.len());
    for ((scene, narrative), sentences) in pairs.iter().zip(generated) {
        let text = sentences.join(" ");
        candidates.push(word_tokens(&text));
        references.push(narrative.words());
        examples.push(ExampleRecord {
            scene_id: scene.scene_id,
            predicted_arc: generated_arc(&sentences, lexicon),
            target_arc: narrative.gold_arc,
            generated: text,
        });
    }
    let predicted: Vec<EmotionArc> = examples.iter().map(|e| e.predicted_arc).collect();
    let target: Vec<EmotionArc> = examples.iter().map(|e| e.target_arc).collect();
    let segments = segment_accuracies(&predicted, &target)?;
    Ok(EvalReport {
        bleu4: bleu4(&candidates, &references)?,
        begin_acc: segments.begin,
        body_acc: segments.body,
        end_acc: segments.end,
        seg_acc: seg_acc(&predicted, &target)?,
        arc_acc: arc_acc(&predicted, &target)?,
        examples,
    })
}

#[cfg(test)]
mod tests;
