//! Synthetic scenes and narratives, text handling, vocabulary and splits.

mod io;
mod text;

use std::collections::BTreeSet;

use rand::distr::weighted::WeightedIndex;
use rand::seq::index::sample;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use io::{read_corpus, write_corpus, CORPUS_FILE, FEATURES_FILE};
pub use text::{
    build_vocab, detokenize, normalize_text, split_sentences, tokenize, word_tokens, Vocab, BOS, EMOTION_SEP, EOS, PAD,
    SPECIALS, UNK,
};

use crate::emotion::{Emotion, EmotionArc, FrequencyTable, Lexicon};
use crate::error::{contract, Error, Result};

/// Components of the per-region box descriptor.
pub const COORD_DIM: usize = 7;

/// Box as (left, top, right, bottom), normalized to the unit square.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub left: f32,
    pub top: f32,
    pub right: f32,
    pub bottom: f32,
}

impl BoundingBox {
    pub fn new(left: f32, top: f32, right: f32, bottom: f32) -> Self {
        Self {
            left,
            top,
            right,
            bottom,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = [self.left, self.top, self.right, self.bottom]
            .iter()
            .all(|v| (0.0..=1.0).contains(v));
        if !in_unit || self.left >= self.right || self.top >= self.bottom {
            return contract(format!("box {self:?} is not a nonempty box inside [0,1]"));
        }
        Ok(())
    }

    pub fn width(&self) -> f32 {
        self.right - self.left
    }

    pub fn height(&self) -> f32 {
        self.bottom - self.top
    }

    pub fn area(&self) -> f32 {
        self.width() * self.height()
    }

    /// (top, left, bottom, right, width, height, area)
    pub fn coords(&self) -> [f32; COORD_DIM] {
        [
            self.top,
            self.left,
            self.bottom,
            self.right,
            self.width(),
            self.height(),
            self.area(),
        ]
    }

    fn side(&self) -> &'static str {
        if self.left + self.right < 1.0 {
            "left"
        } else {
            "right"
        }
    }

    fn level(&self) -> &'static str {
        if self.top + self.bottom < 1.0 {
            "top"
        } else {
            "bottom"
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub category_id: usize,
    pub bbox: BoundingBox,
    pub feature: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: u64,
    pub regions: Vec<Region>,
}

impl Scene {
    /// Region indices ordered by decreasing area, ties by index.
    pub fn regions_by_area(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.regions.len()).collect();
        order.sort_by(|&a, &b| {
            let (aa, ab) = (self.regions[a].bbox.area(), self.regions[b].bbox.area());
            ab.total_cmp(&aa).then(a.cmp(&b))
        });
        order
    }
}

/// A five-sentence narrative about one scene.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Narrative {
    pub scene_id: u64,
    pub sentences: Vec<String>,
    pub gold_arc: EmotionArc,
}

impl Narrative {
    pub fn text(&self) -> String {
        self.sentences.join(" ")
    }

    pub fn words(&self) -> Vec<String> {
        word_tokens(&self.text())
    }

    pub fn token_ids(&self, vocab: &Vocab) -> Vec<usize> {
        tokenize(&self.text(), vocab)
    }
}

/// Settings of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub scenes: usize,
    pub categories: usize,
    pub min_regions: usize,
    pub max_regions: usize,
    pub feature_dim: usize,
    pub noise: f32,
    /// Per-segment probability of neutral; the rest is split evenly.
    pub neutral_weight: f64,
    pub seed: u64,
    /// Seed of the category basis and box encoding, shared across corpora.
    pub basis_seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            scenes: 2000,
            categories: 12,
            min_regions: 2,
            max_regions: 8,
            feature_dim: 32,
            noise: 0.1,
            neutral_weight: 0.4,
            seed: 0,
            basis_seed: 0x5eed_ba51,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.categories == 0 || self.feature_dim == 0 {
            return bad("categories and feature_dim must be positive".into());
        }
        if self.min_regions == 0 || self.min_regions > self.max_regions {
            return bad(format!(
                "region range [{}, {}] must satisfy 1 <= min <= max",
                self.min_regions, self.max_regions
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise {} must be finite and nonnegative", self.noise));
        }
        if !(0.0..=1.0).contains(&self.neutral_weight) {
            return bad(format!("neutral_weight {} must lie in [0,1]", self.neutral_weight));
        }
        Ok(())
    }

    /// Probability of each emotion per segment, canonical order.
    pub fn arc_prior(&self) -> [f64; 7] {
        let rest = (1.0 - self.neutral_weight) / 6.0;
        let mut p = [rest; 7];
        p[Emotion::Neutral.index()] = self.neutral_weight;
        p
    }
}

const CATEGORY_WORDS: [&str; 12] = [
    "dog", "cat", "horse", "bird", "car", "bus", "tree", "bench", "boat", "kite", "clock", "pizza",
];

pub fn category_word(category_id: usize) -> String {
    CATEGORY_WORDS
        .get(category_id)
        .map(|w| w.to_string())
        .unwrap_or_else(|| format!("object{category_id}"))
}

/// Mixes a seed with a tag and an index into an independent sub-seed.
pub fn sub_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index.rotate_left(32);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const TAG_SCENE: u64 = 1;
const TAG_ARC: u64 = 2;
const TAG_RENDER: u64 = 3;

/// Category basis vectors and the linear box encoding.
#[derive(Debug, Clone)]
pub struct FeatureModel {
    dim: usize,
    basis: Vec<f32>,
    box_encoding: Vec<f32>,
}

impl FeatureModel {
    pub fn new(config: &CorpusConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.basis_seed);
        let dim = config.feature_dim;
        let mut draw = |n: usize| -> Vec<f32> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let basis = draw(config.categories * dim);
        let box_encoding = draw(COORD_DIM * dim);
        Self {
            dim,
            basis,
            box_encoding,
        }
    }

    /// Basis row plus box encoding, without noise.
    pub fn clean_feature(&self, category_id: usize, bbox: &BoundingBox) -> Vec<f32> {
        let mut f = self.basis[category_id * self.dim..(category_id + 1) * self.dim].to_vec();
        for (c, coord) in bbox.coords().into_iter().enumerate() {
            let row = &self.box_encoding[c * self.dim..(c + 1) * self.dim];
            f.iter_mut().zip(row).for_each(|(v, w)| *v += coord * w);
        }
        f
    }
}

/// Deterministic scene for `(scene_id, config)`.
pub fn generate_scene(scene_id: u64, config: &CorpusConfig, features: &FeatureModel) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, TAG_SCENE, scene_id));
    let count = rng.random_range(config.min_regions..=config.max_regions);
    let categories: Vec<usize> = if count <= config.categories {
        sample(&mut rng, config.categories, count).into_vec()
    } else {
        (0..count).map(|_| rng.random_range(0..config.categories)).collect()
    };
    let regions = categories
        .into_iter()
        .map(|category_id| {
            let w = rng.random_range(15..=60u32);
            let h = rng.random_range(15..=60u32);
            let left = rng.random_range(0..=100 - w);
            let top = rng.random_range(0..=100 - h);
            let bbox = BoundingBox::new(
                left as f32 / 100.0,
                top as f32 / 100.0,
                (left + w) as f32 / 100.0,
                (top + h) as f32 / 100.0,
            );
            let mut feature = features.clean_feature(category_id, &bbox);
            if config.noise > 0.0 {
                for v in feature.iter_mut() {
                    let z: f32 = StandardNormal.sample(&mut rng);
                    *v += config.noise * z;
                }
            }
            Region {
                category_id,
                bbox,
                feature,
            }
        })
        .collect();
    Ok(Scene { scene_id, regions })
}

/// Samples an arc from the per-segment prior, independently of the scene.
pub fn sample_arc(seed: u64, index: u64, config: &CorpusConfig) -> EmotionArc {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, TAG_ARC, index));
    let dist = WeightedIndex::new(config.arc_prior()).expect("prior has positive mass");
    let mut draw = || Emotion::ALL[dist.sample(&mut rng)];
    EmotionArc::new(draw(), draw(), draw())
}

fn pick(rng: &mut ChaCha8Rng, options: [&str; 2]) -> String {
    options.choose(rng).expect("two options").to_string()
}

fn pick_cue(rng: &mut ChaCha8Rng, lexicon: &Lexicon, e: Emotion) -> Option<String> {
    lexicon.cues(e).choose(rng).map(|c| c.to_string())
}

/// Renders a five-sentence narrative whose cue words encode `arc`.
pub fn render_narrative(scene: &Scene, arc: EmotionArc, seed: u64, lexicon: &Lexicon) -> Result<Narrative> {
    if scene.regions.is_empty() {
        return contract("cannot render a narrative for a scene without regions");
    }
    let rng = &mut ChaCha8Rng::seed_from_u64(sub_seed(seed, TAG_RENDER, scene.scene_id));
    let order = scene.regions_by_area();
    let primary = &scene.regions[order[0]];
    let secondary = order.get(1).map(|&i| &scene.regions[i]);
    let p = category_word(primary.category_id);
    let s = secondary
        .map(|r| category_word(r.category_id))
        .unwrap_or_else(|| p.clone());

    let s1 = match pick_cue(rng, lexicon, arc.begin) {
        Some(c) => pick(rng, ["the {p} looks {c}.", "this {p} seems {c}."]).replace("{c}", &c),
        None => pick(rng, ["there is a {p} in the picture.", "this picture shows a {p}."]),
    };
    let s2 = pick(rng, ["the {p} is on the {side}.", "the {p} is near the {level}."])
        .replace("{side}", primary.bbox.side())
        .replace("{level}", primary.bbox.level());
    let s3 = match pick_cue(rng, lexicon, arc.body) {
        Some(c) => pick(rng, ["they seem to be {c}.", "everyone feels {c} here."]).replace("{c}", &c),
        None => pick(rng, ["the {s} is close to the {p}.", "there is also a {s}."]),
    };
    let s4 = match secondary {
        Some(r) => pick(rng, ["a {s} is on the {side}.", "a {s} is near the {level}."])
            .replace("{side}", r.bbox.side())
            .replace("{level}", r.bbox.level()),
        None => pick(rng, ["nothing else is around.", "the rest is empty."]),
    };
    let s5 = match pick_cue(rng, lexicon, arc.end) {
        Some(c) => pick(rng, ["in the end they are {c}.", "finally everyone feels {c}."]).replace("{c}", &c),
        None => pick(rng, ["that is all for today.", "the day goes on."]),
    };
    let sentences = [s1, s2, s3, s4, s5]
        .iter()
        .map(|t| normalize_text(&t.replace("{p}", &p).replace("{s}", &s)))
        .collect();
    Ok(Narrative {
        scene_id: scene.scene_id,
        sentences,
        gold_arc: arc,
    })
}

/// Scenes plus narratives referring to them by id.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub feature_dim: usize,
    /// Sorted by `scene_id`, ids unique.
    pub scenes: Vec<Scene>,
    pub narratives: Vec<Narrative>,
    pub generator: Option<CorpusConfig>,
}

impl Corpus {
    pub fn new(feature_dim: usize, mut scenes: Vec<Scene>, narratives: Vec<Narrative>) -> Result<Self> {
        scenes.sort_by_key(|s| s.scene_id);
        if scenes.windows(2).any(|w| w[0].scene_id == w[1].scene_id) {
            return contract("duplicate scene id");
        }
        for s in &scenes {
            for r in &s.regions {
                r.bbox.validate()?;
                if r.feature.len() != feature_dim {
                    return Err(Error::Dimension {
                        op: "region feature",
                        lhs: vec![feature_dim],
                        rhs: vec![r.feature.len()],
                    });
                }
            }
        }
        let corpus = Self {
            feature_dim,
            scenes,
            narratives,
            generator: None,
        };
        for n in &corpus.narratives {
            if corpus.scene(n.scene_id).is_none() {
                return contract(format!("narrative refers to unknown scene {}", n.scene_id));
            }
            if n.sentences.len() != 5 {
                return contract(format!(
                    "narrative of scene {} has {} sentences",
                    n.scene_id,
                    n.sentences.len()
                ));
            }
        }
        Ok(corpus)
    }

    pub fn len(&self) -> usize {
        self.narratives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.narratives.is_empty()
    }

    pub fn scene(&self, scene_id: u64) -> Option<&Scene> {
        self.scenes
            .binary_search_by_key(&scene_id, |s| s.scene_id)
            .ok()
            .map(|i| &self.scenes[i])
    }

    /// `(scene, narrative)` pairs in narrative order.
    pub fn examples(&self) -> impl Iterator<Item = (&Scene, &Narrative)> {
        self.narratives
            .iter()
            .map(|n| (self.scene(n.scene_id).expect("validated scene reference"), n))
    }

    pub fn max_regions(&self) -> usize {
        self.scenes.iter().map(|s| s.regions.len()).max().unwrap_or(0)
    }

    /// Histogram of the gold arcs.
    pub fn gold_table(&self) -> FrequencyTable {
        FrequencyTable::from_arcs(self.narratives.iter().map(|n| &n.gold_arc))
    }

    /// Subset holding only the given scenes, preserving narrative order.
    pub fn restrict(&self, scene_ids: &BTreeSet<u64>) -> Corpus {
        Corpus {
            feature_dim: self.feature_dim,
            scenes: self
                .scenes
                .iter()
                .filter(|s| scene_ids.contains(&s.scene_id))
                .cloned()
                .collect(),
            narratives: self
                .narratives
                .iter()
                .filter(|n| scene_ids.contains(&n.scene_id))
                .cloned()
                .collect(),
            generator: self.generator.clone(),
        }
    }

    /// First `count` narratives and their scenes.
    pub fn take(&self, count: usize) -> Corpus {
        let ids: BTreeSet<u64> = self.narratives.iter().take(count).map(|n| n.scene_id).collect();
        let mut sub = self.restrict(&ids);
        sub.narratives.truncate(count);
        sub
    }
}

/// Generates `config.scenes` scenes with one narrative each, in parallel
/// over scene ids.
pub fn generate_corpus(config: &CorpusConfig, lexicon: &Lexicon) -> Result<Corpus> {
    config.validate()?;
    let features = FeatureModel::new(config);
    let pairs: Vec<(Scene, Narrative)> = (0..config.scenes as u64)
        .into_par_iter()
        .map(|id| {
            let scene = generate_scene(id, config, &features)?;
            let arc = sample_arc(config.seed, id, config);
            let narrative = render_narrative(&scene, arc, config.seed, lexicon)?;
            Ok((scene, narrative))
        })
        .collect::<Result<_>>()?;
    let (scenes, narratives) = pairs.into_iter().unzip();
    let mut corpus = Corpus::new(config.feature_dim, scenes, narratives)?;
    corpus.generator = Some(config.clone());
    Ok(corpus)
}

/// Padded model inputs of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionInputs {
    /// `[n, d]`
    pub features: Vec<f32>,
    /// `[n, 7]`
    pub coords: Vec<f32>,
    /// `false` for padding rows.
    pub valid: Vec<bool>,
}

pub fn region_inputs(scene: &Scene, max_regions: usize, feature_dim: usize) -> Result<RegionInputs> {
    if scene.regions.is_empty() || scene.regions.len() > max_regions {
        return contract(format!(
            "scene {} has {} regions; expected 1..={max_regions}",
            scene.scene_id,
            scene.regions.len()
        ));
    }
    let mut out = RegionInputs {
        features: vec![0.0; max_regions * feature_dim],
        coords: vec![0.0; max_regions * COORD_DIM],
        valid: vec![false; max_regions],
    };
    for (i, r) in scene.regions.iter().enumerate() {
        r.bbox.validate()?;
        if r.feature.len() != feature_dim {
            return Err(Error::Config(format!(
                "region feature has dimension {}, model expects {feature_dim}",
                r.feature.len()
            )));
        }
        out.features[i * feature_dim..(i + 1) * feature_dim].copy_from_slice(&r.feature);
        out.coords[i * COORD_DIM..(i + 1) * COORD_DIM].copy_from_slice(&r.bbox.coords());
        out.valid[i] = true;
    }
    Ok(out)
}

/// Splits by scene id; `round(eval_fraction * scenes)` scenes (at least one
/// per side) go to the eval half.
pub fn split_dataset(corpus: &Corpus, eval_fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
        return contract(format!("eval_fraction {eval_fraction} must lie in (0, 1)"));
    }
    let mut ids: Vec<u64> = corpus.scenes.iter().map(|s| s.scene_id).collect();
    if ids.len() < 2 {
        return contract(format!("cannot split a corpus of {} scenes", ids.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rand::seq::SliceRandom::shuffle(ids.as_mut_slice(), &mut rng);
    let n_eval = ((eval_fraction * ids.len() as f64).round() as usize).clamp(1, ids.len() - 1);
    let eval: BTreeSet<u64> = ids[..n_eval].iter().copied().collect();
    let train: BTreeSet<u64> = ids[n_eval..].iter().copied().collect();
    Ok((corpus.restrict(&train), corpus.restrict(&eval)))
}
