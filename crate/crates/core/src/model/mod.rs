//! Visual and emotion embeddings, fused encoder, autoregressive decoder,
//! loss and decoding.

mod check;
mod decode;
mod forward;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use check::{emotion_vocab, gradient_check, synthetic_batch};
pub use decode::{BeamConfig, Hypothesis};
pub use forward::{
    batch_loss, decode_logits, embed_emotion, embed_visual, encode, example_logits, nll_loss, EncodedState,
};

use crate::corpus::{region_inputs, Narrative, RegionInputs, Scene, Vocab, COORD_DIM};
use crate::emotion::{arc_to_tokens, EmotionArc, Segment};
use crate::error::{contract, Error, Result};
use crate::nn::{register_block, register_layer_norm, Initializer};
use crate::tensor::{Element, ParamStore};

/// Which emotion information the encoder receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    ImageOnly,
    BeginOnly,
    BodyOnly,
    EndOnly,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::ImageOnly,
        Variant::BeginOnly,
        Variant::BodyOnly,
        Variant::EndOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::ImageOnly => "image_only",
            Variant::BeginOnly => "begin_only",
            Variant::BodyOnly => "body_only",
            Variant::EndOnly => "end_only",
        }
    }

    /// Number of emotion rows appended to the region rows.
    pub fn emotion_len(self) -> usize {
        match self {
            Variant::Full => 5,
            Variant::ImageOnly => 0,
            _ => 1,
        }
    }

    pub fn segment(self) -> Option<Segment> {
        match self {
            Variant::BeginOnly => Some(Segment::Begin),
            Variant::BodyOnly => Some(Segment::Body),
            Variant::EndOnly => Some(Segment::End),
            _ => None,
        }
    }

    pub fn needs_arc(self) -> bool {
        self != Variant::ImageOnly
    }

    /// Emotion tokens and their segment-position slots for `arc`.
    pub fn emotion_input(self, arc: Option<&EmotionArc>, vocab: &Vocab) -> Result<Option<EmotionInput>> {
        if !self.needs_arc() {
            return Ok(None);
        }
        let Some(arc) = arc else {
            return contract(format!("variant {self} requires an emotion arc"));
        };
        let ids = arc_to_tokens(arc, vocab)?;
        Ok(Some(match self.segment() {
            None => EmotionInput {
                ids: ids.to_vec(),
                slots: (0..5).collect(),
            },
            Some(seg) => {
                // The single token keeps the slot it occupies in the full layout.
                let slot = 2 * seg.index();
                EmotionInput {
                    ids: vec![ids[slot]],
                    slots: vec![slot],
                }
            }
        }))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|v| v.name()).collect();
            Error::Config(format!("unknown variant {s:?}; valid: {}", names.join(", ")))
        })
    }
}

/// Emotion token ids and their rows in the segment-position table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmotionInput {
    pub ids: Vec<usize>,
    pub slots: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub feature_dim: usize,
    pub max_regions: usize,
    pub vocab_size: usize,
    pub max_target_len: usize,
    pub variant: Variant,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_init_std() -> f64 {
    0.02
}

impl ModelConfig {
    /// hidden 64, 4 heads, 2 + 2 blocks, 32-dim features, 8 regions.
    pub fn desk(vocab_size: usize, variant: Variant) -> Self {
        Self {
            hidden: 64,
            heads: 4,
            encoder_blocks: 2,
            decoder_blocks: 2,
            feature_dim: 32,
            max_regions: 8,
            vocab_size,
            max_target_len: 48,
            variant,
            init_std: default_init_std(),
        }
    }

    /// Configuration of the end-to-end gradient check.
    pub fn tiny() -> Self {
        Self {
            hidden: 8,
            heads: 2,
            encoder_blocks: 1,
            decoder_blocks: 1,
            feature_dim: 4,
            max_regions: 2,
            vocab_size: 12,
            max_target_len: 8,
            variant: Variant::Full,
            init_std: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("encoder_blocks", self.encoder_blocks),
            ("decoder_blocks", self.decoder_blocks),
            ("feature_dim", self.feature_dim),
            ("max_regions", self.max_regions),
            ("max_target_len", self.max_target_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.vocab_size < crate::corpus::SPECIALS.len() + 7 {
            return Err(Error::Config(format!(
                "vocab_size {} cannot hold the specials and emotion words",
                self.vocab_size
            )));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config(format!("init_std {} must be positive", self.init_std)));
        }
        Ok(())
    }

    /// Encoder sequence length: regions plus emotion rows.
    pub fn encoder_len(&self) -> usize {
        self.max_regions + self.variant.emotion_len()
    }

    /// Expected shape of every parameter.
    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let store = init_params::<f32>(
            &ModelConfig {
                init_std: 1.0,
                ..self.clone()
            },
            0,
        )?;
        Ok(store.iter().map(|(k, p)| (k.clone(), p.shape.clone())).collect())
    }
}

/// Registers and initializes every parameter: weights ~ Normal(0, init_std),
/// layer norms at gain 1 / bias 0, biases at 0. Embedding tables, norms and
/// biases are exempt from weight decay.
pub fn init_params<T: Element>(config: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    config.validate()?;
    let h = config.hidden;
    let mut store = ParamStore::new();
    let mut init = Initializer::new(ChaCha8Rng::seed_from_u64(seed), config.init_std)?;

    init.weight(&mut store, "visual.feature_proj", &[config.feature_dim, h])?;
    init.weight(&mut store, "visual.coord_proj", &[COORD_DIM, h])?;
    register_layer_norm(&mut store, "visual.ln", h)?;
    init.table(&mut store, "embed.word", &[config.vocab_size, h])?;
    init.table(&mut store, "embed.modality", &[2, h])?;
    init.table(&mut store, "emotion.segment_pos", &[5, h])?;
    register_layer_norm(&mut store, "emotion.ln", h)?;
    for i in 0..config.encoder_blocks {
        register_block(&mut store, &mut init, &format!("encoder.{i}"), h, false)?;
    }
    register_layer_norm(&mut store, "encoder.final_ln", h)?;
    init.table(&mut store, "decoder.pos", &[config.max_target_len, h])?;
    register_layer_norm(&mut store, "decoder.embed_ln", h)?;
    for i in 0..config.decoder_blocks {
        register_block(&mut store, &mut init, &format!("decoder.{i}"), h, true)?;
    }
    register_layer_norm(&mut store, "decoder.final_ln", h)?;
    init.weight(&mut store, "output.weight", &[h, config.vocab_size])?;
    store.insert(
        "output.bias",
        &[config.vocab_size],
        vec![T::ZERO; config.vocab_size],
        false,
    )?;
    Ok(store)
}

/// Configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Element> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Element> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Self { config, params })
    }

    /// Checks that `params` holds exactly the tensors `config` implies.
    pub fn from_parts(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes()?;
        for (name, shape) in &expected {
            match params.get(name) {
                None => return Err(Error::Config(format!("checkpoint lacks parameter {name}"))),
                Some(p) if &p.shape != shape => {
                    return Err(Error::Config(format!(
                        "parameter {name} has shape {:?}, configuration expects {shape:?}",
                        p.shape
                    )))
                }
                Some(_) => {}
            }
        }
        if params.len() != expected.len() {
            let known: std::collections::BTreeSet<&String> = expected.iter().map(|(n, _)| n).collect();
            let extra = params.names().find(|n| !known.contains(n)).cloned().unwrap_or_default();
            return Err(Error::Config(format!("unexpected parameter {extra}")));
        }
        Ok(Self { config, params })
    }
}

/// One training or evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub scene_id: u64,
    pub regions: RegionInputs,
    pub emotion: Option<EmotionInput>,
    pub arc: EmotionArc,
    /// Narrative tokens without sequence markers.
    pub target: Vec<usize>,
}

impl Example {
    pub fn new(scene: &Scene, narrative: &Narrative, vocab: &Vocab, config: &ModelConfig) -> Result<Self> {
        let target = narrative.token_ids(vocab);
        if target.len() + 1 > config.max_target_len {
            return Err(Error::Config(format!(
                "narrative of scene {} has {} tokens; max_target_len {} leaves room for {}",
                scene.scene_id,
                target.len(),
                config.max_target_len,
                config.max_target_len - 1
            )));
        }
        Ok(Self {
            scene_id: scene.scene_id,
            regions: region_inputs(scene, config.max_regions, config.feature_dim)?,
            emotion: config.variant.emotion_input(Some(&narrative.gold_arc), vocab)?,
            arc: narrative.gold_arc,
            target,
        })
    }
}
