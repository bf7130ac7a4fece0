use super::{EmotionInput, Example, ModelConfig, Variant};
use crate::corpus::{RegionInputs, BOS, COORD_DIM, EOS, PAD};
use crate::error::{contract, Error, Result};
use crate::nn::{decoder_block, encoder_block, BlockParams, Mask, NormParams};
use crate::tensor::{Element, ParamBinding, Tensor};

fn to_elements<T: Element>(v: &[f32]) -> Vec<T> {
    v.iter().map(|&x| T::from_f64(x as f64)).collect()
}

fn modality_row<'t, T: Element>(p: &ParamBinding<'t, '_, T>, index: usize) -> Result<Tensor<'t, T>> {
    let table = p.get("embed.modality")?;
    let h = table.shape()[1];
    table.slice(0, index, index + 1)?.reshape(&[h])
}

/// `LN(features W_f + coords W_p + modality[visual])`, one row per region.
pub fn embed_visual<'t, T: Element>(
    p: &ParamBinding<'t, '_, T>,
    config: &ModelConfig,
    regions: &RegionInputs,
) -> Result<Tensor<'t, T>> {
    let n = regions.valid.len();
    if n == 0 || regions.features.len() != n * config.feature_dim || regions.coords.len() != n * COORD_DIM {
        return Err(Error::Config(format!(
            "region inputs of {n} rows with {} feature and {} coordinate values do not fit feature_dim {}",
            regions.features.len(),
            regions.coords.len(),
            config.feature_dim
        )));
    }
    let tape = p.tape();
    let features = tape.constant(&[n, config.feature_dim], to_elements(&regions.features))?;
    let coords = tape.constant(&[n, COORD_DIM], to_elements(&regions.coords))?;
    let x = features
        .matmul(&p.get("visual.feature_proj")?)?
        .add(&coords.matmul(&p.get("visual.coord_proj")?)?)?
        .add(&modality_row(p, 0)?)?;
    NormParams::bind(p, "visual.ln")?.apply(&x)
}

/// `LN(word[id] + segment_pos[slot] + modality[emotion])` per emotion token.
pub fn embed_emotion<'t, T: Element>(p: &ParamBinding<'t, '_, T>, input: &EmotionInput) -> Result<Tensor<'t, T>> {
    if input.ids.is_empty() || input.ids.len() != input.slots.len() {
        return contract(format!(
            "emotion input needs matching nonempty ids and slots, got {} and {}",
            input.ids.len(),
            input.slots.len()
        ));
    }
    let words = p.get("embed.word")?.embedding(&input.ids)?;
    let slots = p.get("emotion.segment_pos")?.embedding(&input.slots)?;
    let x = words.add(&slots)?.add(&modality_row(p, 1)?)?;
    NormParams::bind(p, "emotion.ln")?.apply(&x)
}

/// Encoder output over `[regions; emotion tokens]` and its key mask.
#[derive(Debug, Clone)]
pub struct EncodedState<'t, T: Element> {
    /// `[L, hidden]`
    pub h: Tensor<'t, T>,
    pub valid: Vec<bool>,
}

pub fn encode<'t, T: Element>(
    p: &ParamBinding<'t, '_, T>,
    config: &ModelConfig,
    regions: &RegionInputs,
    emotion: Option<&EmotionInput>,
) -> Result<EncodedState<'t, T>> {
    if regions.valid.len() != config.max_regions {
        return Err(Error::Config(format!(
            "expected {} region rows, got {}",
            config.max_regions,
            regions.valid.len()
        )));
    }
    if !regions.valid.iter().any(|&v| v) {
        return contract("scene has no valid region");
    }
    let expected = config.variant.emotion_len();
    let given = emotion.map_or(0, |e| e.ids.len());
    if given != expected {
        let msg = match config.variant {
            Variant::ImageOnly => "variant image_only takes no emotion input".to_string(),
            v => format!("variant {v} needs {expected} emotion tokens, got {given}"),
        };
        return contract(msg);
    }
    let visual = embed_visual(p, config, regions)?;
    let mut valid = regions.valid.clone();
    let mut x = match emotion {
        Some(e) => {
            valid.extend(std::iter::repeat_n(true, e.ids.len()));
            Tensor::concat(&[visual, embed_emotion(p, e)?], 0)?
        }
        None => visual,
    };
    let mask = Mask::keys(valid.len(), &valid);
    let mask = (!valid.iter().all(|&v| v)).then_some(mask);
    for i in 0..config.encoder_blocks {
        let block = BlockParams::bind(p, &format!("encoder.{i}"), config.heads, false)?;
        x = encoder_block(&x, mask.as_ref(), &block)?;
    }
    let h = NormParams::bind(p, "encoder.final_ln")?.apply(&x)?;
    Ok(EncodedState { h, valid })
}

/// Row `i` holds the logits for the token following `prefix[..=i]`.
pub fn decode_logits<'t, T: Element>(
    p: &ParamBinding<'t, '_, T>,
    config: &ModelConfig,
    prefix: &[usize],
    state: &EncodedState<'t, T>,
) -> Result<Tensor<'t, T>> {
    let t = prefix.len();
    if t == 0 || prefix[0] != BOS {
        return contract("decoder prefix must start with [BOS]");
    }
    if t > config.max_target_len {
        return contract(format!(
            "prefix of {t} tokens exceeds max_target_len {}",
            config.max_target_len
        ));
    }
    let words = p.get("embed.word")?.embedding(prefix)?;
    let pos = p.get("decoder.pos")?.slice(0, 0, t)?;
    let mut y = NormParams::bind(p, "decoder.embed_ln")?.apply(&words.add(&pos)?)?;
    let memory_valid = (!state.valid.iter().all(|&v| v)).then_some(state.valid.as_slice());
    for i in 0..config.decoder_blocks {
        let block = BlockParams::bind(p, &format!("decoder.{i}"), config.heads, true)?;
        y = decoder_block(&y, &state.h, memory_valid, &block)?;
    }
    let y = NormParams::bind(p, "decoder.final_ln")?.apply(&y)?;
    y.matmul(&p.get("output.weight")?)?.add(&p.get("output.bias")?)
}

/// Mean negative log-likelihood over non-pad target positions.
pub fn nll_loss<'t, T: Element>(logits: &Tensor<'t, T>, targets: &[usize], pad: usize) -> Result<Tensor<'t, T>> {
    logits.cross_entropy(targets, pad)
}

/// Teacher-forced logits of one example and the aligned targets
/// (`target + [EOS]`).
pub fn example_logits<'t, T: Element>(
    p: &ParamBinding<'t, '_, T>,
    config: &ModelConfig,
    example: &Example,
) -> Result<(Tensor<'t, T>, Vec<usize>)> {
    let state = encode(p, config, &example.regions, example.emotion.as_ref())?;
    let mut prefix = Vec::with_capacity(example.target.len() + 1);
    prefix.push(BOS);
    prefix.extend_from_slice(&example.target);
    let logits = decode_logits(p, config, &prefix, &state)?;
    let mut targets = example.target.clone();
    targets.push(EOS);
    Ok((logits, targets))
}

/// Token-mean NLL over a batch.
pub fn batch_loss<'t, T: Element>(
    p: &ParamBinding<'t, '_, T>,
    config: &ModelConfig,
    batch: &[&Example],
) -> Result<Tensor<'t, T>> {
    if batch.is_empty() {
        return contract("empty batch");
    }
    let mut logits = Vec::with_capacity(batch.len());
    let mut targets = Vec::new();
    for ex in batch {
        let (l, t) = example_logits(p, config, ex)?;
        logits.push(l);
        targets.extend(t);
    }
    let all = if logits.len() == 1 {
        logits[0]
    } else {
        Tensor::concat(&logits, 0)?
    };
    nll_loss(&all, &targets, PAD)
}
