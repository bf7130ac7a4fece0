use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{batch_loss, Example, Model, ModelConfig};
use crate::corpus::{RegionInputs, Vocab, COORD_DIM, SPECIALS};
use crate::emotion::{Emotion, EmotionArc};
use crate::error::{Error, Result};
use crate::tensor::{analytic_gradients, compare_with_finite_differences, GradCheckReport};

/// Specials followed by the seven emotion names.
pub fn emotion_vocab() -> Vocab {
    Vocab::from_tokens(Emotion::ALL.iter().map(|e| e.name().to_string())).expect("distinct names")
}

fn random_regions(rng: &mut ChaCha8Rng, config: &ModelConfig, count: usize) -> RegionInputs {
    let (n, d) = (config.max_regions, config.feature_dim);
    let mut r = RegionInputs {
        features: vec![0.0; n * d],
        coords: vec![0.0; n * COORD_DIM],
        valid: vec![false; n],
    };
    for i in 0..count {
        for v in &mut r.features[i * d..(i + 1) * d] {
            *v = rng.random_range(-1.0..1.0);
        }
        let (l, t) = (rng.random_range(0.0..0.5f32), rng.random_range(0.0..0.5f32));
        let (w, h) = (rng.random_range(0.1..0.5f32), rng.random_range(0.1..0.5f32));
        r.coords[i * COORD_DIM..(i + 1) * COORD_DIM].copy_from_slice(&[t, l, t + h, l + w, w, h, w * h]);
        r.valid[i] = true;
    }
    r
}

/// Two random examples for `config`: one with every region present and
/// one with a single region, so padding masks are exercised.
pub fn synthetic_batch(config: &ModelConfig, seed: u64) -> Result<Vec<Example>> {
    let vocab = emotion_vocab();
    if config.vocab_size < vocab.len() {
        return Err(Error::Config(format!(
            "gradient check needs vocab_size >= {}, got {}",
            vocab.len(),
            config.vocab_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lens = [4.min(config.max_target_len - 1), 6.min(config.max_target_len - 1)];
    let counts = [config.max_regions, 1];
    let mut batch = Vec::new();
    for (len, count) in lens.into_iter().zip(counts) {
        let mut e = || Emotion::ALL[rng.random_range(0..7)];
        let arc = EmotionArc::new(e(), e(), e());
        batch.push(Example {
            scene_id: batch.len() as u64,
            regions: random_regions(&mut rng, config, count),
            emotion: config.variant.emotion_input(Some(&arc), &vocab)?,
            arc,
            target: (0..len)
                .map(|_| rng.random_range(SPECIALS.len()..config.vocab_size))
                .collect(),
        });
    }
    Ok(batch)
}

/// Central finite-difference check of every parameter of a freshly
/// initialized 64-bit model on [`synthetic_batch`]. `corrupt` scales the
/// analytic gradient of one parameter first, as a negative control.
pub fn gradient_check(
    config: &ModelConfig,
    seed: u64,
    eps: f64,
    corrupt: Option<(&str, f64)>,
) -> Result<GradCheckReport> {
    let model = Model::<f64>::new(config.clone(), seed)?;
    let examples = synthetic_batch(config, seed)?;
    let batch: Vec<&Example> = examples.iter().collect();
    let mut analytic = analytic_gradients(|p| batch_loss(p, config, &batch), &model.params)?;
    if let Some((name, factor)) = corrupt {
        let g = analytic
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("no parameter named {name}")))?;
        g.iter_mut().for_each(|v| *v *= factor);
    }
    compare_with_finite_differences(|p| batch_loss(p, config, &batch), &model.params, &analytic, eps)
}
