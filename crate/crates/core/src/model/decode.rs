use std::cmp::Ordering;

use super::{encode, EmotionInput, EncodedState, Model, ModelConfig};
use crate::corpus::{RegionInputs, BOS, EOS};
use crate::error::{contract, Result};
use crate::nn::{scaled_dot_product_attention, split_heads, AttentionParams, BlockParams, Mask, NormParams};
use crate::tensor::{Element, ParamBinding, Tape, Tensor};

/// Beam search settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamConfig {
    pub width: usize,
    pub max_len: usize,
    /// Exponent α of the length normalization `sum / len^α`.
    pub length_penalty: f64,
}

/// Generated tokens (without markers) and their normalized score.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    /// Summed log-probability of every emitted token, [EOS] included.
    pub log_prob: f64,
    /// Emitted token count, [EOS] included.
    pub length: usize,
    pub finished: bool,
}

impl Hypothesis {
    pub fn score(&self, length_penalty: f64) -> f64 {
        if self.length == 0 {
            return 0.0;
        }
        self.log_prob / (self.length as f64).powf(length_penalty)
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&x| x - lse).collect()
}

/// Lowest index among the maxima.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

struct BlockWeights<'t, T: Element> {
    block: BlockParams<'t, T>,
    /// Cross-attention keys and values over the encoder output, `[heads, L, dk]`.
    memory_k: Tensor<'t, T>,
    memory_v: Tensor<'t, T>,
}

/// Frozen decoder weights plus per-block memory projections.
struct Stepper<'t, 's, T: Element> {
    p: ParamBinding<'t, 's, T>,
    config: ModelConfig,
    blocks: Vec<BlockWeights<'t, T>>,
    memory_mask: Option<Mask>,
}

/// Self-attention keys and values of the emitted prefix, per block.
#[derive(Clone)]
struct Cache<'t, T: Element> {
    kv: Vec<Option<(Tensor<'t, T>, Tensor<'t, T>)>>,
    position: usize,
}

struct Live<'t, T: Element> {
    hyp: Hypothesis,
    cache: Cache<'t, T>,
    last: usize,
}

impl<'t, 's, T: Element> Stepper<'t, 's, T> {
    fn new(p: ParamBinding<'t, 's, T>, config: &ModelConfig, state: &EncodedState<'t, T>) -> Result<Self> {
        let mut blocks = Vec::with_capacity(config.decoder_blocks);
        for i in 0..config.decoder_blocks {
            let block = BlockParams::bind(&p, &format!("decoder.{i}"), config.heads, true)?;
            let cross = block.cross_attn.expect("decoder blocks carry cross-attention");
            let memory_k = split_heads(&state.h.matmul(&cross.wk)?, config.heads)?;
            let memory_v = split_heads(&state.h.matmul(&cross.wv)?, config.heads)?;
            blocks.push(BlockWeights {
                block,
                memory_k,
                memory_v,
            });
        }
        let memory_mask = (!state.valid.iter().all(|&v| v)).then(|| Mask::keys(1, &state.valid));
        Ok(Self {
            p,
            config: config.clone(),
            blocks,
            memory_mask,
        })
    }

    fn empty_cache(&self) -> Cache<'t, T> {
        Cache {
            kv: vec![None; self.blocks.len()],
            position: 0,
        }
    }

    fn attend(
        &self,
        q: &Tensor<'t, T>,
        k: &Tensor<'t, T>,
        v: &Tensor<'t, T>,
        mask: Option<&Mask>,
        attn: &AttentionParams<'t, T>,
    ) -> Result<Tensor<'t, T>> {
        let out = scaled_dot_product_attention(q, k, v, mask)?.output;
        out.transpose(0, 1)?.reshape(&[1, self.config.hidden])?.matmul(&attn.wo)
    }

    /// Feeds `token` at the cache position; returns next-token log-probs.
    fn step(&self, cache: &Cache<'t, T>, token: usize) -> Result<(Vec<f64>, Cache<'t, T>)> {
        let heads = self.config.heads;
        let word = self.p.get("embed.word")?.embedding(&[token])?;
        let pos = self
            .p
            .get("decoder.pos")?
            .slice(0, cache.position, cache.position + 1)?;
        let mut y = NormParams::bind(&self.p, "decoder.embed_ln")?.apply(&word.add(&pos)?)?;
        let mut next = Cache {
            kv: Vec::with_capacity(self.blocks.len()),
            position: cache.position + 1,
        };
        for (bw, prev) in self.blocks.iter().zip(&cache.kv) {
            let b = &bw.block;
            let normed = b.norms[0].apply(&y)?;
            let q = split_heads(&normed.matmul(&b.self_attn.wq)?, heads)?;
            let k_new = split_heads(&normed.matmul(&b.self_attn.wk)?, heads)?;
            let v_new = split_heads(&normed.matmul(&b.self_attn.wv)?, heads)?;
            let (k, v) = match prev {
                Some((k, v)) => (Tensor::concat(&[*k, k_new], 1)?, Tensor::concat(&[*v, v_new], 1)?),
                None => (k_new, v_new),
            };
            y = y.add(&self.attend(&q, &k, &v, None, &b.self_attn)?)?;
            next.kv.push(Some((k, v)));

            let cross = b.cross_attn.as_ref().expect("decoder blocks carry cross-attention");
            let normed = b.norms[1].apply(&y)?;
            let q = split_heads(&normed.matmul(&cross.wq)?, heads)?;
            y = y.add(&self.attend(&q, &bw.memory_k, &bw.memory_v, self.memory_mask.as_ref(), cross)?)?;

            y = y.add(&b.feed_forward(&b.norms[2].apply(&y)?)?)?;
        }
        let y = NormParams::bind(&self.p, "decoder.final_ln")?.apply(&y)?;
        let logits = y
            .matmul(&self.p.get("output.weight")?)?
            .add(&self.p.get("output.bias")?)?;
        let row: Vec<f64> = logits.value().iter().map(|v| v.to_f64()).collect();
        Ok((log_softmax(&row), next))
    }
}

impl<T: Element> Model<T> {
    fn with_stepper<R>(
        &self,
        regions: &RegionInputs,
        emotion: Option<&EmotionInput>,
        f: impl for<'t, 's> FnOnce(&Stepper<'t, 's, T>) -> Result<R>,
    ) -> Result<R> {
        let tape = Tape::new();
        let p = ParamBinding::frozen(&tape, &self.params);
        let state = encode(&p, &self.config, regions, emotion)?;
        let stepper = Stepper::new(p, &self.config, &state)?;
        f(&stepper)
    }

    /// Longest emission the positional table allows.
    fn cap(&self, max_len: usize) -> usize {
        max_len.min(self.config.max_target_len)
    }

    /// Appends the most probable token (lowest id on ties) until [EOS] or
    /// `max_len` emitted tokens.
    pub fn greedy(&self, regions: &RegionInputs, emotion: Option<&EmotionInput>, max_len: usize) -> Result<Hypothesis> {
        let max_len = self.cap(max_len);
        self.with_stepper(regions, emotion, |s| {
            let mut hyp = Hypothesis {
                tokens: Vec::new(),
                log_prob: 0.0,
                length: 0,
                finished: false,
            };
            let mut cache = s.empty_cache();
            let mut token = BOS;
            while hyp.length < max_len {
                let (logp, next) = s.step(&cache, token)?;
                cache = next;
                token = argmax(&logp);
                hyp.log_prob += logp[token];
                hyp.length += 1;
                if token == EOS {
                    hyp.finished = true;
                    break;
                }
                hyp.tokens.push(token);
            }
            Ok(hyp)
        })
    }

    pub fn generate_greedy(
        &self,
        regions: &RegionInputs,
        emotion: Option<&EmotionInput>,
        max_len: usize,
    ) -> Result<Vec<usize>> {
        self.greedy(regions, emotion, max_len).map(|h| h.tokens)
    }

    /// Beam search over summed log-probabilities, ranked by
    /// `sum / len^α`. The greedy hypothesis competes as well, so the result
    /// never scores below greedy decoding.
    pub fn beam(&self, regions: &RegionInputs, emotion: Option<&EmotionInput>, cfg: &BeamConfig) -> Result<Hypothesis> {
        if cfg.width == 0 {
            return contract("beam width must be at least 1");
        }
        let max_len = self.cap(cfg.max_len);
        let greedy = self.greedy(regions, emotion, max_len)?;
        let searched = self.with_stepper(regions, emotion, |s| {
            let mut live = vec![Live {
                hyp: Hypothesis {
                    tokens: Vec::new(),
                    log_prob: 0.0,
                    length: 0,
                    finished: false,
                },
                cache: s.empty_cache(),
                last: BOS,
            }];
            let mut finished: Vec<Hypothesis> = Vec::new();
            for _ in 0..max_len {
                // (source beam, token, total log-prob, token log-prob)
                let mut candidates: Vec<(usize, usize, f64, f64)> = Vec::new();
                let mut steps = Vec::with_capacity(live.len());
                for (b, l) in live.iter().enumerate() {
                    let (logp, cache) = s.step(&l.cache, l.last)?;
                    for (tok, &lp) in logp.iter().enumerate() {
                        candidates.push((b, tok, l.hyp.log_prob + lp, lp));
                    }
                    steps.push(cache);
                }
                candidates.sort_by(|a, b| {
                    b.2.total_cmp(&a.2)
                        .then(b.3.total_cmp(&a.3))
                        .then(a.0.cmp(&b.0))
                        .then(a.1.cmp(&b.1))
                });
                let mut next_live = Vec::with_capacity(cfg.width);
                for (b, tok, total, _) in candidates.into_iter().take(cfg.width) {
                    let mut hyp = live[b].hyp.clone();
                    hyp.log_prob = total;
                    hyp.length += 1;
                    if tok == EOS {
                        hyp.finished = true;
                        finished.push(hyp);
                    } else {
                        hyp.tokens.push(tok);
                        next_live.push(Live {
                            hyp,
                            cache: steps[b].clone(),
                            last: tok,
                        });
                    }
                }
                live = next_live;
                if finished.len() >= cfg.width || live.is_empty() {
                    break;
                }
            }
            finished.extend(live.into_iter().map(|l| l.hyp));
            Ok(finished)
        })?;
        let alpha = cfg.length_penalty;
        let mut best = greedy;
        for h in searched {
            if h.score(alpha).total_cmp(&best.score(alpha)) == Ordering::Greater {
                best = h;
            }
        }
        Ok(best)
    }

    pub fn generate_beam(
        &self,
        regions: &RegionInputs,
        emotion: Option<&EmotionInput>,
        cfg: &BeamConfig,
    ) -> Result<Vec<usize>> {
        self.beam(regions, emotion, cfg).map(|h| h.tokens)
    }

    /// Log-probability and length of emitting `tokens` then [EOS] under
    /// teacher forcing.
    pub fn score_tokens(
        &self,
        regions: &RegionInputs,
        emotion: Option<&EmotionInput>,
        tokens: &[usize],
        finished: bool,
    ) -> Result<Hypothesis> {
        self.with_stepper(regions, emotion, |s| {
            let mut cache = s.empty_cache();
            let mut last = BOS;
            let mut log_prob = 0.0;
            let emitted: Vec<usize> = tokens.iter().copied().chain(finished.then_some(EOS)).collect();
            for &tok in &emitted {
                let (logp, next) = s.step(&cache, last)?;
                log_prob += logp[tok];
                cache = next;
                last = tok;
            }
            Ok(Hypothesis {
                tokens: tokens.to_vec(),
                log_prob,
                length: emitted.len(),
                finished,
            })
        })
    }
}
