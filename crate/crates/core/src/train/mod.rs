//! AdamW, learning-rate schedule, training loop and checkpoints.

mod checkpoint;
mod optim;

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, write_atomic, Checkpoint, MAGIC, VERSION};
pub use optim::{adamw_step, clip_grad_norm, lr_at, AdamW, OptimizerState};

use crate::corpus::sub_seed;
use crate::corpus::Vocab;
use crate::error::{contract, Error, Result};
use crate::model::{batch_loss, Example, Model};
use crate::tensor::{ParamBinding, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub seed: u64,
    /// Eval-loss period in steps; 0 disables.
    pub eval_every: u64,
    /// Checkpoint period in steps; 0 saves only at the end.
    pub checkpoint_every: u64,
    /// Stops once a training batch loss falls below this value.
    pub target_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 3e-4,
            warmup_steps: 100,
            total_steps: 2000,
            batch_size: 16,
            weight_decay: 0.01,
            grad_clip_norm: 1.0,
            seed: 0,
            eval_every: 200,
            checkpoint_every: 0,
            target_loss: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.warmup_steps >= self.total_steps {
            return bad(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr {} must be positive", self.base_lr));
        }
        if !(self.weight_decay >= 0.0 && self.grad_clip_norm > 0.0) {
            return bad("weight_decay must be >= 0 and grad_clip_norm > 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Eval => "eval",
        })
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRecord {
    pub step: u64,
    pub split: Split,
    pub loss: f64,
    pub lr: f64,
}

impl fmt::Display for MetricRecord {
    /// `step<TAB>split<TAB>loss<TAB>lr`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{:.6}\t{:.6e}", self.step, self.split, self.loss, self.lr)
    }
}

/// Seeded example order: each epoch is a fresh permutation, so batch `k`
/// depends only on `(seed, k)` and training can resume mid-epoch.
struct BatchOrder {
    seed: u64,
    len: usize,
    epoch: Option<(u64, Vec<usize>)>,
}

impl BatchOrder {
    fn index(&mut self, position: u64) -> usize {
        let epoch = position / self.len as u64;
        if self.epoch.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut perm: Vec<usize> = (0..self.len).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(self.seed, 0xba7c, epoch)));
            self.epoch = Some((epoch, perm));
        }
        self.epoch.as_ref().expect("set above").1[(position % self.len as u64) as usize]
    }

    fn batch(&mut self, step: u64, size: usize) -> Vec<usize> {
        let start = (step - 1) * size as u64;
        (0..size as u64).map(|j| self.index(start + j)).collect()
    }
}

/// Token-weighted mean NLL with parameters frozen.
pub fn evaluate_loss(model: &Model<f32>, examples: &[Example], batch_size: usize) -> Result<f64> {
    if examples.is_empty() {
        return contract("no examples to evaluate");
    }
    let mut total = 0.0;
    let mut tokens = 0usize;
    for chunk in examples.chunks(batch_size.max(1)) {
        let tape = Tape::new();
        let p = ParamBinding::frozen(&tape, &model.params);
        let batch: Vec<&Example> = chunk.iter().collect();
        let count: usize = chunk.iter().map(|e| e.target.len() + 1).sum();
        total += batch_loss(&p, &model.config, &batch)?.item()? as f64 * count as f64;
        tokens += count;
    }
    Ok(total / tokens as f64)
}

/// Mutable training state; resumable from a checkpoint.
pub struct Trainer {
    pub model: Model<f32>,
    pub vocab: Vocab,
    pub optimizer: OptimizerState<f32>,
    pub config: TrainConfig,
    pub step: u64,
}

/// What ended a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stop {
    Completed,
    TargetLoss,
}

impl Trainer {
    pub fn new(model: Model<f32>, vocab: Vocab, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if vocab.len() != model.config.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} tokens, model expects {}",
                vocab.len(),
                model.config.vocab_size
            )));
        }
        Ok(Self {
            model,
            vocab,
            optimizer: OptimizerState::new(),
            config,
            step: 0,
        })
    }

    /// Continues from a saved run; the step counter and moments carry over.
    pub fn resume(checkpoint: Checkpoint, config: TrainConfig) -> Result<Self> {
        let step = checkpoint.step;
        let optimizer = checkpoint.optimizer.clone().unwrap_or_default();
        let (model, vocab) = checkpoint.into_model()?;
        optimizer.validate(&model.params)?;
        if step > config.total_steps {
            return Err(Error::Config(format!(
                "checkpoint step {step} beyond total_steps {}",
                config.total_steps
            )));
        }
        let mut trainer = Self::new(model, vocab, config)?;
        trainer.optimizer = optimizer;
        trainer.step = step;
        Ok(trainer)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.config.clone(),
            vocab: self.vocab.clone(),
            params: self.model.params.clone(),
            optimizer: Some(self.optimizer.clone()),
            step: self.step,
            seed: self.config.seed,
            train: Some(self.config.clone()),
        }
    }

    /// One optimizer step on the given batch; returns the batch loss.
    pub fn step_on(&mut self, batch: &[&Example]) -> Result<f64> {
        let step = self.step + 1;
        let lr = lr_at(step, &self.config)?;
        let mut grads = {
            let tape = Tape::new();
            let p = ParamBinding::trainable(&tape, &self.model.params);
            let loss = batch_loss(&p, &self.model.config, batch)?;
            let value = loss.item()? as f64;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("loss is {value} at step {step}")));
            }
            let grads = loss.backward()?.into_grad_map();
            (grads, value)
        };
        clip_grad_norm(&mut grads.0, self.config.grad_clip_norm)?;
        adamw_step(
            &mut self.model.params,
            &grads.0,
            &mut self.optimizer,
            lr,
            &AdamW::new(self.config.weight_decay),
        )?;
        if let Err(name) = self.model.params.all_finite() {
            return Err(Error::Numeric(format!(
                "parameter {name} became non-finite at step {step}"
            )));
        }
        self.step = step;
        Ok(grads.1)
    }

    /// Trains until `total_steps` (or the target loss), reporting every
    /// metric record and handing out periodic checkpoints.
    pub fn run(
        &mut self,
        train: &[Example],
        eval: &[Example],
        on_metric: &mut dyn FnMut(&MetricRecord) -> Result<()>,
        on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<()>,
    ) -> Result<Stop> {
        if train.is_empty() {
            return contract("training set is empty");
        }
        let mut order = BatchOrder {
            seed: self.config.seed,
            len: train.len(),
            epoch: None,
        };
        while self.step < self.config.total_steps {
            let indices = order.batch(self.step + 1, self.config.batch_size);
            let batch: Vec<&Example> = indices.iter().map(|&i| &train[i]).collect();
            let lr = lr_at(self.step + 1, &self.config)?;
            let loss = self.step_on(&batch)?;
            on_metric(&MetricRecord {
                step: self.step,
                split: Split::Train,
                loss,
                lr,
            })?;
            let every = |k: u64| k > 0 && self.step.is_multiple_of(k);
            if every(self.config.eval_every) && !eval.is_empty() {
                let loss = evaluate_loss(&self.model, eval, self.config.batch_size)?;
                on_metric(&MetricRecord {
                    step: self.step,
                    split: Split::Eval,
                    loss,
                    lr,
                })?;
            }
            if every(self.config.checkpoint_every) {
                on_checkpoint(&self.checkpoint())?;
            }
            if self.config.target_loss.is_some_and(|t| loss < t) {
                on_checkpoint(&self.checkpoint())?;
                return Ok(Stop::TargetLoss);
            }
        }
        on_checkpoint(&self.checkpoint())?;
        Ok(Stop::Completed)
    }
}
