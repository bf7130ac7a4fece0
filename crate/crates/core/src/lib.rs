//! Emotion-arc-conditioned image narrative generation.
//!
//! A multimodal transformer encoder reads region features of a scene
//! together with an emotion arc (begin, body and end emotions) and an
//! autoregressive decoder writes a five-sentence narrative whose segments
//! follow that arc. The crate carries everything needed to train and
//! evaluate it from scratch on CPU:
//!
//! - [`tensor`]: dense tensors with reverse-mode differentiation
//! - [`nn`]: attention, layer norm and transformer blocks
//! - [`emotion`]: taxonomy, lexicon classifier and arc extraction
//! - [`corpus`]: synthetic scenes and narratives, text normalization, vocabulary
//! - [`model`]: embeddings, encoder/decoder assembly, loss and decoding
//! - [`train`]: AdamW, learning-rate schedule, training loop and checkpoints
//! - [`eval`]: BLEU-4 and emotion accuracy metrics

pub mod corpus;
pub mod emotion;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{GradMap, ParamStore, Tape, Tensor};
