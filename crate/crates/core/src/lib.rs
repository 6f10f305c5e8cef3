//! Contextual spoken language understanding with role-split dialogue
//! history and time- and content-aware attention.
//!
//! Each utterance is labelled with a set of speech-act/attribute labels. The
//! current utterance is encoded by a BLSTM whose inputs are conditioned on a
//! summary of earlier utterances; the summary is built by per-role history
//! encoders and weighted by learned (content) or fixed (time) attention at
//! the sentence level, the role level, or both.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common choices.

pub mod autograd;
pub mod checkpoint;
pub mod context;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = autograd::Tensor<f64>;
pub type Tensor32 = autograd::Tensor<f32>;
pub type Tape64 = autograd::Tape<f64>;
pub type Tape32 = autograd::Tape<f32>;
pub type Model64 = model::Model<f64>;
pub type Model32 = model::Model<f32>;
pub type Checkpoint64 = checkpoint::Checkpoint<f64>;
pub type Checkpoint32 = checkpoint::Checkpoint<f32>;
