//! Portrait-conditioned expressive speech synthesis, desk scale.
//!
//! The pipeline: a frozen visual encoder turns a portrait into a 512-d
//! embedding; adapter modules split that embedding into an identity vector
//! and an emotion vector (kept apart by an adversarial gradient-reversed
//! classifier and a variational mutual-information penalty); their sum is
//! the control embedding injected into a compact flow-based TTS backbone.
//!
//! Everything runs offline and deterministically: the visual encoder, the
//! image-generation clients, and the speaker embedder all have seeded stub
//! implementations, so the full train/synthesize/evaluate loop is testable
//! on a laptop with no external models or services.

pub mod audio;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod disentangle;
pub mod error;
pub mod eval;
pub mod mi;
pub mod nn;
pub mod plot;
pub mod train;
pub mod tts;
pub mod visual;

pub use error::{Error, Result};
