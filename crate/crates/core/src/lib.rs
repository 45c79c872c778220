//! AudioInceptionNeXt in plain Rust: PCM audio in, class logits out.
//!
//! The crate bundles everything the pipeline needs — a small dense-tensor
//! engine with reverse-mode differentiation, a log-mel spectrogram frontend,
//! SpecAugment, the multi-scale separable-kernel CNN itself, an SGD trainer
//! with the usual audio-tagging metrics, a parameter/MAC profiler, and the
//! file formats (WAV in, AINXSPEC spectrograms and AINX1 checkpoints out).

pub mod augment;
pub mod config;
pub mod dsp;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod profile;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
