//! Command-line pipeline for multimodal valence/arousal regression:
//! synthetic corpus generation, training, evaluation, prediction export,
//! and speech-presence filtering of audio segments.

pub mod commands;
pub mod config;
pub mod synth;

pub use commands::exit_code;
