//! Deterministic CPU pipeline for continuous valence/arousal regression
//! on top of frozen per-modality feature streams: differentiable numerics,
//! window/alignment data handling, per-modality temporal heads, multimodal
//! fusion, speech-presence filtering, and a reproducible trainer.

pub mod dataio;
pub mod error;
pub mod filter;
pub mod fusion;
pub mod heads;
pub mod metrics;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
