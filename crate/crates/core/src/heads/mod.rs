//! Unimodal temporal regression heads.
//!
//! Three architectures cover the three feature families: a transformer
//! encoder over per-frame face embeddings, a gated state-space stack over
//! behavior segment embeddings, and chunk-wise attention-statistics
//! pooling over acoustic frames. Each head emits one (valence, arousal)
//! pair per time step and trains against
//! [`hybrid_loss`](crate::metrics::hybrid_loss); `forward_parts` also
//! exposes the penultimate latents so fusion models can consume head
//! embeddings instead of raw backbone features.

mod audio;
mod behavior;
mod face;

pub use audio::{AttentionStatsPool, AudioHead, AudioHeadConfig, POOL_VAR_EPS};
pub use behavior::{BehaviorHead, BehaviorHeadConfig, SsmBlock};
pub use face::{FaceHead, FaceHeadConfig};
