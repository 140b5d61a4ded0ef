//! Multimodal fusion over frame-aligned modality streams.
//!
//! Two strategies: a directed cross-modal mixture of experts
//! ([`Dcmmoe`]) that runs one cross-attention expert per ordered modality
//! pair under per-frame soft gating, and a reliability-aware audio-visual
//! model ([`Raav`]) that gates visual tokens per frame by masked scoring
//! and reads audio context through a small bottleneck of learned latents.
//!
//! Modalities are keyed by id strings and always processed in sorted-id
//! order, so results do not depend on the order streams are supplied in.

mod dcmmoe;
mod raav;

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::nn::{Dense, LayerNorm, Module, ParamTape, Parameter};
use crate::numerics::{Graph, NodeId, Tensor};

pub use dcmmoe::{Dcmmoe, DcmmoeConfig, DcmmoeTrace};
pub use raav::{Raav, RaavConfig, RaavTrace};

/// One frame-aligned feature stream with a per-frame validity mask.
#[derive(Debug, Clone)]
pub struct ModalityStream {
    pub id: String,
    /// `[frames x dim]` features.
    pub features: Tensor,
    /// One flag per frame; invalid frames carry placeholder features.
    pub valid: Vec<bool>,
}

impl ModalityStream {
    pub fn new(id: impl Into<String>, features: Tensor, valid: Vec<bool>) -> Self {
        ModalityStream {
            id: id.into(),
            features,
            valid,
        }
    }

    /// A stream whose frames are all valid.
    pub fn dense(id: impl Into<String>, features: Tensor) -> Self {
        let valid = vec![true; features.rows()];
        ModalityStream::new(id, features, valid)
    }
}

/// A window of frame-aligned modality streams, keyed and iterated in
/// sorted-id order regardless of how the streams were supplied.
#[derive(Debug, Clone)]
pub struct ModalityBundle {
    frames: usize,
    streams: BTreeMap<String, ModalityStream>,
}

impl ModalityBundle {
    pub fn new(streams: Vec<ModalityStream>) -> Result<Self> {
        let first = streams
            .first()
            .ok_or_else(|| Error::data("modality bundle: no streams"))?;
        let frames = first.features.rows();
        if frames == 0 {
            return Err(Error::data("modality bundle: zero-length window"));
        }
        let mut map = BTreeMap::new();
        for s in streams {
            if s.features.rows() != frames {
                return Err(Error::shape(format!(
                    "modality bundle: stream {} has {} frames, expected {frames}",
                    s.id,
                    s.features.rows()
                )));
            }
            if s.valid.len() != frames {
                return Err(Error::shape(format!(
                    "modality bundle: stream {} mask has {} entries for {frames} frames",
                    s.id,
                    s.valid.len()
                )));
            }
            if !s.features.all_finite() {
                return Err(Error::data(format!(
                    "modality bundle: stream {} has non-finite features",
                    s.id
                )));
            }
            let id = s.id.clone();
            if map.insert(id.clone(), s).is_some() {
                return Err(Error::data(format!("modality bundle: duplicate id {id}")));
            }
        }
        Ok(ModalityBundle {
            frames,
            streams: map,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn num_modalities(&self) -> usize {
        self.streams.len()
    }

    /// Modality ids in canonical (sorted) order.
    pub fn ids(&self) -> Vec<&str> {
        self.streams.keys().map(String::as_str).collect()
    }

    pub fn get(&self, id: &str) -> Option<&ModalityStream> {
        self.streams.get(id)
    }

    /// Streams in canonical (sorted-id) order.
    pub fn iter(&self) -> impl Iterator<Item = &ModalityStream> {
        self.streams.values()
    }
}

/// Projection block mapping one modality into the shared latent space:
/// dense -> layer norm -> dropout.
pub struct ModalityProjection {
    pub dense: Dense,
    pub norm: LayerNorm,
    pub dropout_p: f64,
}

impl ModalityProjection {
    pub fn new(name: &str, d_in: usize, d_h: usize, dropout_p: f64, rng: &mut ChaCha8Rng) -> Self {
        ModalityProjection {
            dense: Dense::new(&format!("{name}.dense"), d_in, d_h, rng),
            norm: LayerNorm::new(&format!("{name}.norm"), d_h),
            dropout_p,
        }
    }

    pub fn forward(&self, g: &mut Graph, tape: &mut ParamTape, x: NodeId) -> Result<NodeId> {
        let h = self.dense.forward(g, tape, x)?;
        let h = self.norm.forward(g, tape, h)?;
        Ok(g.dropout(h, self.dropout_p))
    }
}

impl Module for ModalityProjection {
    fn params(&self) -> Vec<&Parameter> {
        let mut v = self.dense.params();
        v.extend(self.norm.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.dense.params_mut();
        v.extend(self.norm.params_mut());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn bundle_orders_streams_canonically() {
        let mk = |id: &str| ModalityStream::dense(id, Tensor::zeros(3, 2));
        let a = ModalityBundle::new(vec![mk("face"), mk("audio"), mk("behavior")]).unwrap();
        let b = ModalityBundle::new(vec![mk("behavior"), mk("face"), mk("audio")]).unwrap();
        assert_eq!(a.ids(), vec!["audio", "behavior", "face"]);
        assert_eq!(a.ids(), b.ids());
        assert_eq!(a.frames(), 3);
        assert_eq!(a.num_modalities(), 3);
    }

    #[test]
    fn bundle_rejects_bad_streams() {
        let good = ModalityStream::dense("a", Tensor::zeros(3, 2));
        assert!(ModalityBundle::new(vec![]).is_err());
        assert!(ModalityBundle::new(vec![
            good.clone(),
            ModalityStream::dense("b", Tensor::zeros(4, 2)),
        ])
        .is_err());
        assert!(ModalityBundle::new(vec![
            good.clone(),
            ModalityStream::new("b", Tensor::zeros(3, 2), vec![true; 2]),
        ])
        .is_err());
        assert!(ModalityBundle::new(vec![good.clone(), good.clone()]).is_err());
        let mut bad = Tensor::zeros(3, 2);
        bad.set(1, 1, f64::NAN);
        assert!(ModalityBundle::new(vec![ModalityStream::dense("a", bad)]).is_err());
    }

    #[test]
    fn zeroed_projection_maps_everything_to_zero() {
        let mut r = rng(1);
        let mut p = ModalityProjection::new("p", 4, 6, 0.0, &mut r);
        p.dense.w.value.fill(0.0);
        p.dense.b.value.fill(0.0);
        let mut g = Graph::eval();
        let mut tape = ParamTape::new();
        let x = g.leaf(Tensor::rand_uniform(5, 4, 1.0, &mut r));
        let out = p.forward(&mut g, &mut tape, x).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn projection_eval_mode_is_deterministic() {
        let mut r = rng(2);
        let p = ModalityProjection::new("p", 4, 6, 0.5, &mut r);
        let x = Tensor::rand_uniform(5, 4, 1.0, &mut r);
        let run = || {
            let mut g = Graph::eval();
            let mut tape = ParamTape::new();
            let xid = g.leaf(x.clone());
            let out = p.forward(&mut g, &mut tape, xid).unwrap();
            g.value(out).clone()
        };
        assert_eq!(run().data(), run().data());
    }
}
