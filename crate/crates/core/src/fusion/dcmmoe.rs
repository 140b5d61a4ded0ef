//! Directed cross-modal mixture-of-experts fusion.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{ModalityBundle, ModalityProjection};
use crate::numerics::nn::{CrossAttnLayer, Dense, Module, ParamTape, Parameter};
use crate::numerics::{Graph, NodeId, Tensor};

/// Architecture of the directed mixture of experts: every ordered pair of
/// distinct modalities gets its own cross-attention expert, and a linear
/// gate over the mean projected state soft-weights the experts per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DcmmoeConfig {
    /// Feature width of each modality stream, keyed by modality id.
    pub modality_dims: BTreeMap<String, usize>,
    /// Shared latent width.
    pub d_h: usize,
    /// Cross-attention layers per expert.
    pub expert_depth: usize,
    pub num_heads: usize,
    pub dropout_p: f64,
}

impl Default for DcmmoeConfig {
    fn default() -> Self {
        DcmmoeConfig {
            modality_dims: BTreeMap::new(),
            d_h: 256,
            expert_depth: 5,
            num_heads: 16,
            dropout_p: 0.1,
        }
    }
}

impl DcmmoeConfig {
    pub fn new(modality_dims: BTreeMap<String, usize>, d_h: usize) -> Self {
        DcmmoeConfig {
            modality_dims,
            d_h,
            ..DcmmoeConfig::default()
        }
    }

    pub fn num_modalities(&self) -> usize {
        self.modality_dims.len()
    }

    /// Ordered pairs of distinct modality ids in canonical order.
    pub fn expert_pairs(&self) -> Vec<(String, String)> {
        let ids: Vec<&String> = self.modality_dims.keys().collect();
        let mut pairs = Vec::with_capacity(ids.len() * ids.len().saturating_sub(1));
        for q in &ids {
            for k in &ids {
                if q != k {
                    pairs.push(((*q).clone(), (*k).clone()));
                }
            }
        }
        pairs
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_modalities() < 2 {
            return Err(Error::config(
                "mixture fusion needs at least two modalities (no experts otherwise)",
            ));
        }
        for (id, &d) in &self.modality_dims {
            if d == 0 {
                return Err(Error::config(format!("modality {id} has zero dim")));
            }
        }
        if self.d_h == 0 || self.expert_depth == 0 {
            return Err(Error::config("d_h and expert_depth must be positive"));
        }
        if self.num_heads == 0 || self.d_h % self.num_heads != 0 {
            return Err(Error::config(format!(
                "d_h {} not divisible by {} heads",
                self.d_h, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config(format!(
                "dropout_p {} outside [0, 1)",
                self.dropout_p
            )));
        }
        Ok(())
    }
}

/// One directed expert: a stack of cross-attention layers with a fixed
/// query modality and a fixed key/value modality.
struct Expert {
    query_id: String,
    context_id: String,
    layers: Vec<CrossAttnLayer>,
}

/// Intermediate nodes of one fusion forward pass; used by tests and
/// diagnostics.
pub struct DcmmoeTrace {
    /// Projected latents per modality, canonical order.
    pub latents: BTreeMap<String, NodeId>,
    /// One `[L x d_h]` output per expert, canonical pair order.
    pub expert_outputs: Vec<NodeId>,
    /// `[L x num_experts]` softmax gate weights.
    pub gate_weights: NodeId,
    /// `[L x d_h]` expert-weighted sum.
    pub fused: NodeId,
    /// `[L x 2]` valence/arousal.
    pub preds: NodeId,
}

/// Directed cross-modal mixture-of-experts fusion model.
pub struct Dcmmoe {
    pub cfg: DcmmoeConfig,
    projections: BTreeMap<String, ModalityProjection>,
    experts: Vec<Expert>,
    gate: Dense,
    head: Dense,
}

impl Dcmmoe {
    pub fn new(cfg: DcmmoeConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut projections = BTreeMap::new();
        for (id, &d_m) in &cfg.modality_dims {
            projections.insert(
                id.clone(),
                ModalityProjection::new(
                    &format!("moe.proj.{id}"),
                    d_m,
                    cfg.d_h,
                    cfg.dropout_p,
                    rng,
                ),
            );
        }
        let mut experts = Vec::new();
        for (q, k) in cfg.expert_pairs() {
            let layers = (0..cfg.expert_depth)
                .map(|i| {
                    CrossAttnLayer::new(
                        &format!("moe.expert.{q}->{k}.l{i}"),
                        cfg.d_h,
                        cfg.num_heads,
                        cfg.dropout_p,
                        rng,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            experts.push(Expert {
                query_id: q,
                context_id: k,
                layers,
            });
        }
        let num_experts = experts.len();
        Ok(Dcmmoe {
            gate: Dense::new("moe.gate", cfg.d_h, num_experts, rng),
            head: Dense::new("moe.head", cfg.d_h, 2, rng),
            cfg,
            projections,
            experts,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    /// Canonical `(query, context)` id pairs, one per expert.
    pub fn expert_ids(&self) -> Vec<(&str, &str)> {
        self.experts
            .iter()
            .map(|e| (e.query_id.as_str(), e.context_id.as_str()))
            .collect()
    }

    fn check_bundle(&self, bundle: &ModalityBundle) -> Result<()> {
        let want: Vec<&str> = self.cfg.modality_dims.keys().map(String::as_str).collect();
        let got = bundle.ids();
        if got != want {
            return Err(Error::shape(format!(
                "fusion expects modalities {want:?}, got {got:?}"
            )));
        }
        for (id, &d) in &self.cfg.modality_dims {
            let have = bundle.get(id).expect("id checked").features.cols();
            if have != d {
                return Err(Error::shape(format!(
                    "modality {id}: expected {d}-dim features, got {have}"
                )));
            }
        }
        Ok(())
    }

    pub fn forward_trace(
        &self,
        g: &mut Graph,
        tape: &mut ParamTape,
        bundle: &ModalityBundle,
    ) -> Result<DcmmoeTrace> {
        self.check_bundle(bundle)?;
        let frames = bundle.frames();

        let mut latents = BTreeMap::new();
        for stream in bundle.iter() {
            let x = g.leaf(stream.features.clone());
            let h = self.projections[&stream.id].forward(g, tape, x)?;
            latents.insert(stream.id.clone(), h);
        }

        // Mean projected state drives the gate, accumulated in canonical
        // modality order.
        let mut mean = None;
        for &h in latents.values() {
            mean = Some(match mean {
                None => h,
                Some(acc) => g.add(acc, h)?,
            });
        }
        let mean = g.affine(mean.expect("nonempty"), 1.0 / latents.len() as f64, 0.0);
        let logits = self.gate.forward(g, tape, mean)?;
        let gate_weights =
            g.masked_softmax(logits, Arc::new(vec![true; frames * self.experts.len()]))?;

        let mut expert_outputs = Vec::with_capacity(self.experts.len());
        for expert in &self.experts {
            let mut z = latents[&expert.query_id];
            let ctx = latents[&expert.context_id];
            for layer in &expert.layers {
                z = layer.forward(g, tape, z, ctx, None)?;
            }
            expert_outputs.push(z);
        }

        let mut fused = None;
        for (e, &z) in expert_outputs.iter().enumerate() {
            let w = g.slice_cols(gate_weights, e, e + 1)?;
            let weighted = g.mul_col(z, w)?;
            fused = Some(match fused {
                None => weighted,
                Some(acc) => g.add(acc, weighted)?,
            });
        }
        let fused = fused.expect("at least two experts");
        let preds = self.head.forward(g, tape, fused)?;
        Ok(DcmmoeTrace {
            latents,
            expert_outputs,
            gate_weights,
            fused,
            preds,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        tape: &mut ParamTape,
        bundle: &ModalityBundle,
    ) -> Result<NodeId> {
        self.forward_trace(g, tape, bundle).map(|t| t.preds)
    }

    /// Deterministic eval-mode predictions for one window.
    pub fn predict(&self, bundle: &ModalityBundle) -> Result<Tensor> {
        let mut g = Graph::eval();
        let mut tape = ParamTape::new();
        let out = self.forward(&mut g, &mut tape, bundle)?;
        Ok(g.value(out).clone())
    }
}

impl Module for Dcmmoe {
    fn params(&self) -> Vec<&Parameter> {
        let mut v = Vec::new();
        for p in self.projections.values() {
            v.extend(p.params());
        }
        for e in &self.experts {
            for l in &e.layers {
                v.extend(l.params());
            }
        }
        v.extend(self.gate.params());
        v.extend(self.head.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = Vec::new();
        for p in self.projections.values_mut() {
            v.extend(p.params_mut());
        }
        for e in &mut self.experts {
            for l in &mut e.layers {
                v.extend(l.params_mut());
            }
        }
        v.extend(self.gate.params_mut());
        v.extend(self.head.params_mut());
        v
    }
}
