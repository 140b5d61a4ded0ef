//! Reliability-aware audio-visual fusion.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{ModalityBundle, ModalityProjection};
use crate::numerics::nn::{
    CrossAttnLayer, Dense, EncoderLayer, LayerNorm, Module, MultiHeadAttention, ParamTape,
    Parameter,
};
use crate::numerics::{Graph, NodeId, Tensor};

/// Architecture of the reliability-aware model: visual modalities are
/// gated per frame by masked scoring with learnable priors, audio enters
/// as window-level context through a small bank of learned bottleneck
/// latents, and a lightweight encoder regresses per-frame outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RaavConfig {
    /// Feature width of each visual modality stream, keyed by id.
    pub visual_dims: BTreeMap<String, usize>,
    /// Feature width of the raw per-window audio frames.
    pub audio_dim: usize,
    /// Shared latent width.
    pub d_h: usize,
    /// Learned bottleneck latents reading the audio window.
    pub num_bottleneck: usize,
    /// Self-attention layers over the fused sequence.
    pub encoder_layers: usize,
    pub num_heads: usize,
    pub dropout_p: f64,
}

impl Default for RaavConfig {
    fn default() -> Self {
        RaavConfig {
            visual_dims: BTreeMap::new(),
            audio_dim: 1024,
            d_h: 256,
            num_bottleneck: 8,
            encoder_layers: 2,
            num_heads: 4,
            dropout_p: 0.1,
        }
    }
}

impl RaavConfig {
    pub fn validate(&self) -> Result<()> {
        if self.visual_dims.is_empty() {
            return Err(Error::config("reliability fusion needs at least one visual modality"));
        }
        for (id, &d) in &self.visual_dims {
            if d == 0 {
                return Err(Error::config(format!("modality {id} has zero dim")));
            }
        }
        if self.audio_dim == 0 || self.d_h == 0 {
            return Err(Error::config("audio_dim and d_h must be positive"));
        }
        if self.num_bottleneck == 0 {
            return Err(Error::config("need at least one bottleneck latent"));
        }
        if self.encoder_layers == 0 {
            return Err(Error::config("need at least one encoder layer"));
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

/// Intermediate nodes of one forward pass; used by tests and diagnostics.
pub struct RaavTrace {
    /// Feature leaf per visual modality, canonical order.
    pub inputs: BTreeMap<String, NodeId>,
    /// `[L x M_v]` gate weights; invalid entries are exactly zero.
    pub alphas: NodeId,
    /// `[L x d_h]` gated visual tokens.
    pub z_vis: NodeId,
    /// `[L x d_h]` audio context added to the visual stream.
    pub audio_ctx: NodeId,
    /// `[L x d_h]` normalized fused sequence.
    pub z0: NodeId,
    /// `[L x 2]` valence/arousal.
    pub preds: NodeId,
    /// Frames with no valid visual modality; they produce a zero visual
    /// token and must be masked out of the loss by the caller.
    pub dropped_frames: Vec<bool>,
    /// True when no audio was supplied and the bottleneck fell back to
    /// the unattended latent seeds.
    pub audio_fallback: bool,
}

/// Reliability-aware audio-visual fusion model.
pub struct Raav {
    pub cfg: RaavConfig,
    projections: BTreeMap<String, ModalityProjection>,
    scorers: BTreeMap<String, Dense>,
    priors: BTreeMap<String, Parameter>,
    audio_proj: ModalityProjection,
    latents: Parameter,
    bottleneck_read: CrossAttnLayer,
    fuse_attn: MultiHeadAttention,
    fuse_norm: LayerNorm,
    encoder: Vec<EncoderLayer>,
    head: Dense,
}

impl Raav {
    pub fn new(cfg: RaavConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut projections = BTreeMap::new();
        let mut scorers = BTreeMap::new();
        let mut priors = BTreeMap::new();
        for (id, &d_m) in &cfg.visual_dims {
            projections.insert(
                id.clone(),
                ModalityProjection::new(&format!("raav.proj.{id}"), d_m, cfg.d_h, cfg.dropout_p, rng),
            );
            scorers.insert(
                id.clone(),
                Dense::new(&format!("raav.score.{id}"), cfg.d_h, 1, rng),
            );
            // Zero-initialized log prior: uniform until learned otherwise.
            priors.insert(id.clone(), Parameter::zeros(format!("raav.prior.{id}"), 1, 1));
        }
        let encoder = (0..cfg.encoder_layers)
            .map(|i| {
                EncoderLayer::new(&format!("raav.enc{i}"), cfg.d_h, cfg.num_heads, cfg.dropout_p, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Raav {
            audio_proj: ModalityProjection::new(
                "raav.audio_proj",
                cfg.audio_dim,
                cfg.d_h,
                cfg.dropout_p,
                rng,
            ),
            latents: Parameter::uniform("raav.latents", cfg.num_bottleneck, cfg.d_h, 0.1, rng),
            bottleneck_read: CrossAttnLayer::new(
                "raav.bottleneck",
                cfg.d_h,
                cfg.num_heads,
                cfg.dropout_p,
                rng,
            )?,
            fuse_attn: MultiHeadAttention::new("raav.fuse_attn", cfg.d_h, cfg.num_heads, rng)?,
            fuse_norm: LayerNorm::new("raav.fuse_norm", cfg.d_h),
            encoder,
            head: Dense::new("raav.head", cfg.d_h, 2, rng),
            cfg,
            projections,
            scorers,
            priors,
        })
    }

    fn check_bundle(&self, bundle: &ModalityBundle) -> Result<()> {
        let want: Vec<&str> = self.cfg.visual_dims.keys().map(String::as_str).collect();
        let got = bundle.ids();
        if got != want {
            return Err(Error::shape(format!(
                "fusion expects visual modalities {want:?}, got {got:?}"
            )));
        }
        for (id, &d) in &self.cfg.visual_dims {
            let have = bundle.get(id).expect("id checked").features.cols();
            if have != d {
                return Err(Error::shape(format!(
                    "modality {id}: expected {d}-dim features, got {have}"
                )));
            }
        }
        Ok(())
    }

    /// Masked reliability gating over the projected visual tokens.
    ///
    /// Returns the feature leaves, gate weights `[L x M_v]`, fused tokens
    /// `[L x d_h]`, and the all-invalid frame flags. With `lenient` false,
    /// a frame with no valid modality is an error; with `lenient` true its
    /// weights and token are exactly zero.
    fn gate_visual(
        &self,
        g: &mut Graph,
        tape: &mut ParamTape,
        bundle: &ModalityBundle,
        lenient: bool,
    ) -> Result<(BTreeMap<String, NodeId>, NodeId, NodeId, Vec<bool>)> {
        self.check_bundle(bundle)?;
        let frames = bundle.frames();
        let num_mods = bundle.num_modalities();

        let mut inputs = BTreeMap::new();
        let mut latents = Vec::with_capacity(num_mods);
        let mut scores = Vec::with_capacity(num_mods);
        for stream in bundle.iter() {
            let x = g.leaf(stream.features.clone());
            inputs.insert(stream.id.clone(), x);
            let h = self.projections[&stream.id].forward(g, tape, x)?;
            let s = self.scorers[&stream.id].forward(g, tape, h)?;
            let prior = tape.bind(g, &self.priors[&stream.id]);
            scores.push(g.add_row(s, prior)?);
            latents.push(h);
        }
        let score_mat = g.concat_cols(&scores)?;

        // Row-major (frame-major) validity of each (frame, modality) cell.
        let mut mask = Vec::with_capacity(frames * num_mods);
        let mut dropped = vec![false; frames];
        for l in 0..frames {
            let mut any = false;
            for stream in bundle.iter() {
                let v = stream.valid[l];
                any |= v;
                mask.push(v);
            }
            dropped[l] = !any;
        }
        let mask = std::sync::Arc::new(mask);
        let alphas = if lenient {
            g.masked_softmax_lenient(score_mat, mask)?
        } else {
            g.masked_softmax(score_mat, mask)?
        };

        let mut z_vis = None;
        for (m, &h) in latents.iter().enumerate() {
            let w = g.slice_cols(alphas, m, m + 1)?;
            let weighted = g.mul_col(h, w)?;
            z_vis = Some(match z_vis {
                None => weighted,
                Some(acc) => g.add(acc, weighted)?,
            });
        }
        Ok((inputs, alphas, z_vis.expect("nonempty bundle"), dropped))
    }

    /// Standalone reliability gate: errors if any frame has no valid
    /// visual modality (callers that tolerate such frames use the full
    /// forward, which zeroes them and flags them for loss masking).
    pub fn visual_gate(
        &self,
        g: &mut Graph,
        tape: &mut ParamTape,
        bundle: &ModalityBundle,
    ) -> Result<(NodeId, NodeId)> {
        let (_, alphas, z_vis, _) = self.gate_visual(g, tape, bundle, false)?;
        Ok((alphas, z_vis))
    }

    fn encode_and_regress(
        &self,
        g: &mut Graph,
        tape: &mut ParamTape,
        z0: NodeId,
    ) -> Result<NodeId> {
        let mut x = z0;
        for layer in &self.encoder {
            x = layer.forward(g, tape, x, None)?;
        }
        self.head.forward(g, tape, x)
    }

    pub fn forward_trace(
        &self,
        g: &mut Graph,
        tape: &mut ParamTape,
        bundle: &ModalityBundle,
        audio: Option<&Tensor>,
    ) -> Result<RaavTrace> {
        let (inputs, alphas, z_vis, dropped_frames) = self.gate_visual(g, tape, bundle, true)?;

        let seeds = tape.bind(g, &self.latents);
        let (b_a, audio_fallback) = match audio {
            Some(a) if a.rows() > 0 => {
                if a.cols() != self.cfg.audio_dim {
                    return Err(Error::shape(format!(
                        "audio window: expected {}-dim frames, got {}",
                        self.cfg.audio_dim,
                        a.cols()
                    )));
                }
                if !a.all_finite() {
                    return Err(Error::data("audio window has non-finite features"));
                }
                let ax = g.leaf(a.clone());
                let pa = self.audio_proj.forward(g, tape, ax)?;
                (self.bottleneck_read.forward(g, tape, seeds, pa, None)?, false)
            }
            _ => (seeds, true),
        };

        let audio_ctx = self.fuse_attn.forward(g, tape, z_vis, b_a, None)?;
        let fused = g.add(z_vis, audio_ctx)?;
        let z0 = self.fuse_norm.forward(g, tape, fused)?;
        let preds = self.encode_and_regress(g, tape, z0)?;
        Ok(RaavTrace {
            inputs,
            alphas,
            z_vis,
            audio_ctx,
            z0,
            preds,
            dropped_frames,
            audio_fallback,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        tape: &mut ParamTape,
        bundle: &ModalityBundle,
        audio: Option<&Tensor>,
    ) -> Result<NodeId> {
        self.forward_trace(g, tape, bundle, audio).map(|t| t.preds)
    }

    /// Ablation path with the audio branch removed entirely:
    /// `z0 = layer_norm(z_vis)`, then the same encoder and head.
    pub fn forward_visual_only(
        &self,
        g: &mut Graph,
        tape: &mut ParamTape,
        bundle: &ModalityBundle,
    ) -> Result<NodeId> {
        let (_, _, z_vis, _) = self.gate_visual(g, tape, bundle, true)?;
        let z0 = self.fuse_norm.forward(g, tape, z_vis)?;
        self.encode_and_regress(g, tape, z0)
    }

    /// Deterministic eval-mode predictions for one window.
    pub fn predict(&self, bundle: &ModalityBundle, audio: Option<&Tensor>) -> Result<Tensor> {
        let mut g = Graph::eval();
        let mut tape = ParamTape::new();
        let out = self.forward(&mut g, &mut tape, bundle, audio)?;
        Ok(g.value(out).clone())
    }

    /// Zero the output projection of the audio cross-attention, severing
    /// the audio path: forward then equals the visual-only ablation.
    pub fn sever_audio_path(&mut self) {
        self.fuse_attn.wo.w.value.fill(0.0);
        self.fuse_attn.wo.b.value.fill(0.0);
    }
}

impl Module for Raav {
    fn params(&self) -> Vec<&Parameter> {
        let mut v = Vec::new();
        for p in self.projections.values() {
            v.extend(p.params());
        }
        for s in self.scorers.values() {
            v.extend(s.params());
        }
        for p in self.priors.values() {
            v.push(p);
        }
        v.extend(self.audio_proj.params());
        v.push(&self.latents);
        v.extend(self.bottleneck_read.params());
        v.extend(self.fuse_attn.params());
        v.extend(self.fuse_norm.params());
        for l in &self.encoder {
            v.extend(l.params());
        }
        v.extend(self.head.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = Vec::new();
        for p in self.projections.values_mut() {
            v.extend(p.params_mut());
        }
        for s in self.scorers.values_mut() {
            v.extend(s.params_mut());
        }
        for p in self.priors.values_mut() {
            v.push(p);
        }
        v.extend(self.audio_proj.params_mut());
        v.push(&mut self.latents);
        v.extend(self.bottleneck_read.params_mut());
        v.extend(self.fuse_attn.params_mut());
        v.extend(self.fuse_norm.params_mut());
        for l in &mut self.encoder {
            v.extend(l.params_mut());
        }
        v.extend(self.head.params_mut());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::ModalityStream;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn tiny_cfg() -> RaavConfig {
        RaavConfig {
            visual_dims: [("behavior".to_string(), 4), ("face".to_string(), 5)]
                .into_iter()
                .collect(),
            audio_dim: 3,
            d_h: 8,
            num_bottleneck: 2,
            encoder_layers: 1,
            num_heads: 2,
            dropout_p: 0.1,
        }
    }

    fn tiny_model(seed: u64) -> Raav {
        Raav::new(tiny_cfg(), &mut rng(seed)).unwrap()
    }

    fn bundle_with_masks(
        seed: u64,
        frames: usize,
        face_valid: Vec<bool>,
        behavior_valid: Vec<bool>,
    ) -> ModalityBundle {
        let mut r = rng(seed);
        ModalityBundle::new(vec![
            ModalityStream::new(
                "face",
                Tensor::rand_uniform(frames, 5, 1.0, &mut r),
                face_valid,
            ),
            ModalityStream::new(
                "behavior",
                Tensor::rand_uniform(frames, 4, 1.0, &mut r),
                behavior_valid,
            ),
        ])
        .unwrap()
    }

    fn dense_bundle(seed: u64, frames: usize) -> ModalityBundle {
        bundle_with_masks(seed, frames, vec![true; frames], vec![true; frames])
    }

    fn audio(seed: u64, frames: usize) -> Tensor {
        Tensor::rand_uniform(frames, 3, 1.0, &mut rng(seed))
    }

    #[test]
    fn output_is_one_pair_per_frame() {
        let model = tiny_model(1);
        let out = model
            .predict(&dense_bundle(2, 6), Some(&audio(3, 9)))
            .unwrap();
        assert_eq!(out.shape(), &[6, 2]);
        assert!(out.all_finite());
    }

    #[test]
    fn sole_valid_modality_takes_all_weight() {
        let model = tiny_model(4);
        // behavior invalid on frame 1, face invalid on frame 2.
        let bundle = bundle_with_masks(
            5,
            3,
            vec![true, true, false],
            vec![true, false, true],
        );
        let mut g = Graph::eval();
        let mut tape = ParamTape::new();
        let trace = model
            .forward_trace(&mut g, &mut tape, &bundle, None)
            .unwrap();
        let a = g.value(trace.alphas);
        // Columns are canonical: 0 = behavior, 1 = face.
        assert_eq!(a.at(1, 0), 0.0);
        assert_eq!(a.at(1, 1), 1.0);
        assert_eq!(a.at(2, 1), 0.0);
        assert_eq!(a.at(2, 0), 1.0);
        assert!(!trace.dropped_frames.iter().any(|&d| d));
    }

    #[test]
    fn identical_tokens_and_scorers_split_weight_evenly() {
        // Same features for both modalities and parameter sets copied
        // across: by symmetry each side must get exactly half.
        let cfg = RaavConfig {
            visual_dims: [("a".to_string(), 4), ("b".to_string(), 4)]
                .into_iter()
                .collect(),
            ..tiny_cfg()
        };
        let mut model = Raav::new(cfg, &mut rng(6)).unwrap();
        let from_a: Vec<Tensor> = model.projections["a"]
            .params()
            .into_iter()
            .chain(model.scorers["a"].params())
            .map(|p| p.value.clone())
            .collect();
        let dst: Vec<&mut Parameter> = model
            .projections
            .get_mut("b")
            .unwrap()
            .params_mut()
            .into_iter()
            .collect();
        for (d, s) in dst.into_iter().zip(&from_a[..4]) {
            d.value = s.clone();
        }
        for (d, s) in model
            .scorers
            .get_mut("b")
            .unwrap()
            .params_mut()
            .into_iter()
            .zip(&from_a[4..])
        {
            d.value = s.clone();
        }

        let feats = Tensor::rand_uniform(4, 4, 1.0, &mut rng(7));
        let bundle = ModalityBundle::new(vec![
            ModalityStream::dense("a", feats.clone()),
            ModalityStream::dense("b", feats),
        ])
        .unwrap();
        let mut g = Graph::eval();
        let mut tape = ParamTape::new();
        let trace = model
            .forward_trace(&mut g, &mut tape, &bundle, None)
            .unwrap();
        assert!(g.value(trace.alphas).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn all_invalid_frame_is_zeroed_and_flagged() {
        let model = tiny_model(8);
        let bundle = bundle_with_masks(
            9,
            3,
            vec![true, false, true],
            vec![true, false, true],
        );
        let mut g = Graph::eval();
        let mut tape = ParamTape::new();
        let trace = model
            .forward_trace(&mut g, &mut tape, &bundle, Some(&audio(10, 6)))
            .unwrap();
        assert_eq!(trace.dropped_frames, vec![false, true, false]);
        let a = g.value(trace.alphas);
        assert_eq!(a.row(1), &[0.0, 0.0]);
        let z = g.value(trace.z_vis);
        assert!(z.row(1).iter().all(|&v| v == 0.0));
        assert!(g.value(trace.preds).all_finite());
    }

    #[test]
    fn strict_gate_rejects_all_invalid_frames() {
        let model = tiny_model(11);
        let bundle = bundle_with_masks(12, 2, vec![true, false], vec![true, false]);
        let mut g = Graph::eval();
        let mut tape = ParamTape::new();
        let err = model.visual_gate(&mut g, &mut tape, &bundle);
        assert!(err.is_err());

        let ok_bundle = dense_bundle(13, 2);
        let mut g2 = Graph::eval();
        let mut tape2 = ParamTape::new();
        assert!(model.visual_gate(&mut g2, &mut tape2, &ok_bundle).is_ok());
    }

    #[test]
    fn invalid_modality_gets_zero_weight_and_zero_gradient() {
        let model = tiny_model(14);
        let bundle = bundle_with_masks(
            15,
            4,
            vec![true; 4],
            vec![true, false, false, true],
        );
        let mut g = Graph::eval();
        let mut tape = ParamTape::new();
        let trace = model
            .forward_trace(&mut g, &mut tape, &bundle, Some(&audio(16, 5)))
            .unwrap();
        let loss = g.sum_all(trace.preds);
        g.backward(loss).unwrap();

        let a = g.value(trace.alphas);
        assert_eq!(a.at(1, 0), 0.0);
        assert_eq!(a.at(2, 0), 0.0);
        let grad = g.grad(trace.inputs["behavior"]);
        assert!(grad.row(1).iter().all(|&v| v == 0.0), "{:?}", grad.row(1));
        assert!(grad.row(2).iter().all(|&v| v == 0.0));
        // Valid frames of the same stream do receive gradient.
        assert!(grad.row(0).iter().any(|&v| v != 0.0));
        assert!(grad.row(3).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn zeroed_audio_projection_matches_visual_only_ablation() {
        let mut model = tiny_model(17);
        model.sever_audio_path();
        let bundle = bundle_with_masks(18, 5, vec![true; 5], {
            let mut v = vec![true; 5];
            v[2] = false;
            v
        });
        let with_audio = model.predict(&bundle, Some(&audio(19, 7))).unwrap();

        let mut g = Graph::eval();
        let mut tape = ParamTape::new();
        let ablated = model.forward_visual_only(&mut g, &mut tape, &bundle).unwrap();
        assert_eq!(with_audio.data(), g.value(ablated).data());
    }

    #[test]
    fn missing_audio_falls_back_to_latent_seeds() {
        let model = tiny_model(20);
        let bundle = dense_bundle(21, 4);
        let mut g = Graph::eval();
        let mut tape = ParamTape::new();
        let trace = model
            .forward_trace(&mut g, &mut tape, &bundle, None)
            .unwrap();
        assert!(trace.audio_fallback);
        assert!(g.value(trace.preds).all_finite());

        let mut g2 = Graph::eval();
        let mut tape2 = ParamTape::new();
        let with = model
            .forward_trace(&mut g2, &mut tape2, &bundle, Some(&audio(22, 6)))
            .unwrap();
        assert!(!with.audio_fallback);
    }

    #[test]
    fn single_bottleneck_gives_every_frame_the_same_context() {
        let cfg = RaavConfig {
            num_bottleneck: 1,
            ..tiny_cfg()
        };
        let model = Raav::new(cfg, &mut rng(23)).unwrap();
        let bundle = dense_bundle(24, 5);
        let mut g = Graph::eval();
        let mut tape = ParamTape::new();
        let trace = model
            .forward_trace(&mut g, &mut tape, &bundle, Some(&audio(25, 8)))
            .unwrap();
        let ctx = g.value(trace.audio_ctx);
        for row in 1..5 {
            assert_eq!(ctx.row(row), ctx.row(0));
        }
    }

    #[test]
    fn eval_deterministic_and_train_seeded() {
        let model = tiny_model(26);
        let bundle = dense_bundle(27, 4);
        let a = audio(28, 6);
        assert_eq!(
            model.predict(&bundle, Some(&a)).unwrap().data(),
            model.predict(&bundle, Some(&a)).unwrap().data()
        );
        let run = |seed: u64| {
            let mut g = Graph::train(seed);
            let mut tape = ParamTape::new();
            let out = model.forward(&mut g, &mut tape, &bundle, Some(&a)).unwrap();
            g.value(out).clone()
        };
        assert_eq!(run(1).data(), run(1).data());
        assert_ne!(run(1).data(), run(2).data());
    }

    #[test]
    fn config_is_validated() {
        assert!(Raav::new(RaavConfig::default(), &mut rng(0)).is_err()); // empty visual set
        assert!(Raav::new(
            RaavConfig {
                num_bottleneck: 0,
                ..tiny_cfg()
            },
            &mut rng(0)
        )
        .is_err());
        assert!(Raav::new(
            RaavConfig {
                d_h: 10,
                num_heads: 4,
                ..tiny_cfg()
            },
            &mut rng(0)
        )
        .is_err());
    }

    #[test]
    fn mismatched_audio_width_is_rejected() {
        let model = tiny_model(29);
        let bundle = dense_bundle(30, 3);
        let bad = Tensor::zeros(4, 5);
        assert!(model.predict(&bundle, Some(&bad)).is_err());
    }
}
