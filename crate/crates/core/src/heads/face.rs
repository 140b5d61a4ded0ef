//! Transformer regressor over per-frame face embeddings.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::nn::{Dense, EncoderLayer, LayerNorm, Module, ParamTape, Parameter, PosEmbedding};
use crate::numerics::{Graph, NodeId, Tensor};

/// Architecture of the face head: a projection block, a stack of pre-norm
/// self-attention encoder layers with learned positional embeddings, and a
/// two-output regression head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FaceHeadConfig {
    /// Width of the frozen per-frame embeddings fed to the head.
    pub input_dim: usize,
    /// Latent width of the encoder stack.
    pub d_h: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Frames per training window.
    pub window_len: usize,
    /// Step between window starts.
    pub stride: usize,
    pub dropout_p: f64,
}

impl Default for FaceHeadConfig {
    fn default() -> Self {
        FaceHeadConfig {
            input_dim: 256,
            d_h: 256,
            num_layers: 5,
            num_heads: 16,
            window_len: 400,
            stride: 150,
            dropout_p: 0.1,
        }
    }
}

impl FaceHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.d_h == 0 || self.num_layers == 0 {
            return Err(Error::config("face head: dims and layer count must be positive"));
        }
        if self.num_heads == 0 || self.d_h % self.num_heads != 0 {
            return Err(Error::config(format!(
                "face head: d_h {} not divisible by {} heads",
                self.d_h, self.num_heads
            )));
        }
        if self.window_len == 0 || self.stride == 0 {
            return Err(Error::config("face head: window_len and stride must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config(format!(
                "face head: dropout_p {} outside [0, 1)",
                self.dropout_p
            )));
        }
        Ok(())
    }
}

/// Per-frame valence/arousal regressor: dense projection with layer norm
/// and dropout, learned positional embeddings, `num_layers` pre-norm
/// encoder layers, then dense -> layer norm -> GELU -> dropout -> dense.
pub struct FaceHead {
    pub cfg: FaceHeadConfig,
    proj: Dense,
    proj_norm: LayerNorm,
    pos: PosEmbedding,
    layers: Vec<EncoderLayer>,
    head_fc: Dense,
    head_norm: LayerNorm,
    head_out: Dense,
}

impl FaceHead {
    pub fn new(name: &str, cfg: FaceHeadConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.num_layers)
            .map(|i| {
                EncoderLayer::new(
                    &format!("{name}.enc{i}"),
                    cfg.d_h,
                    cfg.num_heads,
                    cfg.dropout_p,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FaceHead {
            proj: Dense::new(&format!("{name}.proj"), cfg.input_dim, cfg.d_h, rng),
            proj_norm: LayerNorm::new(&format!("{name}.proj_norm"), cfg.d_h),
            pos: PosEmbedding::new(&format!("{name}"), cfg.window_len, cfg.d_h, rng),
            layers,
            head_fc: Dense::new(&format!("{name}.head_fc"), cfg.d_h, cfg.d_h, rng),
            head_norm: LayerNorm::new(&format!("{name}.head_norm"), cfg.d_h),
            head_out: Dense::new(&format!("{name}.head_out"), cfg.d_h, 2, rng),
            cfg,
        })
    }

    /// Encoder latents (`window_len x d_h`) and per-frame predictions
    /// (`window_len x 2`).
    pub fn forward_parts(
        &self,
        g: &mut Graph,
        tape: &mut ParamTape,
        window: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let shape = g.value(window).shape().to_vec();
        if shape != [self.cfg.window_len, self.cfg.input_dim] {
            return Err(Error::shape(format!(
                "face head expects [{} x {}] windows, got {shape:?}",
                self.cfg.window_len, self.cfg.input_dim
            )));
        }
        let x = self.proj.forward(g, tape, window)?;
        let x = self.proj_norm.forward(g, tape, x)?;
        let x = g.dropout(x, self.cfg.dropout_p);
        let mut x = self.pos.forward(g, tape, x)?;
        for layer in &self.layers {
            x = layer.forward(g, tape, x, None)?;
        }
        let h = self.head_fc.forward(g, tape, x)?;
        let h = self.head_norm.forward(g, tape, h)?;
        let h = g.gelu(h);
        let h = g.dropout(h, self.cfg.dropout_p);
        let out = self.head_out.forward(g, tape, h)?;
        Ok((x, out))
    }

    pub fn forward(&self, g: &mut Graph, tape: &mut ParamTape, window: NodeId) -> Result<NodeId> {
        self.forward_parts(g, tape, window).map(|(_, out)| out)
    }

    /// Deterministic eval-mode predictions for one window.
    pub fn predict(&self, window: &Tensor) -> Result<Tensor> {
        let mut g = Graph::eval();
        let mut tape = ParamTape::new();
        let x = g.leaf(window.clone());
        let out = self.forward(&mut g, &mut tape, x)?;
        Ok(g.value(out).clone())
    }
}

impl Module for FaceHead {
    fn params(&self) -> Vec<&Parameter> {
        let mut v = self.proj.params();
        v.extend(self.proj_norm.params());
        v.extend(self.pos.params());
        for layer in &self.layers {
            v.extend(layer.params());
        }
        v.extend(self.head_fc.params());
        v.extend(self.head_norm.params());
        v.extend(self.head_out.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.proj.params_mut();
        v.extend(self.proj_norm.params_mut());
        v.extend(self.pos.params_mut());
        for layer in &mut self.layers {
            v.extend(layer.params_mut());
        }
        v.extend(self.head_fc.params_mut());
        v.extend(self.head_norm.params_mut());
        v.extend(self.head_out.params_mut());
        v
    }
}
