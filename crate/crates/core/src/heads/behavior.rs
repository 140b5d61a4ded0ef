//! Gated state-space regressor over behavior segment embeddings.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::nn::{Dense, Module, ParamTape, Parameter};
use crate::numerics::{Graph, NodeId, Tensor};

/// Architecture of the behavior head: an input projection, a stack of
/// causal state-space blocks, and a two-output regression head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BehaviorHeadConfig {
    /// Width of the frozen segment embeddings fed to the head.
    pub input_dim: usize,
    pub num_layers: usize,
    /// Channel count inside the state-space stack.
    pub hidden_dim: usize,
    /// State channels per feature channel in the recurrence.
    pub state_size: usize,
    /// Causal depthwise convolution width.
    pub kernel_size: usize,
    /// Width of the regression head's hidden layer.
    pub head_dim: usize,
    /// Segments per training window.
    pub window_len: usize,
    /// Step between window starts.
    pub stride: usize,
    pub dropout_p: f64,
}

impl Default for BehaviorHeadConfig {
    fn default() -> Self {
        BehaviorHeadConfig::visual(256)
    }
}

impl BehaviorHeadConfig {
    /// Preset tuned for visual-only segment embeddings.
    pub fn visual(input_dim: usize) -> Self {
        BehaviorHeadConfig {
            input_dim,
            num_layers: 4,
            hidden_dim: 128,
            state_size: 8,
            kernel_size: 3,
            head_dim: 512,
            window_len: 16,
            stride: 8,
            dropout_p: 0.2,
        }
    }

    /// Preset tuned for multimodal segment embeddings.
    pub fn multimodal(input_dim: usize) -> Self {
        BehaviorHeadConfig {
            num_layers: 12,
            hidden_dim: 256,
            kernel_size: 5,
            ..BehaviorHeadConfig::visual(input_dim)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0
            || self.num_layers == 0
            || self.hidden_dim == 0
            || self.state_size == 0
            || self.kernel_size == 0
            || self.head_dim == 0
        {
            return Err(Error::config("behavior head: all dims must be positive"));
        }
        if self.window_len == 0 || self.stride == 0 {
            return Err(Error::config(
                "behavior head: window_len and stride must be positive",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config(format!(
                "behavior head: dropout_p {} outside [0, 1)",
                self.dropout_p
            )));
        }
        Ok(())
    }
}

/// One causal sequence block over `[T x hidden]` inputs:
///
/// 1. depthwise causal convolution (zero left padding);
/// 2. diagonal linear recurrence per channel with `state_size` state
///    banks, decay `a = sigmoid(logits)` and an input-dependent sigmoid
///    drive gate;
/// 3. per-channel readout over the state banks;
/// 4. multiplicative sigmoid gate computed by a parallel dense branch
///    from the block input;
/// 5. residual add (with dropout on the branch in train mode).
///
/// Output at time `t` depends only on inputs at times `<= t`.
pub struct SsmBlock {
    pub conv_w: Parameter,
    pub conv_b: Parameter,
    /// Decay logits, `[hidden x state_size]`.
    pub decay: Parameter,
    /// Drive gate from the convolved signal.
    pub gate_in: Dense,
    /// Readout mix over state banks, `[hidden x state_size]`.
    pub readout: Parameter,
    /// Parallel branch producing the output gate.
    pub gate_out: Dense,
    dropout_p: f64,
}

impl SsmBlock {
    pub fn new(
        name: &str,
        hidden: usize,
        state: usize,
        kernel: usize,
        dropout_p: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        // Decay logits start in [0, 2] so a = sigmoid(logit) lands in
        // (0.5, 0.88): enough memory to be useful, bounded away from 1.
        let decay_init = Tensor::rand_uniform(hidden, state, 1.0, rng).map(|v| v + 1.0);
        SsmBlock {
            conv_w: Parameter::uniform(
                format!("{name}.conv.w"),
                kernel,
                hidden,
                (1.0 / kernel as f64).sqrt(),
                rng,
            ),
            conv_b: Parameter::zeros(format!("{name}.conv.b"), 1, hidden),
            decay: Parameter::new(format!("{name}.decay"), decay_init),
            gate_in: Dense::new(&format!("{name}.gate_in"), hidden, hidden, rng),
            readout: Parameter::uniform(
                format!("{name}.readout"),
                hidden,
                state,
                (1.0 / state as f64).sqrt(),
                rng,
            ),
            gate_out: Dense::new(&format!("{name}.gate_out"), hidden, hidden, rng),
            dropout_p,
        }
    }

    pub fn forward(&self, g: &mut Graph, tape: &mut ParamTape, x: NodeId) -> Result<NodeId> {
        let w = tape.bind(g, &self.conv_w);
        let b = tape.bind(g, &self.conv_b);
        let u = g.causal_conv1d(x, w, b)?;
        let drive_gate = self.gate_in.forward(g, tape, u)?;
        let drive_gate = g.sigmoid(drive_gate);
        let decay = tape.bind(g, &self.decay);
        let readout = tape.bind(g, &self.readout);
        let scanned = g.ssm_scan(decay, drive_gate, u, readout)?;
        let out_gate = self.gate_out.forward(g, tape, x)?;
        let out_gate = g.sigmoid(out_gate);
        let gated = g.mul(scanned, out_gate)?;
        let gated = g.dropout(gated, self.dropout_p);
        g.add(x, gated)
    }
}

impl Module for SsmBlock {
    fn params(&self) -> Vec<&Parameter> {
        let mut v = vec![&self.conv_w, &self.conv_b, &self.decay];
        v.extend(self.gate_in.params());
        v.push(&self.readout);
        v.extend(self.gate_out.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = vec![&mut self.conv_w, &mut self.conv_b, &mut self.decay];
        v.extend(self.gate_in.params_mut());
        v.push(&mut self.readout);
        v.extend(self.gate_out.params_mut());
        v
    }
}

/// Per-segment valence/arousal regressor: dense projection, `num_layers`
/// [`SsmBlock`]s, then dense -> GELU -> dropout -> dense to 2.
pub struct BehaviorHead {
    pub cfg: BehaviorHeadConfig,
    proj: Dense,
    blocks: Vec<SsmBlock>,
    head_fc: Dense,
    head_out: Dense,
}

impl BehaviorHead {
    pub fn new(name: &str, cfg: BehaviorHeadConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.num_layers)
            .map(|i| {
                SsmBlock::new(
                    &format!("{name}.block{i}"),
                    cfg.hidden_dim,
                    cfg.state_size,
                    cfg.kernel_size,
                    cfg.dropout_p,
                    rng,
                )
            })
            .collect();
        Ok(BehaviorHead {
            proj: Dense::new(&format!("{name}.proj"), cfg.input_dim, cfg.hidden_dim, rng),
            blocks,
            head_fc: Dense::new(&format!("{name}.head_fc"), cfg.hidden_dim, cfg.head_dim, rng),
            head_out: Dense::new(&format!("{name}.head_out"), cfg.head_dim, 2, rng),
            cfg,
        })
    }

    /// Stack latents (`window_len x hidden_dim`) and per-segment
    /// predictions (`window_len x 2`).
    pub fn forward_parts(
        &self,
        g: &mut Graph,
        tape: &mut ParamTape,
        window: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let shape = g.value(window).shape().to_vec();
        if shape != [self.cfg.window_len, self.cfg.input_dim] {
            return Err(Error::shape(format!(
                "behavior head expects [{} x {}] windows, got {shape:?}",
                self.cfg.window_len, self.cfg.input_dim
            )));
        }
        let x = self.proj.forward(g, tape, window)?;
        let mut x = g.dropout(x, self.cfg.dropout_p);
        for block in &self.blocks {
            x = block.forward(g, tape, x)?;
        }
        let h = self.head_fc.forward(g, tape, x)?;
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

impl Module for BehaviorHead {
    fn params(&self) -> Vec<&Parameter> {
        let mut v = self.proj.params();
        for block in &self.blocks {
            v.extend(block.params());
        }
        v.extend(self.head_fc.params());
        v.extend(self.head_out.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.proj.params_mut();
        for block in &mut self.blocks {
            v.extend(block.params_mut());
        }
        v.extend(self.head_fc.params_mut());
        v.extend(self.head_out.params_mut());
        v
    }
}
