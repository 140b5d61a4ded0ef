//! Trainable parameters and reusable network blocks on top of [`Graph`].
//!
//! Parameters live outside any graph; a [`ParamTape`] binds them into a
//! graph as leaves (once per unique name, so shared modules accumulate
//! correctly) and copies gradients back after `backward`.

use std::collections::BTreeMap;
use std::sync::Arc;


use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros_like(&value);
        Parameter {
            name: name.into(),
            value,
            grad,
        }
    }

    /// Xavier/Glorot uniform init for a `[d_in x d_out]` weight.
    pub fn xavier(name: impl Into<String>, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (d_in + d_out) as f64).sqrt();
        Parameter::new(name, Tensor::rand_uniform(d_in, d_out, limit, rng))
    }

    pub fn uniform(
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        limit: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Parameter::new(name, Tensor::rand_uniform(rows, cols, limit, rng))
    }

    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Parameter::new(name, Tensor::zeros(rows, cols))
    }

    pub fn ones(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Parameter::new(name, Tensor::full(rows, cols, 1.0))
    }

    pub fn full(name: impl Into<String>, rows: usize, cols: usize, v: f64) -> Self {
        Parameter::new(name, Tensor::full(rows, cols, v))
    }
}

/// Name-keyed binding of parameters into one graph. Binding the same
/// parameter twice returns the same node, so gradients from every use
/// site accumulate on a single leaf.
#[derive(Default)]
pub struct ParamTape {
    nodes: BTreeMap<String, NodeId>,
}

impl ParamTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, g: &mut Graph, p: &Parameter) -> NodeId {
        if let Some(&id) = self.nodes.get(&p.name) {
            return id;
        }
        let id = g.leaf(p.value.clone());
        self.nodes.insert(p.name.clone(), id);
        id
    }

    pub fn node(&self, name: &str) -> Option<NodeId> {
        self.nodes.get(name).copied()
    }
}

/// Anything with named trainable parameters.
pub trait Module {
    fn params(&self) -> Vec<&Parameter>;
    fn params_mut(&mut self) -> Vec<&mut Parameter>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.grad.fill(0.0);
        }
    }

    /// After `Graph::backward`, add each bound parameter's graph gradient
    /// into its `grad` buffer (so minibatch losses can accumulate).
    fn accumulate_grads(&mut self, g: &Graph, tape: &ParamTape) {
        for p in self.params_mut() {
            if let Some(id) = tape.node(&p.name) {
                p.grad.add_assign(g.grad(id));
            }
        }
    }
}

/// A plain bag of parameters; used where the "model" under test is just a
/// set of tensors (e.g. gradient checks that include inputs).
pub struct ParamSet(pub Vec<Parameter>);

impl Module for ParamSet {
    fn params(&self) -> Vec<&Parameter> {
        self.0.iter().collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.0.iter_mut().collect()
    }
}

pub struct Dense {
    pub w: Parameter,
    pub b: Parameter,
}

impl Dense {
    pub fn new(name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Dense {
            w: Parameter::xavier(format!("{name}.w"), d_in, d_out, rng),
            b: Parameter::zeros(format!("{name}.b"), 1, d_out),
        }
    }

    pub fn forward(&self, g: &mut Graph, tape: &mut ParamTape, x: NodeId) -> Result<NodeId> {
        let w = tape.bind(g, &self.w);
        let b = tape.bind(g, &self.b);
        let xw = g.matmul(x, w)?;
        g.add_row(xw, b)
    }
}

impl Module for Dense {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.w, &self.b]
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.w, &mut self.b]
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub struct LayerNorm {
    pub gamma: Parameter,
    pub beta: Parameter,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: Parameter::ones(format!("{name}.gamma"), 1, dim),
            beta: Parameter::zeros(format!("{name}.beta"), 1, dim),
            eps: LAYER_NORM_EPS,
        }
    }

    pub fn forward(&self, g: &mut Graph, tape: &mut ParamTape, x: NodeId) -> Result<NodeId> {
        let gamma = tape.bind(g, &self.gamma);
        let beta = tape.bind(g, &self.beta);
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

impl Module for LayerNorm {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.gamma, &self.beta]
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// Scaled dot-product multi-head attention with per-key masking.
/// Queries and keys/values may come from different sequences
/// (cross-attention); self-attention passes the same node twice.
pub struct MultiHeadAttention {
    pub wq: Dense,
    /// Weight only: a key bias shifts all scores of a query by the same
    /// amount and cancels in softmax, so it would be a dead parameter.
    pub wk: Parameter,
    pub wv: Dense,
    pub wo: Dense,
    pub n_heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new(name: &str, d_model: usize, n_heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(Error::config(format!(
                "attention: d_model {d_model} not divisible by {n_heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            wq: Dense::new(&format!("{name}.wq"), d_model, d_model, rng),
            wk: Parameter::xavier(format!("{name}.wk.w"), d_model, d_model, rng),
            wv: Dense::new(&format!("{name}.wv"), d_model, d_model, rng),
            wo: Dense::new(&format!("{name}.wo"), d_model, d_model, rng),
            n_heads,
            d_model,
        })
    }

    /// `queries [Lq x d]`, `context [Lk x d]`, optional key validity mask of
    /// length `Lk`. Masked keys receive exactly zero attention; a fully
    /// masked context is an error.
    pub fn forward(
        &self,
        g: &mut Graph,
        tape: &mut ParamTape,
        queries: NodeId,
        context: NodeId,
        key_mask: Option<&[bool]>,
    ) -> Result<NodeId> {
        let lq = g.value(queries).rows();
        let lk = g.value(context).rows();
        if let Some(m) = key_mask {
            if m.len() != lk {
                return Err(Error::shape(format!(
                    "attention: key mask has {} entries for {lk} keys",
                    m.len()
                )));
            }
        }
        let q = self.wq.forward(g, tape, queries)?;
        let wk = tape.bind(g, &self.wk);
        let k = g.matmul(context, wk)?;
        let v = self.wv.forward(g, tape, context)?;
        let d_head = self.d_model / self.n_heads;
        let scale = 1.0 / (d_head as f64).sqrt();

        let row_mask: Arc<Vec<bool>> = Arc::new(match key_mask {
            Some(m) => (0..lq).flat_map(|_| m.iter().copied()).collect(),
            None => vec![true; lq * lk],
        });

        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let from = h * d_head;
            let to = from + d_head;
            let qh = g.slice_cols(q, from, to)?;
            let kh = g.slice_cols(k, from, to)?;
            let vh = g.slice_cols(v, from, to)?;
            let kht = g.transpose(kh);
            let scores = g.matmul(qh, kht)?;
            let scaled = g.scale(scores, scale);
            let attn = g.masked_softmax(scaled, Arc::clone(&row_mask))?;
            heads.push(g.matmul(attn, vh)?);
        }
        let cat = g.concat_cols(&heads)?;
        self.wo.forward(g, tape, cat)
    }
}

impl Module for MultiHeadAttention {
    fn params(&self) -> Vec<&Parameter> {
        let mut v = self.wq.params();
        v.push(&self.wk);
        v.extend(self.wv.params());
        v.extend(self.wo.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.wq.params_mut();
        v.push(&mut self.wk);
        v.extend(self.wv.params_mut());
        v.extend(self.wo.params_mut());
        v
    }
}

/// Pre-norm transformer encoder layer:
/// `x + Drop(Attn(LN(x)))`, then `h + Drop(FFN(LN(h)))` with a GELU MLP
/// whose hidden width is `4 * d_model`.
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff1: Dense,
    pub ff2: Dense,
    pub dropout: f64,
}

impl EncoderLayer {
    pub fn new(
        name: &str,
        d_model: usize,
        n_heads: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(EncoderLayer {
            ln1: LayerNorm::new(&format!("{name}.ln1"), d_model),
            attn: MultiHeadAttention::new(&format!("{name}.attn"), d_model, n_heads, rng)?,
            ln2: LayerNorm::new(&format!("{name}.ln2"), d_model),
            ff1: Dense::new(&format!("{name}.ff1"), d_model, 4 * d_model, rng),
            ff2: Dense::new(&format!("{name}.ff2"), 4 * d_model, d_model, rng),
            dropout,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        tape: &mut ParamTape,
        x: NodeId,
        key_mask: Option<&[bool]>,
    ) -> Result<NodeId> {
        let n1 = self.ln1.forward(g, tape, x)?;
        let a = self.attn.forward(g, tape, n1, n1, key_mask)?;
        let a = g.dropout(a, self.dropout);
        let h = g.add(x, a)?;
        let n2 = self.ln2.forward(g, tape, h)?;
        let f = self.ff1.forward(g, tape, n2)?;
        let f = g.gelu(f);
        let f = self.ff2.forward(g, tape, f)?;
        let f = g.dropout(f, self.dropout);
        g.add(h, f)
    }
}

impl Module for EncoderLayer {
    fn params(&self) -> Vec<&Parameter> {
        let mut v = self.ln1.params();
        v.extend(self.attn.params());
        v.extend(self.ln2.params());
        v.extend(self.ff1.params());
        v.extend(self.ff2.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.ln1.params_mut();
        v.extend(self.attn.params_mut());
        v.extend(self.ln2.params_mut());
        v.extend(self.ff1.params_mut());
        v.extend(self.ff2.params_mut());
        v
    }
}

/// Pre-norm cross-attention layer: queries attend to a separate context,
/// followed by the same FFN sublayer as [`EncoderLayer`].
pub struct CrossAttnLayer {
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff1: Dense,
    pub ff2: Dense,
    pub dropout: f64,
}

impl CrossAttnLayer {
    pub fn new(
        name: &str,
        d_model: usize,
        n_heads: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(CrossAttnLayer {
            ln_q: LayerNorm::new(&format!("{name}.ln_q"), d_model),
            ln_kv: LayerNorm::new(&format!("{name}.ln_kv"), d_model),
            attn: MultiHeadAttention::new(&format!("{name}.attn"), d_model, n_heads, rng)?,
            ln2: LayerNorm::new(&format!("{name}.ln2"), d_model),
            ff1: Dense::new(&format!("{name}.ff1"), d_model, 4 * d_model, rng),
            ff2: Dense::new(&format!("{name}.ff2"), 4 * d_model, d_model, rng),
            dropout,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        tape: &mut ParamTape,
        queries: NodeId,
        context: NodeId,
        key_mask: Option<&[bool]>,
    ) -> Result<NodeId> {
        let nq = self.ln_q.forward(g, tape, queries)?;
        let nkv = self.ln_kv.forward(g, tape, context)?;
        let a = self.attn.forward(g, tape, nq, nkv, key_mask)?;
        let a = g.dropout(a, self.dropout);
        let h = g.add(queries, a)?;
        let n2 = self.ln2.forward(g, tape, h)?;
        let f = self.ff1.forward(g, tape, n2)?;
        let f = g.gelu(f);
        let f = self.ff2.forward(g, tape, f)?;
        let f = g.dropout(f, self.dropout);
        g.add(h, f)
    }
}

impl Module for CrossAttnLayer {
    fn params(&self) -> Vec<&Parameter> {
        let mut v = self.ln_q.params();
        v.extend(self.ln_kv.params());
        v.extend(self.attn.params());
        v.extend(self.ln2.params());
        v.extend(self.ff1.params());
        v.extend(self.ff2.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.ln_q.params_mut();
        v.extend(self.ln_kv.params_mut());
        v.extend(self.attn.params_mut());
        v.extend(self.ln2.params_mut());
        v.extend(self.ff1.params_mut());
        v.extend(self.ff2.params_mut());
        v
    }
}

/// Learned additive positional table; `forward` adds the first `T` rows
/// to a `[T x d]` sequence.
pub struct PosEmbedding {
    pub table: Parameter,
}

impl PosEmbedding {
    pub fn new(name: &str, max_len: usize, d_model: usize, rng: &mut ChaCha8Rng) -> Self {
        PosEmbedding {
            table: Parameter::uniform(format!("{name}.pos"), max_len, d_model, 0.02, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, tape: &mut ParamTape, x: NodeId) -> Result<NodeId> {
        let t = g.value(x).rows();
        if t > self.table.value.rows() {
            return Err(Error::shape(format!(
                "positional table covers {} steps, sequence has {t}",
                self.table.value.rows()
            )));
        }
        let full = tape.bind(g, &self.table);
        let rows = g.slice_rows(full, 0, t)?;
        g.add(x, rows)
    }
}

impl Module for PosEmbedding {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.table]
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.table]
    }
}
