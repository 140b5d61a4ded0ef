//! Reverse-mode automatic differentiation over a per-forward-pass tape.
//!
//! A [`Graph`] is an eager tape: each op computes its value immediately and
//! records enough structure to propagate gradients backwards once
//! [`Graph::backward`] runs. Forward evaluation of a frozen model builds a
//! graph per call, so concurrent read-only evaluation needs no locking;
//! gradient accumulation happens on the caller's side via [`ParamTape`].

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use super::{gelu_prime_scalar, gelu_scalar, masked_softmax_kernel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Train mode draws dropout masks from a counter-based ChaCha stream so a
/// fixed seed reproduces runs bit-exactly; eval mode is deterministic by
/// construction (dropout is the identity).
enum Mode {
    Eval,
    Train { rng: ChaCha8Rng },
}

enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    SubRow(NodeId, NodeId),
    MulCol(NodeId, NodeId),
    // backward only needs the slope, so the offset is not recorded
    Affine {
        x: NodeId,
        mul: f64,
    },
    Gelu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Abs(NodeId),
    Sqrt(NodeId),
    SumAll(NodeId),
    MaskedSoftmax {
        x: NodeId,
        mask: Arc<Vec<bool>>,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    Dropout {
        x: NodeId,
        scale: Arc<Vec<f64>>,
    },
    SliceCols {
        x: NodeId,
        from: usize,
    },
    ConcatCols(Vec<NodeId>),
    SliceRows {
        x: NodeId,
        from: usize,
    },
    ConcatRows(Vec<NodeId>),
    CausalConv1d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    SsmScan {
        decay: NodeId,
        gate: NodeId,
        input: NodeId,
        readout: NodeId,
    },
}

pub struct Graph {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    // per-node saved buffers needed by backward (layer-norm x̂/inv_std, ssm states)
    aux: Vec<Vec<Tensor>>,
    grads: Vec<Tensor>,
    mode: Mode,
}

impl Graph {
    pub fn eval() -> Self {
        Graph {
            values: Vec::new(),
            ops: Vec::new(),
            aux: Vec::new(),
            grads: Vec::new(),
            mode: Mode::Eval,
        }
    }

    pub fn train(seed: u64) -> Self {
        Graph {
            values: Vec::new(),
            ops: Vec::new(),
            aux: Vec::new(),
            grads: Vec::new(),
            mode: Mode::Train {
                rng: ChaCha8Rng::seed_from_u64(seed),
            },
        }
    }

    pub fn is_train(&self) -> bool {
        matches!(self.mode, Mode::Train { .. })
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    /// Gradient of the last `backward` loss w.r.t. this node. Zero tensor
    /// for nodes the loss does not depend on.
    pub fn grad(&self, id: NodeId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, Vec::new())
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.leaf(Tensor::scalar(v))
    }

    fn push(&mut self, value: Tensor, op: Op, aux: Vec<Tensor>) -> NodeId {
        self.values.push(value);
        self.ops.push(op);
        self.aux.push(aux);
        NodeId(self.values.len() - 1)
    }

    fn shape2(&self, id: NodeId) -> (usize, usize) {
        let s = self.values[id.0].shape();
        (s[0], s[1])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.values[a.0].matmul(&self.values[b.0])?;
        Ok(self.push(v, Op::Matmul(a, b), Vec::new()))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let v = self.values[x.0].transpose();
        self.push(v, Op::Transpose(x), Vec::new())
    }

    fn binary_same_shape(&mut self, a: NodeId, b: NodeId, name: &str) -> Result<()> {
        if !self.values[a.0].same_shape(&self.values[b.0]) {
            return Err(Error::shape(format!(
                "{name}: {:?} vs {:?}",
                self.values[a.0].shape(),
                self.values[b.0].shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "add")?;
        let mut v = self.values[a.0].clone();
        v.add_assign(&self.values[b.0]);
        Ok(self.push(v, Op::Add(a, b), Vec::new()))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "sub")?;
        let va = &self.values[a.0];
        let vb = &self.values[b.0];
        let data = va
            .data()
            .iter()
            .zip(vb.data().iter())
            .map(|(x, y)| x - y)
            .collect();
        let v = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(v, Op::Sub(a, b), Vec::new()))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "mul")?;
        let va = &self.values[a.0];
        let vb = &self.values[b.0];
        let data = va
            .data()
            .iter()
            .zip(vb.data().iter())
            .map(|(x, y)| x * y)
            .collect();
        let v = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(v, Op::Mul(a, b), Vec::new()))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "div")?;
        let va = &self.values[a.0];
        let vb = &self.values[b.0];
        let data = va
            .data()
            .iter()
            .zip(vb.data().iter())
            .map(|(x, y)| x / y)
            .collect();
        let v = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(v, Op::Div(a, b), Vec::new()))
    }

    /// `x [r x c] + row [1 x c]`, broadcast over rows.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (_, c) = self.shape2(x);
        let (rr, rc) = self.shape2(row);
        if rr != 1 || rc != c {
            return Err(Error::shape(format!(
                "add_row: row is [{rr} x {rc}], expected [1 x {c}]"
            )));
        }
        let mut v = self.values[x.0].clone();
        let rowv = self.values[row.0].data().to_vec();
        for i in 0..v.rows() {
            for (a, b) in v.row_mut(i).iter_mut().zip(rowv.iter()) {
                *a += b;
            }
        }
        Ok(self.push(v, Op::AddRow(x, row), Vec::new()))
    }

    /// `x [r x c] - row [1 x c]`, broadcast over rows.
    pub fn sub_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (_, c) = self.shape2(x);
        let (rr, rc) = self.shape2(row);
        if rr != 1 || rc != c {
            return Err(Error::shape(format!(
                "sub_row: row is [{rr} x {rc}], expected [1 x {c}]"
            )));
        }
        let mut v = self.values[x.0].clone();
        let rowv = self.values[row.0].data().to_vec();
        for i in 0..v.rows() {
            for (a, b) in v.row_mut(i).iter_mut().zip(rowv.iter()) {
                *a -= b;
            }
        }
        Ok(self.push(v, Op::SubRow(x, row), Vec::new()))
    }

    /// `x [r x c] ⊙ col [r x 1]`, broadcast over columns.
    pub fn mul_col(&mut self, x: NodeId, col: NodeId) -> Result<NodeId> {
        let (r, _) = self.shape2(x);
        let (cr, cc) = self.shape2(col);
        if cr != r || cc != 1 {
            return Err(Error::shape(format!(
                "mul_col: col is [{cr} x {cc}], expected [{r} x 1]"
            )));
        }
        let mut v = self.values[x.0].clone();
        let colv = self.values[col.0].data().to_vec();
        for i in 0..v.rows() {
            let s = colv[i];
            for a in v.row_mut(i).iter_mut() {
                *a *= s;
            }
        }
        Ok(self.push(v, Op::MulCol(x, col), Vec::new()))
    }

    pub fn affine(&mut self, x: NodeId, mul: f64, add: f64) -> NodeId {
        let v = self.values[x.0].map(|a| a * mul + add);
        self.push(v, Op::Affine { x, mul }, Vec::new())
    }

    pub fn scale(&mut self, x: NodeId, mul: f64) -> NodeId {
        self.affine(x, mul, 0.0)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.values[x.0].map(gelu_scalar);
        self.push(v, Op::Gelu(x), Vec::new())
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.values[x.0].map(f64::tanh);
        self.push(v, Op::Tanh(x), Vec::new())
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.values[x.0].map(|a| 1.0 / (1.0 + (-a).exp()));
        self.push(v, Op::Sigmoid(x), Vec::new())
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let v = self.values[x.0].map(f64::abs);
        self.push(v, Op::Abs(x), Vec::new())
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        let v = self.values[x.0].map(f64::sqrt);
        self.push(v, Op::Sqrt(x), Vec::new())
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.values[x.0].data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), Vec::new())
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.values[x.0].len() as f64;
        let s = self.sum_all(x);
        self.affine(s, 1.0 / n, 0.0)
    }

    /// Row-wise masked softmax over the last axis. A row with no valid
    /// entry is an error: it signals a fully padded attention row or a
    /// frame with no valid modality.
    pub fn masked_softmax(&mut self, x: NodeId, mask: Arc<Vec<bool>>) -> Result<NodeId> {
        self.masked_softmax_impl(x, mask, false)
    }

    /// Like [`Graph::masked_softmax`] but rows without any valid entry
    /// produce an all-zero row instead of an error. Callers that use this
    /// must track such rows themselves (they carry no probability mass).
    pub fn masked_softmax_lenient(&mut self, x: NodeId, mask: Arc<Vec<bool>>) -> Result<NodeId> {
        self.masked_softmax_impl(x, mask, true)
    }

    fn masked_softmax_impl(
        &mut self,
        x: NodeId,
        mask: Arc<Vec<bool>>,
        lenient: bool,
    ) -> Result<NodeId> {
        let xv = &self.values[x.0];
        if mask.len() != xv.len() {
            return Err(Error::shape(format!(
                "masked_softmax: mask has {} entries for {} logits",
                mask.len(),
                xv.len()
            )));
        }
        let v = masked_softmax_kernel(xv, &mask, lenient)?;
        Ok(self.push(v, Op::MaskedSoftmax { x, mask }, Vec::new()))
    }

    /// Row-wise layer normalization with population statistics, then the
    /// affine map `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let (r, c) = self.shape2(x);
        if self.shape2(gamma) != (1, c) || self.shape2(beta) != (1, c) {
            return Err(Error::shape(format!(
                "layer_norm: gamma/beta must be [1 x {c}]"
            )));
        }
        let xv = &self.values[x.0];
        let gv = self.values[gamma.0].data();
        let bv = self.values[beta.0].data();
        let mut out = Tensor::zeros(r, c);
        let mut xhat = Tensor::zeros(r, c);
        let mut inv_std = Tensor::zeros(r, 1);
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std.set(i, 0, istd);
            for j in 0..c {
                let xh = (row[j] - mean) * istd;
                xhat.set(i, j, xh);
                out.set(i, j, gv[j] * xh + bv[j]);
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta }, vec![xhat, inv_std]))
    }

    /// Inverted dropout: identity in eval mode, `x ⊙ m / (1-p)` with a
    /// Bernoulli keep mask in train mode.
    pub fn dropout(&mut self, x: NodeId, p: f64) -> NodeId {
        if p <= 0.0 {
            return x;
        }
        let n = self.values[x.0].len();
        let scale: Vec<f64> = match &mut self.mode {
            Mode::Eval => return x,
            Mode::Train { rng } => {
                let keep = 1.0 - p;
                (0..n)
                    .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect()
            }
        };
        let xv = &self.values[x.0];
        let data = xv
            .data()
            .iter()
            .zip(scale.iter())
            .map(|(a, s)| a * s)
            .collect();
        let v = Tensor::new(xv.shape().to_vec(), data).expect("dropout preserves shape");
        self.push(
            v,
            Op::Dropout {
                x,
                scale: Arc::new(scale),
            },
            Vec::new(),
        )
    }

    pub fn slice_cols(&mut self, x: NodeId, from: usize, to: usize) -> Result<NodeId> {
        let (r, c) = self.shape2(x);
        if from >= to || to > c {
            return Err(Error::shape(format!(
                "slice_cols: [{from}, {to}) out of {c} columns"
            )));
        }
        let xv = &self.values[x.0];
        let mut data = Vec::with_capacity(r * (to - from));
        for i in 0..r {
            data.extend_from_slice(&xv.row(i)[from..to]);
        }
        let v = Tensor::new(vec![r, to - from], data)?;
        Ok(self.push(v, Op::SliceCols { x, from }, Vec::new()))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols: no parts"));
        }
        let r = self.shape2(parts[0]).0;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.shape2(p);
            if pr != r {
                return Err(Error::shape("concat_cols: row mismatch"));
            }
            total += pc;
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.values[p.0].row(i));
            }
        }
        let v = Tensor::new(vec![r, total], data)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), Vec::new()))
    }

    pub fn slice_rows(&mut self, x: NodeId, from: usize, to: usize) -> Result<NodeId> {
        let (r, c) = self.shape2(x);
        if from >= to || to > r {
            return Err(Error::shape(format!(
                "slice_rows: [{from}, {to}) out of {r} rows"
            )));
        }
        let xv = &self.values[x.0];
        let data = xv.data()[from * c..to * c].to_vec();
        let v = Tensor::new(vec![to - from, c], data)?;
        Ok(self.push(v, Op::SliceRows { x, from }, Vec::new()))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows: no parts"));
        }
        let c = self.shape2(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.shape2(p);
            if pc != c {
                return Err(Error::shape("concat_rows: column mismatch"));
            }
            rows += pr;
            data.extend_from_slice(self.values[p.0].data());
        }
        let v = Tensor::new(vec![rows, c], data)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), Vec::new()))
    }

    /// Depthwise causal 1-d convolution over time: `x [T x C]`, kernel
    /// `w [k x C]`, bias `b [1 x C]`. Output at `t` sees inputs `t-k+1..=t`
    /// with implicit zero left padding.
    pub fn causal_conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (t_len, c) = self.shape2(x);
        let (k, wc) = self.shape2(w);
        if wc != c || self.shape2(b) != (1, c) {
            return Err(Error::shape(format!(
                "causal_conv1d: kernel [{k} x {wc}] / bias {:?} vs {c} channels",
                self.values[b.0].shape()
            )));
        }
        let xv = &self.values[x.0];
        let wv = &self.values[w.0];
        let bv = self.values[b.0].data();
        let mut out = Tensor::zeros(t_len, c);
        for t in 0..t_len {
            let o = out.row_mut(t);
            o.copy_from_slice(bv);
            for j in 0..k.min(t + 1) {
                let xr = xv.row(t - j);
                let wr = wv.row(j);
                for ci in 0..c {
                    o[ci] += wr[ci] * xr[ci];
                }
            }
        }
        Ok(self.push(out, Op::CausalConv1d { x, w, b }, Vec::new()))
    }

    /// Gated diagonal linear recurrence with per-channel state banks.
    ///
    /// With `a = sigmoid(decay)` (shape `[C x S]`), gate `[T x C]`,
    /// input `[T x C]`, readout `[C x S]`:
    ///
    /// ```text
    /// h[t,c,s] = a[c,s] * h[t-1,c,s] + gate[t,c] * input[t,c]
    /// out[t,c] = Σ_s readout[c,s] * h[t,c,s]
    /// ```
    ///
    /// Strictly causal: `out[t]` depends only on inputs at `<= t`.
    pub fn ssm_scan(
        &mut self,
        decay: NodeId,
        gate: NodeId,
        input: NodeId,
        readout: NodeId,
    ) -> Result<NodeId> {
        let (c, s) = self.shape2(decay);
        let (t_len, gc) = self.shape2(gate);
        if self.shape2(input) != (t_len, gc) || gc != c || self.shape2(readout) != (c, s) {
            return Err(Error::shape(format!(
                "ssm_scan: decay [{c} x {s}], gate [{t_len} x {gc}], input {:?}, readout {:?}",
                self.values[input.0].shape(),
                self.values[readout.0].shape()
            )));
        }
        let a = self.values[decay.0].map(|v| 1.0 / (1.0 + (-v).exp()));
        let gv = &self.values[gate.0];
        let uv = &self.values[input.0];
        let rv = &self.values[readout.0];
        let mut states = Tensor::zeros(t_len, c * s);
        let mut out = Tensor::zeros(t_len, c);
        let mut h = vec![0.0; c * s];
        for t in 0..t_len {
            let gr = gv.row(t);
            let ur = uv.row(t);
            for ci in 0..c {
                let drive = gr[ci] * ur[ci];
                let mut acc = 0.0;
                for si in 0..s {
                    let idx = ci * s + si;
                    h[idx] = a.data()[idx] * h[idx] + drive;
                    acc += rv.data()[idx] * h[idx];
                }
                out.set(t, ci, acc);
            }
            states.row_mut(t).copy_from_slice(&h);
        }
        Ok(self.push(
            out,
            Op::SsmScan {
                decay,
                gate,
                input,
                readout,
            },
            vec![states, a],
        ))
    }

    /// Propagate gradients from a scalar loss node back to every leaf.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let lv = &self.values[loss.0];
        if lv.len() != 1 {
            return Err(Error::shape(format!(
                "backward: loss must be scalar, got {:?}",
                lv.shape()
            )));
        }
        if !lv.data()[0].is_finite() {
            return Err(Error::numeric(format!(
                "backward: non-finite loss {}",
                lv.data()[0]
            )));
        }
        let mut grads: Vec<Tensor> = self.values.iter().map(Tensor::zeros_like).collect();
        grads[loss.0].data_mut()[0] = 1.0;

        for i in (0..=loss.0).rev() {
            let g = std::mem::replace(&mut grads[i], Tensor::zeros(0, 0));
            self.backprop_node(i, &g, &mut grads);
            grads[i] = g;
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Tensor]) {
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (av, bv) = (&self.values[a.0], &self.values[b.0]);
                acc_matmul_nt(g, bv, &mut grads[a.0]);
                acc_matmul_tn(av, g, &mut grads[b.0]);
            }
            Op::Transpose(x) => {
                let gt = g.transpose();
                grads[x.0].add_assign(&gt);
            }
            Op::Add(a, b) => {
                grads[a.0].add_assign(g);
                grads[b.0].add_assign(g);
            }
            Op::Sub(a, b) => {
                grads[a.0].add_assign(g);
                for (d, s) in grads[b.0].data_mut().iter_mut().zip(g.data()) {
                    *d -= s;
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.values[a.0], &self.values[b.0]);
                for ((d, s), o) in grads[a.0].data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                    *d += s * o;
                }
                for ((d, s), o) in grads[b.0].data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                    *d += s * o;
                }
            }
            Op::Div(a, b) => {
                let (yv, bv) = (&self.values[i], &self.values[b.0]);
                for ((d, s), o) in grads[a.0].data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                    *d += s / o;
                }
                for (((d, s), y), o) in grads[b.0]
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(yv.data())
                    .zip(bv.data())
                {
                    *d -= s * y / o;
                }
            }
            Op::AddRow(x, row) => {
                grads[x.0].add_assign(g);
                let c = g.cols();
                let dr = grads[row.0].data_mut();
                for r in 0..g.rows() {
                    for (d, s) in dr.iter_mut().zip(g.row(r)) {
                        *d += s;
                    }
                }
                let _ = c;
            }
            Op::SubRow(x, row) => {
                grads[x.0].add_assign(g);
                let dr = grads[row.0].data_mut();
                for r in 0..g.rows() {
                    for (d, s) in dr.iter_mut().zip(g.row(r)) {
                        *d -= s;
                    }
                }
            }
            Op::MulCol(x, col) => {
                let xv = &self.values[x.0];
                let cv = self.values[col.0].data();
                {
                    let dx = &mut grads[x.0];
                    for r in 0..g.rows() {
                        let s = cv[r];
                        for (d, gg) in dx.row_mut(r).iter_mut().zip(g.row(r)) {
                            *d += s * gg;
                        }
                    }
                }
                let dc = grads[col.0].data_mut();
                for r in 0..g.rows() {
                    let mut acc = 0.0;
                    for (gg, xx) in g.row(r).iter().zip(xv.row(r)) {
                        acc += gg * xx;
                    }
                    dc[r] += acc;
                }
            }
            Op::Affine { x, mul } => {
                for (d, s) in grads[x.0].data_mut().iter_mut().zip(g.data()) {
                    *d += mul * s;
                }
            }
            Op::Gelu(x) => {
                let xv = &self.values[x.0];
                for ((d, s), xx) in grads[x.0].data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                    *d += s * gelu_prime_scalar(*xx);
                }
            }
            Op::Tanh(x) => {
                let yv = &self.values[i];
                for ((d, s), y) in grads[x.0].data_mut().iter_mut().zip(g.data()).zip(yv.data()) {
                    *d += s * (1.0 - y * y);
                }
            }
            Op::Sigmoid(x) => {
                let yv = &self.values[i];
                for ((d, s), y) in grads[x.0].data_mut().iter_mut().zip(g.data()).zip(yv.data()) {
                    *d += s * y * (1.0 - y);
                }
            }
            Op::Abs(x) => {
                let xv = &self.values[x.0];
                for ((d, s), xx) in grads[x.0].data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                    *d += s * if *xx > 0.0 {
                        1.0
                    } else if *xx < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                }
            }
            Op::Sqrt(x) => {
                let yv = &self.values[i];
                for ((d, s), y) in grads[x.0].data_mut().iter_mut().zip(g.data()).zip(yv.data()) {
                    *d += s * 0.5 / y;
                }
            }
            Op::SumAll(x) => {
                let s = g.data()[0];
                for d in grads[x.0].data_mut() {
                    *d += s;
                }
            }
            Op::MaskedSoftmax { x, mask } => {
                let yv = &self.values[i];
                let c = yv.cols();
                let dx = &mut grads[x.0];
                for r in 0..yv.rows() {
                    let yr = yv.row(r);
                    let gr = g.row(r);
                    let mr = &mask[r * c..(r + 1) * c];
                    let dot: f64 = yr
                        .iter()
                        .zip(gr.iter())
                        .zip(mr.iter())
                        .filter(|(_, &m)| m)
                        .map(|((y, gg), _)| y * gg)
                        .sum();
                    let dxr = dx.row_mut(r);
                    for j in 0..c {
                        if mr[j] {
                            dxr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let xhat = &self.aux[i][0];
                let inv_std = &self.aux[i][1];
                let gv = self.values[gamma.0].data();
                let (r, c) = (g.rows(), g.cols());
                {
                    let dgamma = grads[gamma.0].data_mut();
                    for ri in 0..r {
                        for (j, (gg, xh)) in g.row(ri).iter().zip(xhat.row(ri)).enumerate() {
                            dgamma[j] += gg * xh;
                        }
                    }
                }
                {
                    let dbeta = grads[beta.0].data_mut();
                    for ri in 0..r {
                        for (j, gg) in g.row(ri).iter().enumerate() {
                            dbeta[j] += gg;
                        }
                    }
                }
                let dx = &mut grads[x.0];
                let cf = c as f64;
                for ri in 0..r {
                    let gr = g.row(ri);
                    let xh = xhat.row(ri);
                    let istd = inv_std.at(ri, 0);
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..c {
                        let dxh = gr[j] * gv[j];
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xh[j];
                    }
                    let m1 = sum_dxhat / cf;
                    let m2 = sum_dxhat_xhat / cf;
                    let dxr = dx.row_mut(ri);
                    for j in 0..c {
                        let dxh = gr[j] * gv[j];
                        dxr[j] += istd * (dxh - m1 - xh[j] * m2);
                    }
                }
            }
            Op::Dropout { x, scale } => {
                for ((d, s), m) in grads[x.0]
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(scale.iter())
                {
                    *d += s * m;
                }
            }
            Op::SliceCols { x, from } => {
                let dx = &mut grads[x.0];
                for r in 0..g.rows() {
                    let gr = g.row(r);
                    let dr = dx.row_mut(r);
                    for (j, gg) in gr.iter().enumerate() {
                        dr[from + j] += gg;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.values[p.0].cols();
                    let dp = &mut grads[p.0];
                    for r in 0..g.rows() {
                        let gr = &g.row(r)[offset..offset + pc];
                        for (d, s) in dp.row_mut(r).iter_mut().zip(gr) {
                            *d += s;
                        }
                    }
                    offset += pc;
                }
            }
            Op::SliceRows { x, from } => {
                let dx = &mut grads[x.0];
                for r in 0..g.rows() {
                    for (d, s) in dx.row_mut(from + r).iter_mut().zip(g.row(r)) {
                        *d += s;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pr = self.values[p.0].rows();
                    let dp = &mut grads[p.0];
                    for r in 0..pr {
                        for (d, s) in dp.row_mut(r).iter_mut().zip(g.row(offset + r)) {
                            *d += s;
                        }
                    }
                    offset += pr;
                }
            }
            Op::CausalConv1d { x, w, b } => {
                let xv = &self.values[x.0];
                let wv = &self.values[w.0];
                let (t_len, c) = (g.rows(), g.cols());
                let k = wv.rows();
                {
                    let db = grads[b.0].data_mut();
                    for t in 0..t_len {
                        for (d, s) in db.iter_mut().zip(g.row(t)) {
                            *d += s;
                        }
                    }
                }
                {
                    let dw = &mut grads[w.0];
                    for t in 0..t_len {
                        let gr = g.row(t);
                        for j in 0..k.min(t + 1) {
                            let xr = xv.row(t - j);
                            let dwr = dw.row_mut(j);
                            for ci in 0..c {
                                dwr[ci] += gr[ci] * xr[ci];
                            }
                        }
                    }
                }
                let dx = &mut grads[x.0];
                for t in 0..t_len {
                    let gr = g.row(t);
                    for j in 0..k.min(t + 1) {
                        let wr = wv.row(j);
                        let dxr = dx.row_mut(t - j);
                        for ci in 0..c {
                            dxr[ci] += gr[ci] * wr[ci];
                        }
                    }
                }
            }
            Op::SsmScan {
                decay,
                gate,
                input,
                readout,
            } => {
                let states = &self.aux[i][0];
                let a = &self.aux[i][1];
                let gv = &self.values[gate.0];
                let uv = &self.values[input.0];
                let rv = &self.values[readout.0];
                let (t_len, c) = (gv.rows(), gv.cols());
                let s = a.cols();

                let mut dh = vec![0.0; c * s];
                let mut da = vec![0.0; c * s];
                let mut dr = vec![0.0; c * s];
                let mut dgate = Tensor::zeros(t_len, c);
                let mut dinput = Tensor::zeros(t_len, c);

                for t in (0..t_len).rev() {
                    let gr = g.row(t);
                    let hr = states.row(t);
                    for ci in 0..c {
                        let go = gr[ci];
                        let mut d_drive = 0.0;
                        for si in 0..s {
                            let idx = ci * s + si;
                            dr[idx] += go * hr[idx];
                            let mut d = dh[idx] + go * rv.data()[idx];
                            // h[t] = a*h[t-1] + drive
                            let h_prev = if t > 0 { states.at(t - 1, idx) } else { 0.0 };
                            da[idx] += d * h_prev;
                            d_drive += d;
                            d *= a.data()[idx];
                            dh[idx] = d;
                        }
                        dgate.set(t, ci, d_drive * uv.at(t, ci));
                        dinput.set(t, ci, d_drive * gv.at(t, ci));
                    }
                }
                grads[gate.0].add_assign(&dgate);
                grads[input.0].add_assign(&dinput);
                for ((d, s_), aa) in grads[readout.0]
                    .data_mut()
                    .iter_mut()
                    .zip(dr.iter())
                    .zip(a.data())
                {
                    *d += s_;
                    let _ = aa;
                }
                for ((d, s_), aa) in grads[decay.0]
                    .data_mut()
                    .iter_mut()
                    .zip(da.iter())
                    .zip(a.data())
                {
                    *d += s_ * aa * (1.0 - aa);
                }
            }
        }
    }
}

/// out += a @ bᵀ
fn acc_matmul_nt(a: &Tensor, b: &Tensor, out: &mut Tensor) {
    let r = a.rows();
    debug_assert_eq!(a.cols(), b.cols());
    debug_assert_eq!(out.rows(), r);
    debug_assert_eq!(out.cols(), b.rows());
    for i in 0..r {
        let a_row = a.row(i);
        let o_row = out.row_mut(i);
        for (j, o) in o_row.iter_mut().enumerate() {
            let b_row = b.row(j);
            let mut acc = 0.0;
            for (av, bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// out += aᵀ @ b
fn acc_matmul_tn(a: &Tensor, b: &Tensor, out: &mut Tensor) {
    let (n, k) = (a.rows(), a.cols());
    debug_assert_eq!(b.rows(), n);
    debug_assert_eq!(out.rows(), k);
    debug_assert_eq!(out.cols(), b.cols());
    for i in 0..n {
        let a_row = a.row(i);
        let b_row = b.row(i);
        for (kk, &av) in a_row.iter().enumerate().take(k) {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out.row_mut(kk).iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}
