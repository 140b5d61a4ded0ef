//! Finite-difference validation of every differentiable operation and
//! reusable block, across 20 random seeds and randomized small shapes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use va_fusion_core::metrics::{hybrid_loss, LossConfig};
use va_fusion_core::numerics::gradcheck::{grad_check, GradCheckConfig};
use va_fusion_core::numerics::graph::{Graph, NodeId};
use va_fusion_core::numerics::nn::{
    CrossAttnLayer, Dense, Module, MultiHeadAttention, ParamSet, Parameter, PosEmbedding,
};
use va_fusion_core::numerics::tensor::Tensor;
use va_fusion_core::Result;

const SEEDS: u64 = 20;

fn cfg() -> GradCheckConfig {
    GradCheckConfig::default() // step 1e-5, tolerance 1e-4
}

/// Weighted-sum reduction with fixed weights: catches misrouted gradients
/// that a plain sum (constant weight 1) would mask.
fn reduce(g: &mut Graph, y: NodeId, w: &Tensor) -> Result<NodeId> {
    let wid = g.leaf(w.clone());
    let yw = g.mul(y, wid)?;
    Ok(g.sum_all(yw))
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(2..5), rng.gen_range(2..5))
}

#[test]
fn elementwise_and_broadcast_ops() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, c) = dims(&mut rng);
        let mut model = ParamSet(vec![
            Parameter::uniform("a", r, c, 1.0, &mut rng),
            Parameter::uniform("b", r, c, 1.0, &mut rng),
            Parameter::uniform("row", 1, c, 1.0, &mut rng),
            Parameter::uniform("col", r, 1, 1.0, &mut rng),
            Parameter::uniform("row2", 1, c, 1.0, &mut rng),
        ]);
        // keep |a| away from 0 for abs, b away from 0 for div
        for v in model.0[0].value.data_mut() {
            if v.abs() < 0.1 {
                *v += 0.2;
            }
        }
        model.0[1].value = model.0[1].value.map(|v| 1.0 + 0.4 * v);
        let w = Tensor::rand_uniform(r, c, 1.0, &mut rng);

        let report = grad_check(
            &mut model,
            |m, g, tape| {
                let a = tape.bind(g, &m.0[0]);
                let b = tape.bind(g, &m.0[1]);
                let row = tape.bind(g, &m.0[2]);
                let col = tape.bind(g, &m.0[3]);
                let row2 = tape.bind(g, &m.0[4]);
                // nonlinearities between reuses of b/row so that nothing
                // cancels algebraically (a dead input would reduce the
                // check to comparing FD noise against zero)
                let s1 = g.add(a, b)?;
                let s1 = g.gelu(s1);
                let s2 = g.sub(s1, b)?;
                let s3 = g.mul(s2, b)?;
                let s3 = g.tanh(s3);
                let s4 = g.div(s3, b)?;
                let s5 = g.add_row(s4, row)?;
                let s5 = g.sigmoid(s5);
                let s6 = g.sub_row(s5, row2)?;
                let s7 = g.mul_col(s6, col)?;
                let s8 = g.affine(s7, -1.7, 0.3);
                Ok(reduce(g, s8, &w)?)
            },
            &cfg(),
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}: {report:?}");
    }
}

#[test]
fn activation_ops() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (r, c) = dims(&mut rng);
        let mut model = ParamSet(vec![Parameter::uniform("x", r, c, 2.0, &mut rng)]);
        let w = Tensor::rand_uniform(r, c, 1.0, &mut rng);
        let report = grad_check(
            &mut model,
            |m, g, tape| {
                let x = tape.bind(g, &m.0[0]);
                let a = g.gelu(x);
                let b = g.tanh(a);
                let cnode = g.sigmoid(b);
                let d = g.affine(cnode, 1.0, 0.5); // (0.5, 1.5): safe for sqrt
                let e = g.sqrt(d);
                // (-2.4, -1.3): exercises the negative branch of |x|
                // while staying far from the kink at 0
                let f = g.affine(e, -2.0, 0.1);
                let f = g.abs(f);
                Ok(reduce(g, f, &w)?)
            },
            &cfg(),
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}: {report:?}");
    }
}

#[test]
fn matmul_and_transpose() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let (r, k) = dims(&mut rng);
        let c = rng.gen_range(2..5);
        let mut model = ParamSet(vec![
            Parameter::uniform("a", r, k, 1.0, &mut rng),
            Parameter::uniform("b", k, c, 1.0, &mut rng),
        ]);
        let w = Tensor::rand_uniform(c, r, 1.0, &mut rng);
        let report = grad_check(
            &mut model,
            |m, g, tape| {
                let a = tape.bind(g, &m.0[0]);
                let b = tape.bind(g, &m.0[1]);
                let y = g.matmul(a, b)?;
                let yt = g.transpose(y);
                Ok(reduce(g, yt, &w)?)
            },
            &cfg(),
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}: {report:?}");
    }
}

#[test]
fn masked_softmax_strict_and_lenient() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let (r, c) = (rng.gen_range(2..5), rng.gen_range(2..6));
        let mut mask: Vec<bool> = (0..r * c).map(|_| rng.gen_bool(0.7)).collect();
        for i in 0..r {
            let j = rng.gen_range(0..c);
            mask[i * c + j] = true; // strict: every row needs a valid entry
        }
        let mut model = ParamSet(vec![Parameter::uniform("x", r, c, 2.0, &mut rng)]);
        let w = Tensor::rand_uniform(r, c, 1.0, &mut rng);
        let m = std::sync::Arc::new(mask);
        let report = grad_check(
            &mut model,
            |mm, g, tape| {
                let x = tape.bind(g, &mm.0[0]);
                let y = g.masked_softmax(x, std::sync::Arc::clone(&m))?;
                Ok(reduce(g, y, &w)?)
            },
            &cfg(),
        )
        .unwrap();
        assert!(report.passed(), "seed {seed} strict: {report:?}");

        // lenient: blank out one full row; its logits must get zero grads
        let mut mask2 = m.as_ref().clone();
        let dead = rng.gen_range(0..r);
        for j in 0..c {
            mask2[dead * c + j] = false;
        }
        let m2 = std::sync::Arc::new(mask2);
        let report = grad_check(
            &mut model,
            |mm, g, tape| {
                let x = tape.bind(g, &mm.0[0]);
                let y = g.masked_softmax_lenient(x, std::sync::Arc::clone(&m2))?;
                Ok(reduce(g, y, &w)?)
            },
            &cfg(),
        )
        .unwrap();
        assert!(report.passed(), "seed {seed} lenient: {report:?}");
    }
}

#[test]
fn layer_norm_op() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let (r, c) = dims(&mut rng);
        let mut model = ParamSet(vec![
            Parameter::uniform("x", r, c, 2.0, &mut rng),
            Parameter::uniform("gamma", 1, c, 1.0, &mut rng),
            Parameter::uniform("beta", 1, c, 1.0, &mut rng),
        ]);
        let w = Tensor::rand_uniform(r, c, 1.0, &mut rng);
        let report = grad_check(
            &mut model,
            |m, g, tape| {
                let x = tape.bind(g, &m.0[0]);
                let gamma = tape.bind(g, &m.0[1]);
                let beta = tape.bind(g, &m.0[2]);
                let y = g.layer_norm(x, gamma, beta, 1e-5)?;
                Ok(reduce(g, y, &w)?)
            },
            &cfg(),
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}: {report:?}");
    }
}

#[test]
fn slice_and_concat_ops() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let r = rng.gen_range(3..6);
        let c = rng.gen_range(3..6);
        let mut model = ParamSet(vec![
            Parameter::uniform("x", r, c, 1.0, &mut rng),
            Parameter::uniform("y", r, c, 1.0, &mut rng),
        ]);
        let w = Tensor::rand_uniform(2 * r - 1, 2 * c - 1, 1.0, &mut rng);
        let report = grad_check(
            &mut model,
            |m, g, tape| {
                let x = tape.bind(g, &m.0[0]);
                let y = tape.bind(g, &m.0[1]);
                // mix slices of both tensors back together
                let xc = g.slice_cols(x, 1, c)?;
                let yc = g.slice_cols(y, 0, c)?;
                let cols = g.concat_cols(&[xc, yc])?; // [r x 2c-1]
                let xr = g.slice_rows(cols, 0, r - 1)?;
                let rows = g.concat_rows(&[xr, cols])?; // [2r-1 x 2c-1]
                Ok(reduce(g, rows, &w)?)
            },
            &cfg(),
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}: {report:?}");
    }
}

#[test]
fn causal_conv_op() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let t = rng.gen_range(3..7);
        let c = rng.gen_range(2..4);
        let k = rng.gen_range(2..4);
        let mut model = ParamSet(vec![
            Parameter::uniform("x", t, c, 1.0, &mut rng),
            Parameter::uniform("w", k, c, 1.0, &mut rng),
            Parameter::uniform("b", 1, c, 1.0, &mut rng),
        ]);
        let w = Tensor::rand_uniform(t, c, 1.0, &mut rng);
        let report = grad_check(
            &mut model,
            |m, g, tape| {
                let x = tape.bind(g, &m.0[0]);
                let wk = tape.bind(g, &m.0[1]);
                let b = tape.bind(g, &m.0[2]);
                let y = g.causal_conv1d(x, wk, b)?;
                let y = g.tanh(y);
                Ok(reduce(g, y, &w)?)
            },
            &cfg(),
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}: {report:?}");
    }
}

#[test]
fn ssm_scan_op() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
        let t = rng.gen_range(3..7);
        let c = rng.gen_range(2..4);
        let s = rng.gen_range(2..4);
        let mut model = ParamSet(vec![
            Parameter::uniform("decay", c, s, 1.5, &mut rng),
            Parameter::uniform("gate", t, c, 1.0, &mut rng),
            Parameter::uniform("input", t, c, 1.0, &mut rng),
            Parameter::uniform("readout", c, s, 1.0, &mut rng),
        ]);
        let w = Tensor::rand_uniform(t, c, 1.0, &mut rng);
        let report = grad_check(
            &mut model,
            |m, g, tape| {
                let decay = tape.bind(g, &m.0[0]);
                let gate_raw = tape.bind(g, &m.0[1]);
                let input = tape.bind(g, &m.0[2]);
                let readout = tape.bind(g, &m.0[3]);
                let gate = g.sigmoid(gate_raw);
                let y = g.ssm_scan(decay, gate, input, readout)?;
                Ok(reduce(g, y, &w)?)
            },
            &cfg(),
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}: {report:?}");
    }
}

#[test]
fn attention_block_with_key_mask() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(800 + seed);
        struct Wrap {
            mha: MultiHeadAttention,
            q: Parameter,
            kv: Parameter,
        }
        impl Module for Wrap {
            fn params(&self) -> Vec<&Parameter> {
                let mut v = self.mha.params();
                v.push(&self.q);
                v.push(&self.kv);
                v
            }
            fn params_mut(&mut self) -> Vec<&mut Parameter> {
                let mut v = self.mha.params_mut();
                v.push(&mut self.q);
                v.push(&mut self.kv);
                v
            }
        }
        let lk = rng.gen_range(2..5);
        let mut mask: Vec<bool> = (0..lk).map(|_| rng.gen_bool(0.7)).collect();
        mask[rng.gen_range(0..lk)] = true;
        let mut model = Wrap {
            mha: MultiHeadAttention::new("a", 4, 2, &mut rng).unwrap(),
            q: Parameter::uniform("q", 3, 4, 1.0, &mut rng),
            kv: Parameter::uniform("kv", lk, 4, 1.0, &mut rng),
        };
        let w = Tensor::rand_uniform(3, 4, 1.0, &mut rng);
        let mask_c = mask.clone();
        let report = grad_check(
            &mut model,
            |m, g, tape| {
                let q = tape.bind(g, &m.q);
                let kv = tape.bind(g, &m.kv);
                let y = m.mha.forward(g, tape, q, kv, Some(&mask_c))?;
                Ok(reduce(g, y, &w)?)
            },
            &cfg(),
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}: {report:?}");
    }
}

#[test]
fn cross_attention_layer_block() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        struct Wrap {
            layer: CrossAttnLayer,
            q: Parameter,
            ctx: Parameter,
        }
        impl Module for Wrap {
            fn params(&self) -> Vec<&Parameter> {
                let mut v = self.layer.params();
                v.push(&self.q);
                v.push(&self.ctx);
                v
            }
            fn params_mut(&mut self) -> Vec<&mut Parameter> {
                let mut v = self.layer.params_mut();
                v.push(&mut self.q);
                v.push(&mut self.ctx);
                v
            }
        }
        let mut model = Wrap {
            layer: CrossAttnLayer::new("x", 4, 2, 0.0, &mut rng).unwrap(),
            q: Parameter::uniform("q", 3, 4, 1.0, &mut rng),
            ctx: Parameter::uniform("ctx", 5, 4, 1.0, &mut rng),
        };
        let w = Tensor::rand_uniform(3, 4, 1.0, &mut rng);
        let report = grad_check(
            &mut model,
            |m, g, tape| {
                let q = tape.bind(g, &m.q);
                let ctx = tape.bind(g, &m.ctx);
                let y = m.layer.forward(g, tape, q, ctx, None)?;
                Ok(reduce(g, y, &w)?)
            },
            &cfg(),
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}: {report:?}");
    }
}

#[test]
fn pos_embedding_block() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        struct Wrap {
            pe: PosEmbedding,
            x: Parameter,
        }
        impl Module for Wrap {
            fn params(&self) -> Vec<&Parameter> {
                let mut v = self.pe.params();
                v.push(&self.x);
                v
            }
            fn params_mut(&mut self) -> Vec<&mut Parameter> {
                let mut v = self.pe.params_mut();
                v.push(&mut self.x);
                v
            }
        }
        let mut model = Wrap {
            pe: PosEmbedding::new("p", 6, 3, &mut rng),
            x: Parameter::uniform("x", 4, 3, 1.0, &mut rng),
        };
        let w = Tensor::rand_uniform(4, 3, 1.0, &mut rng);
        let report = grad_check(
            &mut model,
            |m, g, tape| {
                let x = tape.bind(g, &m.x);
                let y = m.pe.forward(g, tape, x)?;
                let y = g.gelu(y);
                Ok(reduce(g, y, &w)?)
            },
            &cfg(),
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}: {report:?}");
    }
}

#[test]
fn linear_layer_with_ccc_loss() {
    // random 3-frame batch through a dense layer into the hybrid loss
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(1100 + seed);
        struct Wrap {
            dense: Dense,
            x: Parameter,
        }
        impl Module for Wrap {
            fn params(&self) -> Vec<&Parameter> {
                let mut v = self.dense.params();
                v.push(&self.x);
                v
            }
            fn params_mut(&mut self) -> Vec<&mut Parameter> {
                let mut v = self.dense.params_mut();
                v.push(&mut self.x);
                v
            }
        }
        let mut model = Wrap {
            dense: Dense::new("d", 4, 2, &mut rng),
            x: Parameter::uniform("x", 3, 4, 1.0, &mut rng),
        };
        let targets = Tensor::rand_uniform(3, 2, 0.9, &mut rng);
        let valid = vec![true; 6];
        let loss_cfg = LossConfig {
            lambda_ccc: 0.7,
            ..LossConfig::default()
        };
        let report = grad_check(
            &mut model,
            |m, g, tape| {
                let x = tape.bind(g, &m.x);
                let preds = m.dense.forward(g, tape, x)?;
                Ok(hybrid_loss(g, &targets, preds, &valid, &loss_cfg)?.loss)
            },
            &cfg(),
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}: {report:?}");
    }
}

#[test]
fn hybrid_loss_with_masked_frames() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(1200 + seed);
        let n = 6;
        let mut valid: Vec<bool> = (0..n * 2).map(|_| rng.gen_bool(0.75)).collect();
        // keep ≥2 valid per dimension so neither is skipped
        for d in 0..2 {
            valid[d] = true;
            valid[2 + d] = true;
            valid[4 + d] = true;
        }
        let mut model = ParamSet(vec![Parameter::uniform("p", n, 2, 0.8, &mut rng)]);
        let targets = Tensor::rand_uniform(n, 2, 0.9, &mut rng);
        let valid_c = valid.clone();
        let report = grad_check(
            &mut model,
            |m, g, tape| {
                let preds = tape.bind(g, &m.0[0]);
                Ok(hybrid_loss(g, &targets, preds, &valid_c, &LossConfig::default())?.loss)
            },
            &cfg(),
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}: {report:?}");
    }
}
