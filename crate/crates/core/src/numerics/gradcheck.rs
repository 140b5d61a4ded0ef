//! Central finite-difference validation of reverse-mode gradients.

use std::collections::BTreeMap;

use super::graph::{Graph, NodeId};
use super::nn::{Module, ParamTape};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Maximum allowed relative error before `grad_check` reports failure.
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `name[index]` of the element with the largest relative error.
    pub worst: String,
    pub n_checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Compare reverse-mode gradients against central finite differences for
/// every element of every parameter in `model`.
///
/// `build_loss` must construct the forward pass on the given graph (binding
/// parameters through the tape) and return a scalar loss node. It runs once
/// for the analytic pass and twice per parameter element for the numeric
/// probes, so keep the model small. Relative error per element is
/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<M, F>(
    model: &mut M,
    mut build_loss: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    M: Module,
    F: FnMut(&M, &mut Graph, &mut ParamTape) -> Result<NodeId>,
{
    // Analytic gradients.
    let analytic: BTreeMap<String, Tensor> = {
        let mut g = Graph::eval();
        let mut tape = ParamTape::new();
        let loss = build_loss(model, &mut g, &mut tape)?;
        g.backward(loss)?;
        model
            .params()
            .iter()
            .map(|p| {
                let grad = match tape.node(&p.name) {
                    Some(id) => g.grad(id).clone(),
                    None => Tensor::zeros_like(&p.value),
                };
                (p.name.clone(), grad)
            })
            .collect()
    };

    let mut worst = String::new();
    let mut max_rel_err = 0.0_f64;
    let mut n_checked = 0usize;
    let n_params = model.params().len();

    for pi in 0..n_params {
        let (name, n_elem) = {
            let p = model.params()[pi];
            (p.name.clone(), p.value.len())
        };
        let a_tensor = analytic
            .get(&name)
            .ok_or_else(|| Error::numeric(format!("grad_check: no gradient for {name}")))?
            .clone();

        for e in 0..n_elem {
            let orig = model.params_mut()[pi].value.data()[e];

            model.params_mut()[pi].value.data_mut()[e] = orig + cfg.step;
            let loss_plus = eval_loss(model, &mut build_loss)?;
            model.params_mut()[pi].value.data_mut()[e] = orig - cfg.step;
            let loss_minus = eval_loss(model, &mut build_loss)?;
            model.params_mut()[pi].value.data_mut()[e] = orig;

            let numeric = (loss_plus - loss_minus) / (2.0 * cfg.step);
            let a = a_tensor.data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = format!("{name}[{e}] analytic {a} vs numeric {numeric}");
            }
            n_checked += 1;
        }
    }

    Ok(GradCheckReport {
        max_rel_err,
        worst,
        n_checked,
        tolerance: cfg.tolerance,
    })
}

fn eval_loss<M, F>(model: &M, build_loss: &mut F) -> Result<f64>
where
    M: Module,
    F: FnMut(&M, &mut Graph, &mut ParamTape) -> Result<NodeId>,
{
    let mut g = Graph::eval();
    let mut tape = ParamTape::new();
    let loss = build_loss(model, &mut g, &mut tape)?;
    let v = g.value(loss);
    if v.len() != 1 {
        return Err(Error::shape("grad_check: loss must be scalar"));
    }
    let v = v.data()[0];
    if !v.is_finite() {
        return Err(Error::numeric(format!("grad_check: non-finite loss {v}")));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::nn::{Dense, EncoderLayer, ParamSet, Parameter};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dense_gelu_chain_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut model = ParamSet(vec![
            Parameter::xavier("w", 3, 4, &mut rng),
            Parameter::uniform("x", 2, 3, 1.0, &mut rng),
        ]);
        let report = grad_check(
            &mut model,
            |m, g, tape| {
                let w = tape.bind(g, &m.0[0]);
                let x = tape.bind(g, &m.0[1]);
                let y = g.matmul(x, w)?;
                let y = g.gelu(y);
                let y = g.tanh(y);
                Ok(g.sum_all(y))
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn encoder_layer_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        struct Wrap {
            layer: EncoderLayer,
            x: Parameter,
        }
        impl Module for Wrap {
            fn params(&self) -> Vec<&Parameter> {
                let mut v = self.layer.params();
                v.push(&self.x);
                v
            }
            fn params_mut(&mut self) -> Vec<&mut Parameter> {
                let mut v = self.layer.params_mut();
                v.push(&mut self.x);
                v
            }
        }
        let mut model = Wrap {
            layer: EncoderLayer::new("e", 4, 2, 0.0, &mut rng).unwrap(),
            x: Parameter::uniform("x", 3, 4, 1.0, &mut rng),
        };
        let report = grad_check(
            &mut model,
            |m, g, tape| {
                let x = tape.bind(g, &m.x);
                let y = m.layer.forward(g, tape, x, None)?;
                let y = g.abs(y);
                Ok(g.sum_all(y))
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn missing_gradient_path_is_detected() {
        // Sabotage: one use of w goes through an unbound constant leaf, so
        // reverse mode misses that path while finite differences see it.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut model = ParamSet(vec![Parameter::uniform("w", 2, 2, 1.0, &mut rng)]);
        let report = grad_check(
            &mut model,
            |m, g, tape| {
                let w = tape.bind(g, &m.0[0]);
                let w_const = g.leaf(m.0[0].value.clone());
                let y = g.mul(w, w_const)?;
                Ok(g.sum_all(y))
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(!report.passed(), "sabotaged gradient slipped through");
    }

    #[test]
    fn non_finite_loss_is_error() {
        let mut model = ParamSet(vec![Parameter::new(
            "w",
            Tensor::new(vec![1, 1], vec![-1.0]).unwrap(),
        )]);
        let err = grad_check(
            &mut model,
            |m, g, tape| {
                let w = tape.bind(g, &m.0[0]);
                let y = g.sqrt(w); // sqrt(-1) = NaN
                Ok(g.sum_all(y))
            },
            &GradCheckConfig::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("non-finite"));
    }

    #[test]
    fn shared_binding_accumulates_both_uses() {
        // loss = sum((x @ w) @ w) uses w twice; both contributions must
        // land on the single bound leaf.
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut model = ParamSet(vec![Parameter::uniform("w", 3, 3, 0.7, &mut rng)]);
        let x = Tensor::rand_uniform(2, 3, 1.0, &mut rng);
        let report = grad_check(
            &mut model,
            |m, g, tape| {
                let w = tape.bind(g, &m.0[0]);
                let xid = g.leaf(x.clone());
                let y1 = g.matmul(xid, w)?;
                let y2 = g.matmul(y1, w)?;
                let y2 = g.sigmoid(y2);
                Ok(g.sum_all(y2))
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn dense_layer_module_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut model = Dense::new("d", 4, 3, &mut rng);
        let x = Tensor::rand_uniform(5, 4, 1.0, &mut rng);
        let report = grad_check(
            &mut model,
            |m, g, tape| {
                let xid = g.leaf(x.clone());
                let y = m.forward(g, tape, xid)?;
                let y = g.gelu(y);
                Ok(g.mean_all(y))
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
