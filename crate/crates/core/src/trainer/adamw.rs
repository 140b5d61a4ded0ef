//! Adaptive-moment optimizer with decoupled weight decay, plus global
//! gradient-norm clipping.

use std::collections::BTreeMap;

use crate::numerics::nn::Parameter;
use crate::numerics::Tensor;

/// Adam moments with decoupled weight decay:
///
/// ```text
/// m ← β1·m + (1−β1)·g          v ← β2·v + (1−β2)·g²
/// θ ← θ − lr·( m̂/(√v̂ + ε) + wd·θ )
/// ```
///
/// with bias-corrected `m̂ = m/(1−β1^t)`, `v̂ = v/(1−β2^t)`. The learning
/// rate is passed per step so a schedule can adjust it without touching
/// optimizer state; moments are keyed by parameter name.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step_count: u64,
    pub first_moment: BTreeMap<String, Tensor>,
    pub second_moment: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    /// One update over `params` using their accumulated `.grad` fields.
    pub fn step(&mut self, lr: f64, params: Vec<&mut Parameter>) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        for p in params {
            let m = self
                .first_moment
                .entry(p.name.clone())
                .or_insert_with(|| Tensor::zeros_like(&p.value));
            let v = self
                .second_moment
                .entry(p.name.clone())
                .or_insert_with(|| Tensor::zeros_like(&p.value));
            let theta = p.value.data_mut();
            let grad = p.grad.data();
            let m = m.data_mut();
            let v = v.data_mut();
            for i in 0..theta.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                theta[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * theta[i]);
            }
        }
    }
}

/// Scale all gradients down so their joint L2 norm is at most `max_norm`;
/// returns the pre-clip norm.
pub fn clip_global_norm(params: Vec<&mut Parameter>, max_norm: f64) -> f64 {
    let norm_sq: f64 = params
        .iter()
        .map(|p| p.grad.data().iter().map(|g| g * g).sum::<f64>())
        .sum();
    let norm = norm_sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for p in params {
            p.grad.scale_assign(scale);
        }
    }
    norm
}
