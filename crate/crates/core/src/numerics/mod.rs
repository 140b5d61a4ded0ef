//! Deterministic f64 numerics: tensors, differentiable ops, neural-net
//! building blocks, and finite-difference gradient checking.

pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod tensor;

pub use graph::{Graph, NodeId};
pub use tensor::{max_abs_diff, Tensor};

use crate::error::{Error, Result};

/// Exact Gaussian-CDF GELU: `x * Φ(x)` with Φ evaluated through `erf`,
/// not the tanh approximation.
pub fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// d/dx `x * Φ(x)` = `Φ(x) + x * φ(x)`.
pub fn gelu_prime_scalar(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Elementwise GELU over a tensor.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

/// Row-wise softmax restricted to entries whose mask is true; masked
/// entries get probability exactly 0. Stabilized by subtracting the max
/// over valid entries. A row with no valid entry is an error.
pub fn masked_softmax(logits: &Tensor, mask: &[bool]) -> Result<Tensor> {
    masked_softmax_kernel(logits, mask, false)
}

pub(crate) fn masked_softmax_kernel(logits: &Tensor, mask: &[bool], lenient: bool) -> Result<Tensor> {
    if mask.len() != logits.len() {
        return Err(Error::shape(format!(
            "masked_softmax: {} mask entries for {} logits",
            mask.len(),
            logits.len()
        )));
    }
    let (r, c) = (logits.rows(), logits.cols());
    let mut out = Tensor::zeros(r, c);
    for i in 0..r {
        let row = logits.row(i);
        let mrow = &mask[i * c..(i + 1) * c];
        let mut max = f64::NEG_INFINITY;
        for j in 0..c {
            if mrow[j] && row[j] > max {
                max = row[j];
            }
        }
        if max == f64::NEG_INFINITY {
            if lenient {
                continue; // row stays all-zero
            }
            return Err(Error::numeric(format!(
                "masked_softmax: row {i} has no valid entry"
            )));
        }
        let orow = out.row_mut(i);
        let mut denom = 0.0;
        for j in 0..c {
            if mrow[j] {
                let e = (row[j] - max).exp();
                orow[j] = e;
                denom += e;
            }
        }
        for v in orow.iter_mut() {
            *v /= denom;
        }
    }
    Ok(out)
}

/// Row-wise layer normalization with population statistics:
/// `gamma ⊙ (x - mean) / sqrt(var + eps) + beta`.
pub fn layer_norm(x: &Tensor, gamma: &[f64], beta: &[f64], eps: f64) -> Result<Tensor> {
    let (r, c) = (x.rows(), x.cols());
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape(format!(
            "layer_norm: gamma/beta length {}/{} for {} columns",
            gamma.len(),
            beta.len(),
            c
        )));
    }
    let mut out = Tensor::zeros(r, c);
    for i in 0..r {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let istd = 1.0 / (var + eps).sqrt();
        let orow = out.row_mut(i);
        for j in 0..c {
            orow[j] = gamma[j] * (row[j] - mean) * istd + beta[j];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(data: Vec<f64>) -> Tensor {
        let n = data.len();
        Tensor::new(vec![1, n], data).unwrap()
    }

    #[test]
    fn softmax_unmasked_matches_reference() {
        let out = masked_softmax(&t1(vec![1.0, 2.0, 3.0]), &[true, true, true]).unwrap();
        let expect = [0.09003057, 0.24472847, 0.66524096];
        for (o, e) in out.data().iter().zip(expect) {
            assert!((o - e).abs() < 1e-5, "{o} vs {e}");
        }
        assert!((out.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_masked_entry_gets_exact_zero() {
        let out = masked_softmax(&t1(vec![5.0, -100.0, 5.0]), &[true, false, true]).unwrap();
        assert_eq!(out.data()[1], 0.0);
        assert!((out.data()[0] - 0.5).abs() < 1e-12);
        assert!((out.data()[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_all_masked_row_is_error() {
        let err = masked_softmax(&t1(vec![1.0, 2.0]), &[false, false]).unwrap_err();
        assert!(err.to_string().contains("no valid entry"));
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let out =
            masked_softmax(&t1(vec![1000.0, 1000.0, -1000.0]), &[true, true, true]).unwrap();
        assert!(out.all_finite());
        assert!((out.data()[0] - 0.5).abs() < 1e-12);
        assert_eq!(out.data()[2], 0.0);
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(1.0) - 0.8413447460685429).abs() < 1e-6);
        assert!(gelu_scalar(-10.0).abs() < 1e-8);
    }

    #[test]
    fn gelu_matches_quadrature_oracle() {
        // Independent oracle: Φ(x) by trapezoid integration of the normal
        // density from -12 to x, far below the 1e-9 target error.
        let phi_quadrature = |x: f64| -> f64 {
            let lo = -12.0f64;
            let n = 400_000usize;
            let h = (x - lo) / n as f64;
            let mut acc = 0.5 * (normal_pdf(lo) + normal_pdf(x));
            for k in 1..n {
                acc += normal_pdf(lo + h * k as f64);
            }
            acc * h
        };
        for &x in &[-3.0, -1.0, -0.5, 0.0, 0.3, 1.0, 2.5] {
            let want = x * phi_quadrature(x);
            assert!(
                (gelu_scalar(x) - want).abs() < 1e-9,
                "gelu({x}) = {} vs quadrature {want}",
                gelu_scalar(x)
            );
        }
    }

    #[test]
    fn layer_norm_two_point_row() {
        let out = layer_norm(&t1(vec![1.0, 3.0]), &[1.0, 1.0], &[0.0, 0.0], 1e-5).unwrap();
        assert!((out.data()[0] + 0.99999).abs() < 1e-4);
        assert!((out.data()[1] - 0.99999).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_constant_row_returns_beta() {
        let out = layer_norm(
            &t1(vec![4.0, 4.0, 4.0]),
            &[2.0, 2.0, 2.0],
            &[0.5, -0.5, 0.0],
            1e-5,
        )
        .unwrap();
        assert_eq!(out.data(), &[0.5, -0.5, 0.0]);
    }

    #[test]
    fn layer_norm_zero_gamma_returns_beta() {
        let out = layer_norm(&t1(vec![1.0, 9.0]), &[0.0, 0.0], &[0.25, 0.75], 1e-5).unwrap();
        assert_eq!(out.data(), &[0.25, 0.75]);
    }

    #[test]
    fn layer_norm_normalizes_statistics() {
        let x = Tensor::new(vec![2, 4], vec![10.0, 12.0, 9.0, 13.0, -5.0, 0.0, 5.0, 2.0]).unwrap();
        let out = layer_norm(&x, &[1.0; 4], &[0.0; 4], 1e-9).unwrap();
        for i in 0..2 {
            let row = out.row(i);
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }
}
