//! Concordance correlation (CCC), the hybrid CCC+MAE training loss, and
//! invalid-label masking.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::tensor::Tensor;

pub const DEGENERATE_DENOM_EPS: f64 = 1e-12;

/// Concordance correlation of two equal-length sequences with population
/// (1/N) statistics:
///
/// ```text
/// CCC = 2·cov(t,p) / (var(t) + var(p) + (mean(t) - mean(p))²)
/// ```
///
/// A denominator below `1e-12` means both sequences are constant with
/// equal means; the pair is uninformative and the result is 0 with
/// `degenerate` set rather than a blow-up.
#[derive(Debug, Clone, Copy)]
pub struct CccOutcome {
    pub value: f64,
    pub degenerate: bool,
}

pub fn ccc(targets: &[f64], predictions: &[f64]) -> Result<CccOutcome> {
    if targets.len() != predictions.len() {
        return Err(Error::shape(format!(
            "ccc: {} targets vs {} predictions",
            targets.len(),
            predictions.len()
        )));
    }
    if targets.len() < 2 {
        return Err(Error::numeric(format!(
            "ccc: need at least 2 frames, got {}",
            targets.len()
        )));
    }
    if !targets.iter().chain(predictions).all(|v| v.is_finite()) {
        return Err(Error::numeric("ccc: non-finite input"));
    }
    let n = targets.len() as f64;
    let mu_t = targets.iter().sum::<f64>() / n;
    let mu_p = predictions.iter().sum::<f64>() / n;
    let mut var_t = 0.0;
    let mut var_p = 0.0;
    let mut cov = 0.0;
    for (t, p) in targets.iter().zip(predictions) {
        let dt = t - mu_t;
        let dp = p - mu_p;
        var_t += dt * dt;
        var_p += dp * dp;
        cov += dt * dp;
    }
    var_t /= n;
    var_p /= n;
    cov /= n;
    let mean_diff = mu_t - mu_p;
    let denom = var_t + var_p + mean_diff * mean_diff;
    if denom < DEGENERATE_DENOM_EPS {
        return Ok(CccOutcome {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(CccOutcome {
        value: 2.0 * cov / denom,
        degenerate: false,
    })
}

/// Per-dimension valid-frame counts for a [`CccReport`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct NValid {
    pub valence: usize,
    pub arousal: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CccReport {
    pub ccc_valence: f64,
    pub ccc_arousal: f64,
    pub ccc_mean: f64,
    pub n_valid: NValid,
}

impl CccReport {
    pub fn new(ccc_valence: f64, ccc_arousal: f64, n_valid: NValid) -> Self {
        CccReport {
            ccc_valence,
            ccc_arousal,
            ccc_mean: (ccc_valence + ccc_arousal) / 2.0,
            n_valid,
        }
    }

    /// CCC per dimension over the valid frames of `[N x 2]` target and
    /// prediction tensors. A dimension with fewer than 2 valid frames or a
    /// degenerate denominator scores 0.
    pub fn compute(targets: &Tensor, predictions: &Tensor, valid: &[bool]) -> Result<CccReport> {
        check_frames_shape(targets, predictions, valid)?;
        let mut per_dim = [0.0; 2];
        let mut counts = [0usize; 2];
        for d in 0..2 {
            let mut t = Vec::new();
            let mut p = Vec::new();
            for i in 0..targets.rows() {
                if valid[i * 2 + d] {
                    t.push(targets.at(i, d));
                    p.push(predictions.at(i, d));
                }
            }
            counts[d] = t.len();
            if t.len() >= 2 {
                per_dim[d] = ccc(&t, &p)?.value;
            }
        }
        Ok(CccReport::new(
            per_dim[0],
            per_dim[1],
            NValid {
                valence: counts[0],
                arousal: counts[1],
            },
        ))
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub weight_valence: f64,
    pub weight_arousal: f64,
    /// Weight of the (1 - CCC) term; the MAE term gets `1 - lambda_ccc`.
    pub lambda_ccc: f64,
    /// Label value marking an unannotated frame; must lie outside [-1, 1].
    pub invalid_sentinel: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            weight_valence: 0.5,
            weight_arousal: 0.5,
            lambda_ccc: 1.0,
            invalid_sentinel: -5.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.weight_valence < 0.0 || self.weight_arousal < 0.0 {
            return Err(Error::config("loss weights must be nonnegative"));
        }
        if self.weight_valence + self.weight_arousal <= 0.0 {
            return Err(Error::config("loss weights must not both be zero"));
        }
        if !(0.0..=1.0).contains(&self.lambda_ccc) {
            return Err(Error::config(format!(
                "lambda_ccc must lie in [0,1], got {}",
                self.lambda_ccc
            )));
        }
        if (-1.0..=1.0).contains(&self.invalid_sentinel) {
            return Err(Error::config(format!(
                "invalid_sentinel {} must lie outside [-1,1]",
                self.invalid_sentinel
            )));
        }
        Ok(())
    }
}

/// `[N x 2]` validity mask: a label is valid iff it differs from the
/// sentinel and lies inside [-1, 1] (NaN is never valid).
pub fn mask_invalid(targets: &Tensor, sentinel: f64) -> Result<Vec<bool>> {
    if targets.cols() != 2 {
        return Err(Error::shape(format!(
            "mask_invalid: expected [N x 2] targets, got {:?}",
            targets.shape()
        )));
    }
    Ok(targets
        .data()
        .iter()
        .map(|&v| v != sentinel && (-1.0..=1.0).contains(&v))
        .collect())
}

/// Flags raised while assembling a [`hybrid_loss`] value.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossFlags {
    /// Dimension skipped: fewer than 2 valid frames (contributed 0).
    pub skipped: [bool; 2],
    /// Dimension hit the degenerate CCC denominator (CCC term forced 0).
    pub degenerate: [bool; 2],
}

pub struct HybridLoss {
    pub loss: NodeId,
    pub flags: LossFlags,
}

/// Differentiable training loss over one window:
/// `Σ_d w_d · [λ·(1 − CCC_d) + (1−λ)·MAE_d]` with per-dimension validity
/// masking. The gradient w.r.t. predictions at masked frames is exactly
/// zero: every path multiplies by the 0/1 mask (the MAE path passes
/// through `abs` at exactly 0, whose subgradient here is 0).
pub fn hybrid_loss(
    g: &mut Graph,
    targets: &Tensor,
    predictions: NodeId,
    valid: &[bool],
    cfg: &LossConfig,
) -> Result<HybridLoss> {
    cfg.validate()?;
    check_frames_shape(targets, g.value(predictions), valid)?;
    let n = targets.rows();
    let mut flags = LossFlags::default();
    let mut total: Option<NodeId> = None;
    let weights = [cfg.weight_valence, cfg.weight_arousal];

    for d in 0..2 {
        let mask_col: Vec<f64> = (0..n)
            .map(|i| if valid[i * 2 + d] { 1.0 } else { 0.0 })
            .collect();
        let n_valid = mask_col.iter().filter(|&&m| m == 1.0).count();
        if n_valid < 2 {
            flags.skipped[d] = true;
            continue;
        }
        let nv = n_valid as f64;

        // Constant (target-side) statistics over valid frames.
        let t_col: Vec<f64> = (0..n).map(|i| targets.at(i, d)).collect();
        let mu_t = t_col
            .iter()
            .zip(&mask_col)
            .map(|(t, m)| t * m)
            .sum::<f64>()
            / nv;
        let dt_col: Vec<f64> = t_col
            .iter()
            .zip(&mask_col)
            .map(|(t, m)| (t - mu_t) * m)
            .collect();
        let var_t = dt_col.iter().map(|v| v * v).sum::<f64>() / nv;

        let mask_node = g.leaf(Tensor::new(vec![n, 1], mask_col.clone())?);
        let p_col = g.slice_cols(predictions, d, d + 1)?;
        let pm = g.mul(p_col, mask_node)?;
        let sum_p = g.sum_all(pm);
        let mu_p = g.affine(sum_p, 1.0 / nv, 0.0);
        let centered = g.sub_row(p_col, mu_p)?;
        let dp = g.mul(centered, mask_node)?;

        let dt_node = g.leaf(Tensor::new(vec![n, 1], dt_col)?);
        let cov_terms = g.mul(dp, dt_node)?;
        let cov_sum = g.sum_all(cov_terms);
        let cov = g.affine(cov_sum, 1.0 / nv, 0.0);
        let dp2 = g.mul(dp, dp)?;
        let var_p_sum = g.sum_all(dp2);
        let var_p = g.affine(var_p_sum, 1.0 / nv, 0.0);

        let mean_diff = g.affine(mu_p, -1.0, mu_t); // mu_t - mu_p
        let mean_diff_sq = g.mul(mean_diff, mean_diff)?;
        let denom_partial = g.add(var_p, mean_diff_sq)?;
        let denom = g.affine(denom_partial, 1.0, var_t);

        // The graph is eager, so the degenerate branch is decided now.
        let one_minus_ccc = if g.value(denom).item() < DEGENERATE_DENOM_EPS {
            flags.degenerate[d] = true;
            g.scalar(1.0)
        } else {
            let two_cov = g.scale(cov, 2.0);
            let ccc_node = g.div(two_cov, denom)?;
            g.affine(ccc_node, -1.0, 1.0)
        };

        let mut dim_loss = g.scale(one_minus_ccc, cfg.lambda_ccc);
        if cfg.lambda_ccc < 1.0 {
            let tm_col: Vec<f64> = t_col.iter().zip(&mask_col).map(|(t, m)| t * m).collect();
            let tm_node = g.leaf(Tensor::new(vec![n, 1], tm_col)?);
            let err = g.sub(pm, tm_node)?;
            let err_abs = g.abs(err);
            let err_sum = g.sum_all(err_abs);
            let mae = g.affine(err_sum, 1.0 / nv, 0.0);
            let mae_term = g.scale(mae, 1.0 - cfg.lambda_ccc);
            dim_loss = g.add(dim_loss, mae_term)?;
        }
        let weighted = g.scale(dim_loss, weights[d]);
        total = Some(match total {
            Some(t) => g.add(t, weighted)?,
            None => weighted,
        });
    }

    let loss = match total {
        Some(t) => t,
        None => g.scalar(0.0),
    };
    Ok(HybridLoss { loss, flags })
}

fn check_frames_shape(targets: &Tensor, predictions: &Tensor, valid: &[bool]) -> Result<()> {
    if targets.cols() != 2 || predictions.cols() != 2 || targets.rows() != predictions.rows() {
        return Err(Error::shape(format!(
            "expected matching [N x 2] frames, got targets {:?} vs predictions {:?}",
            targets.shape(),
            predictions.shape()
        )));
    }
    if valid.len() != targets.len() {
        return Err(Error::shape(format!(
            "validity mask has {} entries for {} labels",
            valid.len(),
            targets.len()
        )));
    }
    Ok(())
}
