use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use va_fusion_core::metrics::{ccc, hybrid_loss, mask_invalid, LossConfig};
use va_fusion_core::numerics::graph::Graph;
use va_fusion_core::numerics::tensor::Tensor;

fn pearson(t: &[f64], p: &[f64]) -> Option<f64> {
    let n = t.len() as f64;
    let mu_t = t.iter().sum::<f64>() / n;
    let mu_p = p.iter().sum::<f64>() / n;
    let mut var_t = 0.0;
    let mut var_p = 0.0;
    let mut cov = 0.0;
    for (a, b) in t.iter().zip(p) {
        var_t += (a - mu_t) * (a - mu_t);
        var_p += (b - mu_p) * (b - mu_p);
        cov += (a - mu_t) * (b - mu_p);
    }
    if var_t <= 0.0 || var_p <= 0.0 {
        return None;
    }
    Some(cov / (var_t.sqrt() * var_p.sqrt()))
}

fn pairs_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64), 2..60)
        .prop_map(|v| v.into_iter().unzip())
}

proptest! {
    #[test]
    fn ccc_is_symmetric((t, p) in pairs_strategy()) {
        let a = ccc(&t, &p).unwrap();
        let b = ccc(&p, &t).unwrap();
        prop_assert!((a.value - b.value).abs() < 1e-12);
        prop_assert_eq!(a.degenerate, b.degenerate);
    }

    #[test]
    fn ccc_invariant_under_shared_positive_affine_map(
        (t, p) in pairs_strategy(),
        scale in 0.05..4.0f64,
        shift in -2.0..2.0f64,
    ) {
        let base = ccc(&t, &p).unwrap();
        prop_assume!(!base.degenerate);
        let t2: Vec<f64> = t.iter().map(|v| scale * v + shift).collect();
        let p2: Vec<f64> = p.iter().map(|v| scale * v + shift).collect();
        let mapped = ccc(&t2, &p2).unwrap();
        prop_assume!(!mapped.degenerate);
        prop_assert!((base.value - mapped.value).abs() < 1e-9,
            "{} vs {}", base.value, mapped.value);
    }

    #[test]
    fn ccc_magnitude_never_exceeds_pearson((t, p) in pairs_strategy()) {
        let out = ccc(&t, &p).unwrap();
        if let Some(r) = pearson(&t, &p) {
            prop_assert!(out.value.abs() <= r.abs() + 1e-12,
                "|CCC| {} > |r| {}", out.value.abs(), r.abs());
        }
    }

    #[test]
    fn ccc_stays_in_unit_interval((t, p) in pairs_strategy()) {
        let out = ccc(&t, &p).unwrap();
        prop_assert!(out.value >= -1.0 - 1e-12 && out.value <= 1.0 + 1e-12);
    }

    #[test]
    fn masked_prediction_gradients_vanish(
        frames in prop::collection::vec(
            ((-1.0..1.0f64, -1.0..1.0f64), (-1.0..1.0f64, -1.0..1.0f64), (0u8..4, 0u8..4)),
            4..20,
        ),
    ) {
        let n = frames.len();
        let mut targets = Tensor::zeros(n, 2);
        let mut preds = Tensor::zeros(n, 2);
        let mut valid = vec![false; n * 2];
        for (i, ((tv, ta), (pv, pa), (mv, ma))) in frames.iter().enumerate() {
            targets.set(i, 0, *tv);
            targets.set(i, 1, *ta);
            preds.set(i, 0, *pv);
            preds.set(i, 1, *pa);
            valid[i * 2] = *mv > 0; // valid with prob 3/4
            valid[i * 2 + 1] = *ma > 0;
        }
        let cfg = LossConfig { lambda_ccc: 0.5, ..LossConfig::default() };
        let mut g = Graph::eval();
        let pid = g.leaf(preds);
        let out = hybrid_loss(&mut g, &targets, pid, &valid, &cfg).unwrap();
        g.backward(out.loss).unwrap();
        let grad = g.grad(pid);
        for i in 0..n {
            for d in 0..2 {
                if !valid[i * 2 + d] {
                    prop_assert_eq!(grad.at(i, d), 0.0);
                }
            }
        }
    }

    #[test]
    fn mask_invalid_matches_scalar_rule(
        labels in prop::collection::vec((-6.0..6.0f64, -6.0..6.0f64), 1..30),
    ) {
        let n = labels.len();
        let mut t = Tensor::zeros(n, 2);
        for (i, (v, a)) in labels.iter().enumerate() {
            t.set(i, 0, *v);
            t.set(i, 1, *a);
        }
        let mask = mask_invalid(&t, -5.0).unwrap();
        for (i, (v, a)) in labels.iter().enumerate() {
            prop_assert_eq!(mask[i * 2], *v != -5.0 && (-1.0..=1.0).contains(v));
            prop_assert_eq!(mask[i * 2 + 1], *a != -5.0 && (-1.0..=1.0).contains(a));
        }
    }
}

#[test]
fn graph_ccc_matches_oracle_on_1000_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(424242);
    let cfg = LossConfig {
        weight_valence: 1.0,
        weight_arousal: 0.0,
        lambda_ccc: 1.0,
        invalid_sentinel: -5.0,
    };
    for trial in 0..1000 {
        let n = rng.gen_range(2..40);
        let mut targets = Tensor::zeros(n, 2);
        let mut preds = Tensor::zeros(n, 2);
        let mut t_col = Vec::with_capacity(n);
        let mut p_col = Vec::with_capacity(n);
        for i in 0..n {
            let t: f64 = rng.gen_range(-1.0..1.0);
            let p: f64 = rng.gen_range(-1.0..1.0);
            targets.set(i, 0, t);
            targets.set(i, 1, t);
            preds.set(i, 0, p);
            preds.set(i, 1, p);
            t_col.push(t);
            p_col.push(p);
        }
        let oracle = ccc(&t_col, &p_col).unwrap();
        let mut g = Graph::eval();
        let pid = g.leaf(preds);
        let out = hybrid_loss(&mut g, &targets, pid, &vec![true; n * 2], &cfg).unwrap();
        let graph_ccc = 1.0 - g.value(out.loss).item();
        assert!(
            (graph_ccc - oracle.value).abs() < 1e-10,
            "trial {trial}: graph {graph_ccc} vs oracle {}",
            oracle.value
        );
    }
}
