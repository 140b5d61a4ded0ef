//! Smoothing invariants (idempotence, threshold monotonicity) and
//! equivalence against an independently written run-length-encoding
//! oracle over a large random corpus of series.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use va_fusion_core::dataio::AnnotationTrack;
use va_fusion_core::filter::{keep_segment, smooth_series, FilterConfig, MouthSeries};
use va_fusion_core::numerics::Tensor;

/// Run-length view of the smoothing pass: encode the series as
/// (value, length) runs, flip qualifying runs wholesale, and decode.
mod oracle {
    use va_fusion_core::filter::FilterConfig;

    fn encode(series: &[bool]) -> Vec<(bool, usize)> {
        let mut runs: Vec<(bool, usize)> = Vec::new();
        for &v in series {
            match runs.last_mut() {
                Some((val, len)) if *val == v => *len += 1,
                _ => runs.push((v, 1)),
            }
        }
        runs
    }

    fn merge(runs: Vec<(bool, usize)>) -> Vec<(bool, usize)> {
        let mut out: Vec<(bool, usize)> = Vec::new();
        for (v, len) in runs {
            match out.last_mut() {
                Some((val, l)) if *val == v => *l += len,
                _ => out.push((v, len)),
            }
        }
        out
    }

    fn decode(runs: &[(bool, usize)]) -> Vec<bool> {
        runs.iter()
            .flat_map(|&(v, len)| std::iter::repeat(v).take(len))
            .collect()
    }

    pub fn smooth(open: &[bool], fps: f64, cfg: &FilterConfig) -> Vec<bool> {
        let gap = cfg.max_gap_s * fps;
        let burst = cfg.min_burst_s * fps;

        // Closing: interior false runs (runs alternate, so any false run
        // that is neither first nor last is flanked by true) strictly
        // shorter than the gap threshold become true.
        let mut runs = encode(open);
        let n = runs.len();
        for i in 0..n {
            if !runs[i].0 && i > 0 && i + 1 < n && (runs[i].1 as f64) < gap {
                runs[i].0 = true;
            }
        }
        let closed = merge(runs);

        // Opening: any true run strictly shorter than the burst
        // threshold becomes false.
        let mut runs = closed;
        for r in &mut runs {
            if r.0 && (r.1 as f64) < burst {
                r.0 = false;
            }
        }
        decode(&merge(runs))
    }
}

#[test]
fn smoothing_matches_rle_oracle_on_random_series() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x51ee7);
    for case in 0..1000 {
        let len = rng.gen_range(1..=200);
        let density = rng.gen_range(0.05..0.95);
        let open: Vec<bool> = (0..len).map(|_| rng.gen_bool(density)).collect();
        let fps = rng.gen_range(5.0..60.0);
        let cfg = FilterConfig {
            max_gap_s: rng.gen_range(0.0..1.5),
            min_burst_s: rng.gen_range(0.0..1.5),
            ..FilterConfig::default()
        };
        let got = smooth_series(&open, fps, &cfg);
        let want = oracle::smooth(&open, fps, &cfg);
        assert_eq!(got, want, "case {case}: len {len} fps {fps} cfg {cfg:?}");
    }
}

fn series_strategy() -> impl Strategy<Value = Vec<bool>> {
    prop::collection::vec(any::<bool>(), 1..120)
}

fn threshold() -> impl Strategy<Value = f64> {
    0.0..1.2f64
}

proptest! {
    #[test]
    fn smoothing_is_idempotent(
        open in series_strategy(),
        gap in threshold(),
        burst in threshold(),
        fps in 5.0..60.0f64,
    ) {
        let cfg = FilterConfig { max_gap_s: gap, min_burst_s: burst, ..FilterConfig::default() };
        let once = smooth_series(&open, fps, &cfg);
        let twice = smooth_series(&once, fps, &cfg);
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn wider_gap_threshold_never_closes_open_frames(
        open in series_strategy(),
        gap_lo in threshold(),
        gap_extra in threshold(),
        burst in threshold(),
        fps in 5.0..60.0f64,
    ) {
        let lo = FilterConfig { max_gap_s: gap_lo, min_burst_s: burst, ..FilterConfig::default() };
        let hi = FilterConfig { max_gap_s: gap_lo + gap_extra, ..lo };
        let out_lo = smooth_series(&open, fps, &lo);
        let out_hi = smooth_series(&open, fps, &hi);
        for (f, (&a, &b)) in out_lo.iter().zip(&out_hi).enumerate() {
            prop_assert!(!a || b, "frame {f} open under gap {gap_lo} but closed under larger gap");
        }
    }

    #[test]
    fn longer_burst_floor_never_opens_closed_frames(
        open in series_strategy(),
        gap in threshold(),
        burst_lo in threshold(),
        burst_extra in threshold(),
        fps in 5.0..60.0f64,
    ) {
        let lo = FilterConfig { max_gap_s: gap, min_burst_s: burst_lo, ..FilterConfig::default() };
        let hi = FilterConfig { min_burst_s: burst_lo + burst_extra, ..lo };
        let out_lo = smooth_series(&open, fps, &lo);
        let out_hi = smooth_series(&open, fps, &hi);
        for (f, (&a, &b)) in out_lo.iter().zip(&out_hi).enumerate() {
            prop_assert!(!b || a, "frame {f} open under burst {} but closed under smaller", burst_lo + burst_extra);
        }
    }

    #[test]
    fn keeping_is_monotone_nonincreasing_in_both_thresholds(
        open in series_strategy(),
        valid in prop::collection::vec(any::<bool>(), 1..120),
        open_lo in 0.0..3.0f64,
        open_extra in 0.0..3.0f64,
        cov_lo in 0.0..1.0f64,
        cov_extra in 0.0..1.0f64,
        fps in 5.0..30.0f64,
    ) {
        let frames = open.len();
        let series = MouthSeries::new("v", fps, open).unwrap();
        let mut values = Tensor::full(valid.len(), 2, -5.0);
        for (f, &ok) in valid.iter().enumerate() {
            if ok {
                values.set(f, 0, 0.1);
                values.set(f, 1, 0.1);
            }
        }
        let ann = AnnotationTrack { video_id: "v".into(), values, sentinel: -5.0 };
        let seg = (0.0, frames as f64 / fps);

        let lo = FilterConfig {
            min_open_s_per_segment: open_lo,
            min_coverage_frac: cov_lo,
            ..FilterConfig::default()
        };
        let hi = FilterConfig {
            min_open_s_per_segment: open_lo + open_extra,
            min_coverage_frac: (cov_lo + cov_extra).min(1.0),
            ..lo
        };
        let keep_lo = keep_segment(seg, &series, &ann, &lo).keep;
        let keep_hi = keep_segment(seg, &series, &ann, &hi).keep;
        prop_assert!(!keep_hi || keep_lo, "kept under strict thresholds but dropped under loose ones");
    }
}
