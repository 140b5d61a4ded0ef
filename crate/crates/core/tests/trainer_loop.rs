//! End-to-end behavior of the training loop on in-memory videos:
//! seeded reproducibility, zero-learning-rate stasis, evaluation
//! semantics against an independent oracle, convergence on a synthetic
//! linear task, and numeric-failure handling.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use va_fusion_core::dataio::{AnnotationTrack, FeatureStream, Modality};
use va_fusion_core::heads::FaceHeadConfig;
use va_fusion_core::metrics::ccc;
use va_fusion_core::numerics::nn::Module;
use va_fusion_core::numerics::Tensor;
use va_fusion_core::trainer::{
    build_items, evaluate_videos, predict_video, train_on_videos, AnyModel, ModelSpec,
    TrainConfig, VideoData,
};
use va_fusion_core::Error;

const SENTINEL: f64 = -5.0;

fn tiny_face_spec() -> ModelSpec {
    ModelSpec::Face {
        config: FaceHeadConfig {
            input_dim: 3,
            d_h: 8,
            num_layers: 1,
            num_heads: 2,
            window_len: 16,
            stride: 8,
            dropout_p: 0.1,
        },
    }
}

/// A video whose targets are a fixed linear readout of its face
/// features plus a little noise; everything stays inside [-1, 1].
fn linear_video(id: &str, seed: u64, frames: usize) -> VideoData {
    // Row L1 norms are 0.88, so |target| <= 0.88 + noise 0.02 <= 0.90.
    let w = [[0.5, -0.3, 0.08], [-0.2, 0.08, 0.6]];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut feature_map = BTreeMap::new();
    let mut values = Tensor::zeros(frames, 2);
    for f in 0..frames {
        let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for d in 0..2 {
            let signal: f64 = (0..3).map(|j| w[d][j] * x[j]).sum();
            let noise = rng.gen_range(-0.02..0.02);
            values.set(f, d, (signal + noise).clamp(-1.0, 1.0));
        }
        feature_map.insert(f, x);
    }
    let mut features = BTreeMap::new();
    features.insert(
        Modality::Face,
        FeatureStream {
            video_id: id.to_string(),
            modality: Modality::Face,
            fps: 8.0,
            dim: 3,
            frames: feature_map,
        },
    );
    VideoData {
        id: id.to_string(),
        fps: 8.0,
        annotations: AnnotationTrack {
            video_id: id.to_string(),
            values,
            sentinel: SENTINEL,
        },
        features,
        segments: BTreeMap::new(),
    }
}

fn linear_corpus(n_train: usize, n_dev: usize, frames: usize) -> (Vec<VideoData>, Vec<VideoData>) {
    let train = (0..n_train)
        .map(|i| linear_video(&format!("train{i}"), 100 + i as u64, frames))
        .collect();
    let dev = (0..n_dev)
        .map(|i| linear_video(&format!("dev{i}"), 900 + i as u64, frames))
        .collect();
    (train, dev)
}

#[test]
fn fixed_seed_reproduces_loss_curves_and_checkpoints() {
    let (train, dev) = linear_corpus(3, 1, 40);
    let mut cfg = TrainConfig::for_spec(tiny_face_spec(), 11);
    cfg.learning_rate = 1e-3;
    cfg.max_epochs = 3;

    let a = train_on_videos(&train, &dev, &cfg).unwrap();
    let b = train_on_videos(&train, &dev, &cfg).unwrap();
    assert!(a.aborted.is_none());
    assert_eq!(a.epochs.len(), 3);
    for (ea, eb) in a.epochs.iter().zip(&b.epochs) {
        assert_eq!(ea.mean_loss, eb.mean_loss);
        assert_eq!(ea.dev.ccc_mean, eb.dev.ccc_mean);
        assert_eq!(ea.learning_rate, eb.learning_rate);
    }
    assert_eq!(a.checkpoint.parameters, b.checkpoint.parameters);
    assert_eq!(a.checkpoint.best_dev_mean_ccc, b.checkpoint.best_dev_mean_ccc);
}

#[test]
fn zero_learning_rate_keeps_initial_parameters() {
    let (train, dev) = linear_corpus(2, 1, 40);
    let mut cfg = TrainConfig::for_spec(tiny_face_spec(), 21);
    cfg.learning_rate = 0.0;
    cfg.max_epochs = 1;

    let outcome = train_on_videos(&train, &dev, &cfg).unwrap();
    let fresh = AnyModel::new(&cfg.model, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
    for p in fresh.params() {
        let stored = outcome
            .checkpoint
            .parameters
            .get(&p.name)
            .unwrap_or_else(|| panic!("checkpoint lost {}", p.name));
        assert_eq!(stored.data, p.value.data(), "parameter {} moved", p.name);
    }
}

#[test]
fn linear_task_reaches_high_dev_ccc_within_30_epochs() {
    let (train, dev) = linear_corpus(6, 2, 60);
    let mut cfg = TrainConfig::for_spec(tiny_face_spec(), 5);
    cfg.learning_rate = 5e-3;
    cfg.max_epochs = 30;

    let outcome = train_on_videos(&train, &dev, &cfg).unwrap();
    assert!(outcome.aborted.is_none());
    let best = outcome.checkpoint.best_dev_mean_ccc.unwrap();
    assert!(
        best >= 0.95,
        "dev mean CCC only reached {best:.4} in 30 epochs"
    );
    // The checkpoint reloads into a model that reproduces the metric.
    let model = outcome.checkpoint.build_model().unwrap();
    let report = evaluate_videos(&model, &cfg.model, &dev).unwrap();
    assert!((report.overall.ccc_mean - best).abs() < 1e-12);
}

#[test]
fn evaluation_scores_exact_predictions_as_one() {
    let spec = tiny_face_spec();
    let mut model = AnyModel::new(&spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let mut video = linear_video("v", 50, 24);

    // Shrink the output layer until predictions sit strictly inside
    // [-1, 1], so they are usable as labels.
    let raw = predict_video(&model, &spec, &video).unwrap();
    let peak = raw
        .values()
        .flat_map(|p| p.iter())
        .fold(0.0f64, |m, &v| m.max(v.abs()));
    let scale = 0.5 / peak.max(0.5);
    for p in model.params_mut() {
        if p.name.starts_with("face.head_out") {
            p.value.scale_assign(scale);
        }
    }

    let preds = predict_video(&model, &spec, &video).unwrap();
    assert_eq!(preds.len(), 24, "windows must cover every frame");

    // Feed the model's own (in-range) predictions back as labels.
    let mut values = Tensor::zeros(24, 2);
    for (&frame, p) in &preds {
        assert!(p[0].abs() < 1.0 && p[1].abs() < 1.0);
        values.set(frame, 0, p[0]);
        values.set(frame, 1, p[1]);
    }
    video.annotations.values = values;

    let report = evaluate_videos(&model, &spec, &[video]).unwrap();
    assert_eq!(report.overall.ccc_valence, 1.0);
    assert_eq!(report.overall.ccc_arousal, 1.0);
    assert_eq!(report.overall.ccc_mean, 1.0);
    assert_eq!(report.overall.n_valid.valence, 24);
    assert_eq!(report.per_video.len(), 1);
    assert_eq!(report.per_video[0].report.ccc_mean, 1.0);
}

#[test]
fn evaluation_matches_single_pass_oracle() {
    let spec = tiny_face_spec();
    let model = AnyModel::new(&spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let videos: Vec<VideoData> = (0..3)
        .map(|i| linear_video(&format!("v{i}"), 300 + i, 30 + 7 * i as usize))
        .collect();

    // Oracle: accumulate every window row onto its frames directly,
    // average, filter by label validity, and run the direct-formula CCC
    // over all videos' frames concatenated.
    let mut oracle_pairs: [(Vec<f64>, Vec<f64>); 2] = Default::default();
    for video in &videos {
        let mut sums: BTreeMap<usize, ([f64; 2], usize)> = BTreeMap::new();
        for item in build_items(video, &spec).unwrap() {
            let preds = model.predict_item(&item).unwrap();
            for (row, &(start, end)) in item.spans.iter().enumerate() {
                for frame in start..end {
                    let entry = sums.entry(frame).or_insert(([0.0, 0.0], 0));
                    entry.0[0] += preds.at(row, 0);
                    entry.0[1] += preds.at(row, 1);
                    entry.1 += 1;
                }
            }
        }
        for (frame, (sum, count)) in sums {
            for d in 0..2 {
                if let Some(t) = video.annotations.dim_value_if_valid(frame, d) {
                    oracle_pairs[d].0.push(t);
                    oracle_pairs[d].1.push(sum[d] / count as f64);
                }
            }
        }
    }
    let oracle_v = ccc(&oracle_pairs[0].0, &oracle_pairs[0].1).unwrap().value;
    let oracle_a = ccc(&oracle_pairs[1].0, &oracle_pairs[1].1).unwrap().value;

    let report = evaluate_videos(&model, &spec, &videos).unwrap();
    assert_eq!(report.overall.ccc_valence, oracle_v);
    assert_eq!(report.overall.ccc_arousal, oracle_a);
    assert_eq!(report.overall.n_valid.valence, oracle_pairs[0].0.len());
    assert_eq!(report.per_video.len(), 3);
}

#[test]
fn runaway_learning_rate_surfaces_a_numeric_error() {
    let (train, dev) = linear_corpus(2, 1, 40);
    let mut cfg = TrainConfig::for_spec(tiny_face_spec(), 31);
    cfg.learning_rate = 1e308; // finite, but one step destroys the weights
    cfg.batch_size = 1;
    cfg.max_epochs = 1;

    match train_on_videos(&train, &dev, &cfg) {
        Ok(outcome) => {
            // Corruption was caught at the loss check before any dev
            // evaluation could succeed.
            let note = outcome.aborted.expect("a poisoned run cannot finish cleanly");
            assert!(note.contains("non-finite"));
        }
        Err(Error::Numeric(msg)) => {
            assert!(!msg.is_empty());
        }
        Err(other) => panic!("expected a numeric failure, got {other:?}"),
    }
}

#[test]
fn empty_splits_are_rejected() {
    let (train, dev) = linear_corpus(1, 1, 40);
    let cfg = TrainConfig::for_spec(tiny_face_spec(), 1);
    assert!(train_on_videos(&[], &dev, &cfg).is_err());
    assert!(train_on_videos(&train, &[], &cfg).is_err());
}
