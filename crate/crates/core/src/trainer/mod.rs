//! Deterministic optimization loop: seeded shuffled batches, adaptive
//! moments with decoupled decay, reduce-on-plateau scheduling on the dev
//! mean CCC, best-dev checkpointing, and full-video window-averaged
//! evaluation.

pub mod adamw;
pub mod checkpoint;
pub mod model;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{expand_segments, Manifest, Split};
use crate::error::{Error, Result};
use crate::metrics::{ccc, hybrid_loss, CccReport, LossConfig, NValid};
use crate::numerics::nn::{Module, ParamTape};
use crate::numerics::{Graph, NodeId};

pub use adamw::{clip_global_norm, AdamW};
pub use checkpoint::{Checkpoint, OptimizerState, TensorBlob};
pub use model::{
    build_items, load_video, AnyModel, AudioSegmentation, BehaviorVariant, FusionWindows,
    ItemInputs, ModelKind, ModelSpec, TrainItem, VideoData,
};

/// Reduce-on-plateau schedule: when the watched metric fails to improve
/// for more than `patience` consecutive epochs, multiply the learning
/// rate by `factor` (never below `floor`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub floor: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            factor: 0.5,
            patience: 3,
            floor: 1e-6,
        }
    }
}

impl PlateauConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.factor) || self.factor <= 0.0 {
            return Err(Error::config(format!(
                "plateau factor {} must lie in (0, 1)",
                self.factor
            )));
        }
        if !(self.floor > 0.0 && self.floor.is_finite()) {
            return Err(Error::config("plateau floor must be positive"));
        }
        Ok(())
    }
}

/// Plateau state over a maximized metric.
#[derive(Debug, Clone)]
pub struct Plateau {
    cfg: PlateauConfig,
    best: f64,
    stalled: usize,
}

impl Plateau {
    pub fn new(cfg: PlateauConfig) -> Self {
        Plateau {
            cfg,
            best: f64::NEG_INFINITY,
            stalled: 0,
        }
    }

    /// Feed one epoch's metric; returns the learning rate to use next.
    pub fn observe(&mut self, metric: f64, lr: f64) -> f64 {
        if metric > self.best {
            self.best = metric;
            self.stalled = 0;
            return lr;
        }
        self.stalled += 1;
        if self.stalled > self.cfg.patience {
            self.stalled = 0;
            return (lr * self.cfg.factor).max(self.cfg.floor);
        }
        lr
    }
}

/// Everything one run needs: the model, optimization hyperparameters,
/// the schedule, and the loss shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub schedule: PlateauConfig,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub loss: LossConfig,
}

impl TrainConfig {
    /// Defaults tuned per model kind.
    pub fn for_spec(model: ModelSpec, seed: u64) -> Self {
        let (learning_rate, weight_decay) = match &model {
            ModelSpec::Face { .. } => (1e-4, 0.01),
            ModelSpec::Behavior {
                variant: BehaviorVariant::Visual,
                ..
            } => (1e-4, 1e-4),
            ModelSpec::Behavior {
                variant: BehaviorVariant::Multimodal,
                ..
            } => (3e-4, 1e-3),
            ModelSpec::Audio { .. } => (2e-4, 0.01),
            ModelSpec::Dcmmoe { .. } => (1e-4, 0.01),
            ModelSpec::Raav { .. } => (1e-4, 0.01),
        };
        TrainConfig {
            model,
            batch_size: 8,
            learning_rate,
            weight_decay,
            max_epochs: 50,
            schedule: PlateauConfig::default(),
            grad_clip_norm: 1.0,
            seed,
            loss: LossConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite())
            && self.learning_rate != 0.0
        {
            return Err(Error::config(format!(
                "learning_rate {} must be finite and nonnegative",
                self.learning_rate
            )));
        }
        if self.learning_rate < 0.0 {
            return Err(Error::config("learning_rate must be nonnegative"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay must be finite and nonnegative"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs must be at least 1"));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::config("grad_clip_norm must be positive"));
        }
        self.schedule.validate()?;
        self.loss.validate()
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub learning_rate: f64,
    pub dev: CccReport,
}

/// Result of a training run. `aborted` carries a diagnostic when the
/// loss went non-finite; the checkpoint is then the last good state.
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub epochs: Vec<EpochRecord>,
    pub aborted: Option<String>,
}

/// Decorrelate the per-epoch/per-batch RNG streams from one base seed.
fn mix_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base
        ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Load and train per the manifest's train/devel splits.
pub fn train(manifest: &Manifest, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let sentinel = cfg.loss.invalid_sentinel;
    let train_videos = load_split(manifest, Split::Train, sentinel)?;
    let dev_videos = load_split(manifest, Split::Devel, sentinel)?;
    train_on_videos(&train_videos, &dev_videos, cfg)
}

/// Load every video of one split.
pub fn load_split(manifest: &Manifest, split: Split, sentinel: f64) -> Result<Vec<VideoData>> {
    let entries = manifest.split_entries(split);
    if entries.is_empty() {
        return Err(Error::data(format!("manifest has no {split} videos")));
    }
    entries.iter().map(|e| load_video(e, sentinel)).collect()
}

/// The optimization loop over already-loaded videos.
pub fn train_on_videos(
    train_videos: &[VideoData],
    dev_videos: &[VideoData],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_videos.is_empty() || dev_videos.is_empty() {
        return Err(Error::data("training needs nonempty train and devel sets"));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = AnyModel::new(&cfg.model, &mut init_rng)?;
    let mut items = Vec::new();
    for video in train_videos {
        items.extend(build_items(video, &cfg.model)?);
    }
    if items.is_empty() {
        return Err(Error::data("train split produced no items"));
    }

    let mut optimizer = AdamW::new(cfg.weight_decay);
    let mut lr = cfg.learning_rate;
    let mut plateau = Plateau::new(cfg.schedule);
    let mut best: Option<Checkpoint> = None;
    let mut best_metric: Option<f64> = None;
    let mut epochs: Vec<EpochRecord> = Vec::new();

    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64 + 1, 0));
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut g = Graph::train(mix_seed(cfg.seed, epoch as u64 + 1, batch_idx as u64 + 1));
            let mut tape = ParamTape::new();
            let mut total: Option<NodeId> = None;
            for &i in batch {
                let item = &items[i];
                let preds = model.forward(&mut g, &mut tape, &item.inputs)?;
                let hl = hybrid_loss(&mut g, &item.targets, preds, &item.valid, &cfg.loss)?;
                total = Some(match total {
                    Some(t) => g.add(t, hl.loss)?,
                    None => hl.loss,
                });
            }
            let total = total.expect("chunks are nonempty");
            let mean = g.affine(total, 1.0 / batch.len() as f64, 0.0);
            let loss_value = g.value(mean).item();
            if !loss_value.is_finite() {
                let diagnostic = format!(
                    "non-finite loss ({loss_value}) at epoch {epoch}, batch {batch_idx}"
                );
                // Fall back to the best checkpoint; failing that, to the
                // current parameters if the damage has not reached them.
                let checkpoint = match best {
                    Some(ckpt) => ckpt,
                    None if model.params().iter().all(|p| p.value.all_finite()) => {
                        Checkpoint::capture(cfg, epoch, best_metric, &model, &optimizer, lr)
                    }
                    None => {
                        return Err(Error::numeric(format!(
                            "{diagnostic}; no finite state to checkpoint"
                        )))
                    }
                };
                return Ok(TrainOutcome {
                    checkpoint,
                    epochs,
                    aborted: Some(format!("{diagnostic}; keeping the last good checkpoint")),
                });
            }
            g.backward(mean)?;
            model.zero_grads();
            model.accumulate_grads(&g, &tape);
            clip_global_norm(model.params_mut(), cfg.grad_clip_norm);
            optimizer.step(lr, model.params_mut());
            loss_sum += loss_value;
            batches += 1;
        }

        let dev = evaluate_videos(&model, &cfg.model, dev_videos)?;
        let metric = dev.overall.ccc_mean;
        if best_metric.map_or(true, |b| metric > b) {
            best_metric = Some(metric);
            best = Some(Checkpoint::capture(
                cfg,
                epoch,
                best_metric,
                &model,
                &optimizer,
                lr,
            ));
        }
        epochs.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / batches.max(1) as f64,
            learning_rate: lr,
            dev: dev.overall,
        });
        lr = plateau.observe(metric, lr);
    }

    let checkpoint = best.expect("max_epochs >= 1 guarantees one evaluation");
    Ok(TrainOutcome {
        checkpoint,
        epochs,
        aborted: None,
    })
}

/// Per-frame predictions for one whole video: every window is predicted
/// and overlapping rows are averaged per frame.
pub fn predict_video(
    model: &AnyModel,
    spec: &ModelSpec,
    video: &VideoData,
) -> Result<BTreeMap<usize, [f64; 2]>> {
    let items = build_items(video, spec)?;
    let mut spans: Vec<(usize, usize, [f64; 2])> = Vec::new();
    for item in &items {
        let preds = model.predict_item(item)?;
        if preds.rows() != item.spans.len() {
            return Err(Error::shape(format!(
                "model produced {} rows for {} spans",
                preds.rows(),
                item.spans.len()
            )));
        }
        for (row, &(start, end)) in item.spans.iter().enumerate() {
            if start < end {
                spans.push((start, end, [preds.at(row, 0), preds.at(row, 1)]));
            }
        }
    }
    expand_segments(&spans)
}

/// One video's score line in an evaluation report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VideoScore {
    pub video_id: String,
    pub report: CccReport,
}

/// Split-level evaluation: CCC over all videos' frames concatenated,
/// plus a per-video breakdown.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: CccReport,
    pub per_video: Vec<VideoScore>,
}

/// Matched (target, prediction) pairs per dimension.
type DimPairs = [(Vec<f64>, Vec<f64>); 2];

fn report_from_pairs(pairs: &DimPairs) -> Result<CccReport> {
    let mut per_dim = [0.0; 2];
    for d in 0..2 {
        if pairs[d].0.len() >= 2 {
            per_dim[d] = ccc(&pairs[d].0, &pairs[d].1)?.value;
        }
    }
    Ok(CccReport::new(
        per_dim[0],
        per_dim[1],
        NValid {
            valence: pairs[0].0.len(),
            arousal: pairs[1].0.len(),
        },
    ))
}

/// Evaluate a model over whole videos: predictions are window-averaged
/// per frame, frames without a usable label are excluded, and CCC is
/// computed per dimension over all frames concatenated across videos.
/// Errors when no dimension has enough valid frames anywhere.
pub fn evaluate_videos(
    model: &AnyModel,
    spec: &ModelSpec,
    videos: &[VideoData],
) -> Result<EvalReport> {
    let mut all: DimPairs = Default::default();
    let mut per_video = Vec::with_capacity(videos.len());
    for video in videos {
        let preds = predict_video(model, spec, video)?;
        let mut pairs: DimPairs = Default::default();
        for (&frame, pred) in &preds {
            for d in 0..2 {
                if let Some(target) = video.annotations.dim_value_if_valid(frame, d) {
                    pairs[d].0.push(target);
                    pairs[d].1.push(pred[d]);
                }
            }
        }
        per_video.push(VideoScore {
            video_id: video.id.clone(),
            report: report_from_pairs(&pairs)?,
        });
        for d in 0..2 {
            all[d].0.extend(&pairs[d].0);
            all[d].1.extend(&pairs[d].1);
        }
    }
    if all[0].0.len() < 2 && all[1].0.len() < 2 {
        return Err(Error::data(
            "evaluation found no dimension with at least 2 valid frames",
        ));
    }
    let overall = report_from_pairs(&all)?;
    Ok(EvalReport { overall, per_video })
}
