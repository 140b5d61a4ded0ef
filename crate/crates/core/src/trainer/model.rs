//! Model dispatch and training-item assembly.
//!
//! [`ModelSpec`] names one of the five trainable architectures together
//! with its windowing rules, [`AnyModel`] instantiates it and routes
//! forward passes, and [`build_items`] slices one video's streams into
//! fixed-shape training items with frame-aligned targets, validity
//! masks, and the annotation-frame span each output row covers.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::csv_io::{load_annotation_csv, load_feature_csv, load_segment_csv};
use crate::dataio::{
    expand_segment_vectors, make_windows, sec_to_frame_range, segment_audio, AnnotationTrack,
    FeatureStream, ManifestEntry, Modality, SegmentStream,
};
use crate::error::{Error, Result};
use crate::fusion::{Dcmmoe, DcmmoeConfig, ModalityBundle, ModalityStream, Raav, RaavConfig};
use crate::heads::{
    AudioHead, AudioHeadConfig, BehaviorHead, BehaviorHeadConfig, FaceHead, FaceHeadConfig,
};
use crate::numerics::nn::{Module, ParamTape, Parameter};
use crate::numerics::{Graph, NodeId, Tensor};

/// The five trainable architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Face,
    Behavior,
    Audio,
    Dcmmoe,
    Raav,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Face => "face",
            ModelKind::Behavior => "behavior",
            ModelKind::Audio => "audio",
            ModelKind::Dcmmoe => "dcmmoe",
            ModelKind::Raav => "raav",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "face" => Ok(ModelKind::Face),
            "behavior" => Ok(ModelKind::Behavior),
            "audio" => Ok(ModelKind::Audio),
            "dcmmoe" => Ok(ModelKind::Dcmmoe),
            "raav" => Ok(ModelKind::Raav),
            other => Err(Error::config(format!(
                "unknown model kind {other:?}; expected face, behavior, audio, dcmmoe, or raav"
            ))),
        }
    }
}

/// Which segment-embedding stream a behavior head trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorVariant {
    Visual,
    Multimodal,
}

impl BehaviorVariant {
    pub fn modality(self) -> Modality {
        match self {
            BehaviorVariant::Visual => Modality::BehaviorVisual,
            BehaviorVariant::Multimodal => Modality::BehaviorMultimodal,
        }
    }
}

/// Frame windowing for the fusion models, which slide over the
/// annotation timeline rather than a single feature stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionWindows {
    pub window_len: usize,
    pub stride: usize,
}

impl Default for FusionWindows {
    fn default() -> Self {
        FusionWindows {
            window_len: 64,
            stride: 32,
        }
    }
}

impl FusionWindows {
    pub fn validate(&self) -> Result<()> {
        if self.window_len == 0 || self.stride == 0 {
            return Err(Error::config(
                "fusion windows: window_len and stride must be positive",
            ));
        }
        if self.stride > self.window_len {
            return Err(Error::config(format!(
                "fusion windows: stride {} > window_len {} leaves frames uncovered",
                self.stride, self.window_len
            )));
        }
        Ok(())
    }
}

/// Sliding-window segmentation of the audio timeline, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AudioSegmentation {
    pub window_s: f64,
    pub hop_s: f64,
}

impl Default for AudioSegmentation {
    fn default() -> Self {
        AudioSegmentation {
            window_s: 4.0,
            hop_s: 4.0,
        }
    }
}

impl AudioSegmentation {
    pub fn validate(&self) -> Result<()> {
        if !(self.window_s > 0.0 && self.window_s.is_finite())
            || !(self.hop_s > 0.0 && self.hop_s.is_finite())
        {
            return Err(Error::config(
                "audio segmentation: window_s and hop_s must be positive",
            ));
        }
        Ok(())
    }
}

/// A model choice plus everything needed to slice videos into its
/// training items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Face {
        #[serde(default)]
        config: FaceHeadConfig,
    },
    Behavior {
        variant: BehaviorVariant,
        #[serde(default)]
        config: BehaviorHeadConfig,
    },
    Audio {
        #[serde(default)]
        config: AudioHeadConfig,
        #[serde(default)]
        segmentation: AudioSegmentation,
    },
    Dcmmoe {
        config: DcmmoeConfig,
        #[serde(default)]
        windows: FusionWindows,
    },
    Raav {
        config: RaavConfig,
        #[serde(default)]
        windows: FusionWindows,
    },
}

impl ModelSpec {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelSpec::Face { .. } => ModelKind::Face,
            ModelSpec::Behavior { .. } => ModelKind::Behavior,
            ModelSpec::Audio { .. } => ModelKind::Audio,
            ModelSpec::Dcmmoe { .. } => ModelKind::Dcmmoe,
            ModelSpec::Raav { .. } => ModelKind::Raav,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Face { config } => config.validate(),
            ModelSpec::Behavior { config, .. } => config.validate(),
            ModelSpec::Audio {
                config,
                segmentation,
            } => {
                config.validate()?;
                segmentation.validate()
            }
            ModelSpec::Dcmmoe { config, windows } => {
                config.validate()?;
                windows.validate()?;
                check_fusion_ids(config.modality_dims.keys())
            }
            ModelSpec::Raav { config, windows } => {
                config.validate()?;
                windows.validate()?;
                check_fusion_ids(config.visual_dims.keys())
            }
        }
    }
}

/// Fusion configs key streams by modality id; reject ids the data layer
/// cannot resolve to a stream.
fn check_fusion_ids<'a>(ids: impl Iterator<Item = &'a String>) -> Result<()> {
    for id in ids {
        Modality::from_str(id)?;
    }
    Ok(())
}

/// Any of the five architectures behind one forward/predict surface.
pub enum AnyModel {
    Face(FaceHead),
    Behavior(BehaviorHead),
    Audio(AudioHead),
    Dcmmoe(Dcmmoe),
    Raav(Raav),
}

impl AnyModel {
    pub fn new(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        Ok(match spec {
            ModelSpec::Face { config } => AnyModel::Face(FaceHead::new("face", config.clone(), rng)?),
            ModelSpec::Behavior { config, .. } => {
                AnyModel::Behavior(BehaviorHead::new("behavior", config.clone(), rng)?)
            }
            ModelSpec::Audio { config, .. } => {
                AnyModel::Audio(AudioHead::new("audio", config.clone(), rng)?)
            }
            ModelSpec::Dcmmoe { config, .. } => AnyModel::Dcmmoe(Dcmmoe::new(config.clone(), rng)?),
            ModelSpec::Raav { config, .. } => AnyModel::Raav(Raav::new(config.clone(), rng)?),
        })
    }

    /// Build the prediction graph for one item; output is `[R x 2]` with
    /// one row per item target row.
    pub fn forward(
        &self,
        g: &mut Graph,
        tape: &mut ParamTape,
        inputs: &ItemInputs,
    ) -> Result<NodeId> {
        match (self, inputs) {
            (AnyModel::Face(m), ItemInputs::Single(x)) => {
                let x = g.leaf(x.clone());
                m.forward(g, tape, x)
            }
            (AnyModel::Behavior(m), ItemInputs::Single(x)) => {
                let x = g.leaf(x.clone());
                m.forward(g, tape, x)
            }
            (AnyModel::Audio(m), ItemInputs::Single(x)) => {
                let x = g.leaf(x.clone());
                m.forward(g, tape, x)
            }
            (AnyModel::Dcmmoe(m), ItemInputs::Bundle { bundle, .. }) => m.forward(g, tape, bundle),
            (AnyModel::Raav(m), ItemInputs::Bundle { bundle, audio }) => {
                m.forward(g, tape, bundle, audio.as_ref())
            }
            _ => Err(Error::shape(
                "item inputs were assembled for a different model kind",
            )),
        }
    }

    /// Deterministic eval-mode predictions for one item.
    pub fn predict_item(&self, item: &TrainItem) -> Result<Tensor> {
        match (self, &item.inputs) {
            (AnyModel::Face(m), ItemInputs::Single(x)) => m.predict(x),
            (AnyModel::Behavior(m), ItemInputs::Single(x)) => m.predict(x),
            (AnyModel::Audio(m), ItemInputs::Single(x)) => m.predict(x),
            (AnyModel::Dcmmoe(m), ItemInputs::Bundle { bundle, .. }) => m.predict(bundle),
            (AnyModel::Raav(m), ItemInputs::Bundle { bundle, audio }) => {
                m.predict(bundle, audio.as_ref())
            }
            _ => Err(Error::shape(
                "item inputs were assembled for a different model kind",
            )),
        }
    }
}

impl Module for AnyModel {
    fn params(&self) -> Vec<&Parameter> {
        match self {
            AnyModel::Face(m) => m.params(),
            AnyModel::Behavior(m) => m.params(),
            AnyModel::Audio(m) => m.params(),
            AnyModel::Dcmmoe(m) => m.params(),
            AnyModel::Raav(m) => m.params(),
        }
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        match self {
            AnyModel::Face(m) => m.params_mut(),
            AnyModel::Behavior(m) => m.params_mut(),
            AnyModel::Audio(m) => m.params_mut(),
            AnyModel::Dcmmoe(m) => m.params_mut(),
            AnyModel::Raav(m) => m.params_mut(),
        }
    }
}

/// Inputs for one training item, shaped for the model that will consume
/// them.
pub enum ItemInputs {
    /// One `[T x D]` window for a unimodal head.
    Single(Tensor),
    /// Frame-aligned modality streams (plus the raw audio feature window
    /// for models that read audio through a separate path).
    Bundle {
        bundle: ModalityBundle,
        audio: Option<Tensor>,
    },
}

/// One fixed-shape training example cut from a video.
pub struct TrainItem {
    pub video_id: String,
    pub inputs: ItemInputs,
    /// `[R x 2]` targets, one row per model output row.
    pub targets: Tensor,
    /// Flattened `R*2` mask; rows the loss may use.
    pub valid: Vec<bool>,
    /// Annotation-frame span `[start, end)` each output row covers;
    /// `(0, 0)` marks a padding row that predicts nothing.
    pub spans: Vec<(usize, usize)>,
}

/// Everything loaded for one video.
pub struct VideoData {
    pub id: String,
    pub fps: f64,
    pub annotations: AnnotationTrack,
    pub features: BTreeMap<Modality, FeatureStream>,
    pub segments: BTreeMap<Modality, SegmentStream>,
}

/// Load all streams a manifest entry points at.
pub fn load_video(entry: &ManifestEntry, sentinel: f64) -> Result<VideoData> {
    let annotations = load_annotation_csv(&entry.annotations, &entry.id, sentinel)?;
    let mut features = BTreeMap::new();
    for (&modality, path) in &entry.features {
        features.insert(
            modality,
            load_feature_csv(path, &entry.id, modality, entry.fps)?,
        );
    }
    let mut segments = BTreeMap::new();
    for (&modality, path) in &entry.segments {
        segments.insert(modality, load_segment_csv(path, &entry.id, modality)?);
    }
    Ok(VideoData {
        id: entry.id.clone(),
        fps: entry.fps,
        annotations,
        features,
        segments,
    })
}

/// Slice one video into training items for `spec`.
pub fn build_items(video: &VideoData, spec: &ModelSpec) -> Result<Vec<TrainItem>> {
    match spec {
        ModelSpec::Face { config } => face_items(video, config),
        ModelSpec::Behavior { variant, config } => behavior_items(video, *variant, config),
        ModelSpec::Audio {
            config,
            segmentation,
        } => audio_items(video, config, segmentation),
        ModelSpec::Dcmmoe { config, windows } => {
            fusion_items(video, &config.modality_dims, windows, None)
        }
        ModelSpec::Raav { config, windows } => fusion_items(
            video,
            &config.visual_dims,
            windows,
            Some(config.audio_dim),
        ),
    }
}

fn feature_stream<'a>(video: &'a VideoData, modality: Modality) -> Result<&'a FeatureStream> {
    video.features.get(&modality).ok_or_else(|| {
        Error::data(format!(
            "video {}: no {modality} feature stream in manifest",
            video.id
        ))
    })
}

fn check_dim(video: &VideoData, what: &str, have: usize, want: usize) -> Result<()> {
    if have != want {
        return Err(Error::shape(format!(
            "video {}: {what} features are {have}-dim, model expects {want}",
            video.id
        )));
    }
    Ok(())
}

fn face_items(video: &VideoData, cfg: &FaceHeadConfig) -> Result<Vec<TrainItem>> {
    let stream = feature_stream(video, Modality::Face)?;
    check_dim(video, "face", stream.dim, cfg.input_dim)?;
    let starts = make_windows(stream.total_frames(), cfg.window_len, cfg.stride)?;
    let mut items = Vec::with_capacity(starts.len());
    for start in starts {
        let (features, padded) = stream.window(start, cfg.window_len)?;
        let (targets, mut valid) = video.annotations.window_targets(start, cfg.window_len);
        let mut spans = Vec::with_capacity(cfg.window_len);
        for (i, &pad) in padded.iter().enumerate() {
            if pad {
                valid[2 * i] = false;
                valid[2 * i + 1] = false;
                spans.push((0, 0));
            } else {
                spans.push((start + i, start + i + 1));
            }
        }
        items.push(TrainItem {
            video_id: video.id.clone(),
            inputs: ItemInputs::Single(features),
            targets,
            valid,
            spans,
        });
    }
    Ok(items)
}

fn behavior_items(
    video: &VideoData,
    variant: BehaviorVariant,
    cfg: &BehaviorHeadConfig,
) -> Result<Vec<TrainItem>> {
    let modality = variant.modality();
    let stream = video.segments.get(&modality).ok_or_else(|| {
        Error::data(format!(
            "video {}: no {modality} segment stream in manifest",
            video.id
        ))
    })?;
    check_dim(video, modality.as_str(), stream.dim, cfg.input_dim)?;
    let n = stream.segments.len();
    let starts = make_windows(n, cfg.window_len, cfg.stride)?;
    let sentinel = video.annotations.sentinel;
    let mut items = Vec::with_capacity(starts.len());
    for start in starts {
        let mut features = Tensor::zeros(cfg.window_len, cfg.input_dim);
        let mut targets = Tensor::full(cfg.window_len, 2, sentinel);
        let mut valid = vec![false; cfg.window_len * 2];
        let mut spans = vec![(0usize, 0usize); cfg.window_len];
        for row in 0..cfg.window_len {
            // Short streams are right-padded by repeating the last
            // segment; the causal stack makes padding invisible to the
            // real rows, and the mask keeps it out of the loss.
            let idx = (start + row).min(n - 1);
            let seg = &stream.segments[idx];
            features.row_mut(row).copy_from_slice(&seg.embedding);
            if start + row >= n {
                continue;
            }
            spans[row] = (seg.start, seg.end);
            for d in 0..2 {
                if let Some(mean) = span_target_mean(&video.annotations, seg.start, seg.end, d) {
                    targets.set(row, d, mean);
                    valid[2 * row + d] = true;
                }
            }
        }
        items.push(TrainItem {
            video_id: video.id.clone(),
            inputs: ItemInputs::Single(features),
            targets,
            valid,
            spans,
        });
    }
    Ok(items)
}

/// Mean annotation over `[start, end)` for dimension `d`, if any frame
/// in the span carries a usable label.
fn span_target_mean(ann: &AnnotationTrack, start: usize, end: usize, d: usize) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for frame in start..end {
        if let Some(v) = ann.dim_value_if_valid(frame, d) {
            sum += v;
            count += 1;
        }
    }
    (count > 0).then(|| sum / count as f64)
}

fn audio_items(
    video: &VideoData,
    cfg: &AudioHeadConfig,
    seg: &AudioSegmentation,
) -> Result<Vec<TrainItem>> {
    let stream = feature_stream(video, Modality::Audio)?;
    check_dim(video, "audio", stream.dim, cfg.input_dim)?;
    let total = stream.total_frames();
    let duration_s = total as f64 / stream.fps;
    let windows = segment_audio(duration_s, seg.window_s, seg.hop_s)?;
    let sentinel = video.annotations.sentinel;
    let mut items = Vec::with_capacity(windows.len());
    for w in windows {
        let (lo, hi) = sec_to_frame_range(w.start_s, w.end_s, stream.fps);
        let len = hi - lo;
        if len < cfg.num_chunks {
            return Err(Error::data(format!(
                "video {}: audio window [{:.2}s, {:.2}s) holds {len} frames, fewer than {} chunks",
                video.id, w.start_s, w.end_s, cfg.num_chunks
            )));
        }
        let (features, _) = stream.window(lo, len)?;
        let chunk_s = (w.end_s - w.start_s) / cfg.num_chunks as f64;
        let mut targets = Tensor::full(cfg.num_chunks, 2, sentinel);
        let mut valid = vec![false; cfg.num_chunks * 2];
        let mut spans = Vec::with_capacity(cfg.num_chunks);
        for c in 0..cfg.num_chunks {
            let span = sec_to_frame_range(
                w.start_s + c as f64 * chunk_s,
                w.start_s + (c + 1) as f64 * chunk_s,
                stream.fps,
            );
            spans.push(span);
            for d in 0..2 {
                if let Some(mean) = span_target_mean(&video.annotations, span.0, span.1, d) {
                    targets.set(c, d, mean);
                    valid[2 * c + d] = true;
                }
            }
        }
        items.push(TrainItem {
            video_id: video.id.clone(),
            inputs: ItemInputs::Single(features),
            targets,
            valid,
            spans,
        });
    }
    Ok(items)
}

/// Per-frame source for one fusion modality over the annotation
/// timeline.
enum FusionSource<'a> {
    Frames(&'a FeatureStream),
    /// Segment embeddings averaged onto frames.
    Expanded {
        dim: usize,
        frames: BTreeMap<usize, Vec<f64>>,
    },
}

impl FusionSource<'_> {
    /// `[len x dim]` features and per-frame validity for one window.
    /// Frames a stream does not cover keep imputed features (nearest
    /// stored frame, or zeros for uncovered segment timelines) and a
    /// false flag.
    fn window(&self, start: usize, len: usize) -> Result<(Tensor, Vec<bool>)> {
        match self {
            FusionSource::Frames(stream) => {
                let (features, _) = stream.window(start, len)?;
                let valid = (start..start + len).map(|f| stream.has_frame(f)).collect();
                Ok((features, valid))
            }
            FusionSource::Expanded { dim, frames } => {
                let mut features = Tensor::zeros(len, *dim);
                let mut valid = vec![false; len];
                for (row, frame) in (start..start + len).enumerate() {
                    if let Some(v) = frames.get(&frame) {
                        features.row_mut(row).copy_from_slice(v);
                        valid[row] = true;
                    }
                }
                Ok((features, valid))
            }
        }
    }
}

fn fusion_source<'a>(
    video: &'a VideoData,
    modality: Modality,
    want_dim: usize,
) -> Result<FusionSource<'a>> {
    // A modality absent from the video (the extractor found nothing) is
    // not an error for fusion: it contributes zero features, invalid on
    // every frame, and the model's validity gating takes over.
    let empty = || FusionSource::Expanded {
        dim: want_dim,
        frames: BTreeMap::new(),
    };
    match modality {
        Modality::Face | Modality::Audio => {
            let Some(stream) = video.features.get(&modality) else {
                return Ok(empty());
            };
            check_dim(video, modality.as_str(), stream.dim, want_dim)?;
            if stream.is_empty() {
                return Ok(empty());
            }
            Ok(FusionSource::Frames(stream))
        }
        Modality::BehaviorVisual | Modality::BehaviorMultimodal => {
            let Some(stream) = video.segments.get(&modality) else {
                return Ok(empty());
            };
            check_dim(video, modality.as_str(), stream.dim, want_dim)?;
            let tuples: Vec<(usize, usize, Vec<f64>)> = stream
                .segments
                .iter()
                .map(|s| (s.start, s.end, s.embedding.clone()))
                .collect();
            Ok(FusionSource::Expanded {
                dim: want_dim,
                frames: expand_segment_vectors(&tuples)?,
            })
        }
    }
}

/// Items for the fusion models: windows slide over the annotation
/// timeline and every configured modality is materialized per frame.
/// With `audio_dim` set, the raw audio feature window rides along as the
/// separate audio input and frames with no valid visual modality are
/// masked out of the loss (the model drops them from its visual gate).
fn fusion_items(
    video: &VideoData,
    dims: &BTreeMap<String, usize>,
    windows: &FusionWindows,
    audio_dim: Option<usize>,
) -> Result<Vec<TrainItem>> {
    let total = video.annotations.total_frames();
    if total == 0 {
        return Err(Error::data(format!(
            "video {}: empty annotation track",
            video.id
        )));
    }
    let mut sources = Vec::with_capacity(dims.len());
    for (id, &dim) in dims {
        let modality = Modality::from_str(id)?;
        sources.push((id.clone(), fusion_source(video, modality, dim)?));
    }
    let audio_stream = match audio_dim {
        Some(dim) => match video.features.get(&Modality::Audio) {
            Some(stream) => {
                check_dim(video, "audio", stream.dim, dim)?;
                Some(stream)
            }
            None => None,
        },
        None => None,
    };

    let starts = make_windows(total, windows.window_len, windows.stride)?;
    let len = windows.window_len;
    let mut items = Vec::with_capacity(starts.len());
    for start in starts {
        let mut streams = Vec::with_capacity(sources.len());
        let mut any_visual_valid = vec![false; len];
        for (id, source) in &sources {
            let (features, valid) = source.window(start, len)?;
            for (i, &v) in valid.iter().enumerate() {
                any_visual_valid[i] |= v;
            }
            streams.push(ModalityStream::new(id.clone(), features, valid));
        }
        let bundle = ModalityBundle::new(streams)?;
        let audio = match audio_stream {
            Some(stream) => Some(stream.window(start, len)?.0),
            None => None,
        };

        let (targets, mut valid) = video.annotations.window_targets(start, len);
        let mut spans = Vec::with_capacity(len);
        for i in 0..len {
            let frame = start + i;
            if frame >= total {
                spans.push((0, 0));
                continue;
            }
            spans.push((frame, frame + 1));
            if audio_dim.is_some() && !any_visual_valid[i] {
                valid[2 * i] = false;
                valid[2 * i + 1] = false;
            }
        }
        items.push(TrainItem {
            video_id: video.id.clone(),
            inputs: ItemInputs::Bundle { bundle, audio },
            targets,
            valid,
            spans,
        });
    }
    Ok(items)
}
