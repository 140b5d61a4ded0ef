//! Feature/annotation ingestion, window construction, nearest-frame
//! alignment, audio segmentation, and segment→frame prediction expansion.

pub mod csv_io;
pub mod manifest;

pub use manifest::{load_manifest, Manifest, ManifestEntry, Split};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Input stream kind. Two behavior variants exist because the upstream
/// segment encoder can be trained on visual-only or audio-visual input,
/// producing differently shaped embeddings.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Face,
    BehaviorVisual,
    BehaviorMultimodal,
    Audio,
}

impl Modality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Face => "face",
            Modality::BehaviorVisual => "behavior_visual",
            Modality::BehaviorMultimodal => "behavior_multimodal",
            Modality::Audio => "audio",
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "face" => Ok(Modality::Face),
            "behavior_visual" => Ok(Modality::BehaviorVisual),
            "behavior_multimodal" => Ok(Modality::BehaviorMultimodal),
            "audio" => Ok(Modality::Audio),
            other => Err(Error::config(format!("unknown modality '{other}'"))),
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-frame feature vectors for one video and modality. Frames may be
/// sparse (dropped upstream); lookups fall back to the nearest present
/// frame.
#[derive(Debug, Clone)]
pub struct FeatureStream {
    pub video_id: String,
    pub modality: Modality,
    pub fps: f64,
    pub dim: usize,
    pub frames: BTreeMap<usize, Vec<f64>>,
}

impl FeatureStream {
    pub fn new(
        video_id: impl Into<String>,
        modality: Modality,
        fps: f64,
        dim: usize,
        frames: BTreeMap<usize, Vec<f64>>,
    ) -> Result<Self> {
        if fps <= 0.0 || !fps.is_finite() {
            return Err(Error::data(format!("feature stream fps must be > 0, got {fps}")));
        }
        if dim == 0 {
            return Err(Error::data("feature stream dim must be positive"));
        }
        for (frame, v) in &frames {
            if v.len() != dim {
                return Err(Error::data(format!(
                    "frame {frame} has {} features, expected {dim}",
                    v.len()
                )));
            }
            if !v.iter().all(|x| x.is_finite()) {
                return Err(Error::data(format!("frame {frame} has non-finite features")));
            }
        }
        Ok(FeatureStream {
            video_id: video_id.into(),
            modality,
            fps,
            dim,
            frames,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Largest stored frame index.
    pub fn max_frame(&self) -> Option<usize> {
        self.frames.keys().next_back().copied()
    }

    /// Number of frames in the nominal timeline `[0, max_frame]`.
    pub fn total_frames(&self) -> usize {
        self.max_frame().map_or(0, |m| m + 1)
    }

    /// Whether the exact frame index is stored (not nearest-filled).
    pub fn has_frame(&self, index: usize) -> bool {
        self.frames.contains_key(&index)
    }

    /// Feature vector at `index`, or of the nearest stored frame when the
    /// exact index is missing. Ties break toward the earlier frame.
    pub fn frame_features(&self, index: usize) -> Result<&[f64]> {
        if let Some(v) = self.frames.get(&index) {
            return Ok(v);
        }
        let below = self.frames.range(..index).next_back();
        let above = self.frames.range(index + 1..).next();
        match (below, above) {
            (Some((bi, bv)), Some((ai, av))) => {
                if index - bi <= ai - index {
                    Ok(bv)
                } else {
                    Ok(av)
                }
            }
            (Some((_, bv)), None) => Ok(bv),
            (None, Some((_, av))) => Ok(av),
            (None, None) => Err(Error::data(format!(
                "feature stream {}/{} is empty",
                self.video_id, self.modality
            ))),
        }
    }

    /// Materialize `[len x dim]` features for the window starting at
    /// `start`. Indices past the last stored frame repeat it and are
    /// reported in the returned padding mask (true = padded).
    pub fn window(&self, start: usize, len: usize) -> Result<(Tensor, Vec<bool>)> {
        let total = self.total_frames();
        if total == 0 {
            return Err(Error::data(format!(
                "feature stream {}/{} is empty",
                self.video_id, self.modality
            )));
        }
        let mut out = Tensor::zeros(len, self.dim);
        let mut padded = vec![false; len];
        for (row, frame) in (start..start + len).enumerate() {
            let clamped = frame.min(total - 1);
            padded[row] = frame >= total;
            out.row_mut(row).copy_from_slice(self.frame_features(clamped)?);
        }
        Ok((out, padded))
    }
}

/// One embedded span of frames: `[start, end)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub embedding: Vec<f64>,
}

/// Ordered per-video segment embeddings (the behavior pipeline's unit).
#[derive(Debug, Clone)]
pub struct SegmentStream {
    pub video_id: String,
    pub modality: Modality,
    pub dim: usize,
    pub segments: Vec<Segment>,
}

impl SegmentStream {
    pub fn new(
        video_id: impl Into<String>,
        modality: Modality,
        segments: Vec<Segment>,
    ) -> Result<Self> {
        let dim = segments.first().map_or(0, |s| s.embedding.len());
        if dim == 0 {
            return Err(Error::data("segment stream needs at least one nonempty segment"));
        }
        let mut prev_start = None;
        for s in &segments {
            if s.start >= s.end {
                return Err(Error::data(format!(
                    "segment [{}, {}) is empty or inverted",
                    s.start, s.end
                )));
            }
            if s.embedding.len() != dim {
                return Err(Error::data(format!(
                    "segment [{}, {}) has {} dims, expected {dim}",
                    s.start,
                    s.end,
                    s.embedding.len()
                )));
            }
            if !s.embedding.iter().all(|x| x.is_finite()) {
                return Err(Error::data(format!(
                    "segment [{}, {}) has non-finite embedding",
                    s.start, s.end
                )));
            }
            if let Some(p) = prev_start {
                if s.start < p {
                    return Err(Error::data("segments are not sorted by start frame"));
                }
            }
            prev_start = Some(s.start);
        }
        Ok(SegmentStream {
            video_id: video_id.into(),
            modality,
            dim,
            segments,
        })
    }
}

/// Dense per-frame valence/arousal labels; unannotated frames carry the
/// sentinel value.
#[derive(Debug, Clone)]
pub struct AnnotationTrack {
    pub video_id: String,
    pub values: Tensor, // [N x 2]
    pub sentinel: f64,
}

impl AnnotationTrack {
    pub fn total_frames(&self) -> usize {
        self.values.rows()
    }

    /// `[len x 2]` targets for a window plus the validity mask. Frames at
    /// or past the end of the track are sentinel-filled (never valid).
    pub fn window_targets(&self, start: usize, len: usize) -> (Tensor, Vec<bool>) {
        let mut out = Tensor::full(len, 2, self.sentinel);
        for row in 0..len {
            let frame = start + row;
            if frame < self.values.rows() {
                out.set(row, 0, self.values.at(frame, 0));
                out.set(row, 1, self.values.at(frame, 1));
            }
        }
        let valid = crate::metrics::mask_invalid(&out, self.sentinel)
            .expect("window targets are [len x 2] by construction");
        (out, valid)
    }

    /// The dimension-`d` label at `frame` when it is usable (in the
    /// track, non-sentinel, inside [-1, 1]).
    pub fn dim_value_if_valid(&self, frame: usize, d: usize) -> Option<f64> {
        if frame >= self.values.rows() {
            return None;
        }
        let v = self.values.at(frame, d);
        (v != self.sentinel && (-1.0..=1.0).contains(&v)).then_some(v)
    }

    /// True when the frame exists and both dimensions carry a usable
    /// (non-sentinel, in-range) value.
    pub fn frame_fully_valid(&self, frame: usize) -> bool {
        (0..2).all(|d| self.dim_value_if_valid(frame, d).is_some())
    }
}

/// A fixed-length training window of one video.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Window {
    pub video_id: String,
    pub start: usize,
    pub length: usize,
}

/// Window start offsets for a `total`-frame sequence: `0, S, 2S, …` while
/// the window fits, plus one tail window ending exactly at the last frame
/// if coverage would otherwise stop short. A sequence shorter than one
/// window yields the single start 0 (padded downstream).
pub fn make_windows(total: usize, length: usize, stride: usize) -> Result<Vec<usize>> {
    if total == 0 || length == 0 || stride == 0 {
        return Err(Error::config(format!(
            "make_windows: total {total}, length {length}, stride {stride} must all be ≥ 1"
        )));
    }
    if total < length {
        return Ok(vec![0]);
    }
    let mut starts: Vec<usize> = (0..)
        .map(|k| k * stride)
        .take_while(|s| s + length <= total)
        .collect();
    let last = *starts.last().expect("start 0 always fits when total >= length");
    if last + length < total {
        starts.push(total - length);
    }
    Ok(starts)
}

/// Average per-frame values over all segments covering each frame. Frames
/// covered by no segment are absent from the result.
pub fn expand_segments(
    predictions: &[(usize, usize, [f64; 2])],
) -> Result<BTreeMap<usize, [f64; 2]>> {
    let as_vecs: Vec<(usize, usize, Vec<f64>)> = predictions
        .iter()
        .map(|(s, e, v)| (*s, *e, v.to_vec()))
        .collect();
    let expanded = expand_segment_vectors(&as_vecs)?;
    Ok(expanded
        .into_iter()
        .map(|(f, v)| (f, [v[0], v[1]]))
        .collect())
}

/// Vector-valued generalization of [`expand_segments`]; also used to turn
/// segment embeddings into per-frame fusion inputs.
pub fn expand_segment_vectors(
    segments: &[(usize, usize, Vec<f64>)],
) -> Result<BTreeMap<usize, Vec<f64>>> {
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    let dim = match segments.first() {
        Some((_, _, v)) => v.len(),
        None => return Ok(BTreeMap::new()),
    };
    for (start, end, value) in segments {
        if start >= end {
            return Err(Error::data(format!(
                "segment [{start}, {end}) is empty or inverted"
            )));
        }
        if value.len() != dim {
            return Err(Error::shape(format!(
                "segment [{start}, {end}) carries {} values, expected {dim}",
                value.len()
            )));
        }
        for frame in *start..*end {
            let entry = sums.entry(frame).or_insert_with(|| (vec![0.0; dim], 0));
            for (acc, v) in entry.0.iter_mut().zip(value) {
                *acc += v;
            }
            entry.1 += 1;
        }
    }
    Ok(sums
        .into_iter()
        .map(|(frame, (sum, count))| {
            let mean = sum.into_iter().map(|s| s / count as f64).collect();
            (frame, mean)
        })
        .collect())
}

/// One span of the audio timeline; `padded` marks a final window that
/// extends past the available signal (zero-padded downstream).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AudioSegment {
    pub start_s: f64,
    pub end_s: f64,
    pub padded: bool,
}

/// Fixed-length sliding audio windows on the hop grid `0, hop, 2·hop, …`.
/// If the last full window ends before the signal does (or the signal is
/// shorter than one window), one padded window on the grid is appended.
pub fn segment_audio(total_duration_s: f64, window_s: f64, hop_s: f64) -> Result<Vec<AudioSegment>> {
    if !(total_duration_s > 0.0) || !(window_s > 0.0) || !(hop_s > 0.0) {
        return Err(Error::config(format!(
            "segment_audio: duration {total_duration_s}, window {window_s}, hop {hop_s} must all be > 0"
        )));
    }
    let mut out = Vec::new();
    let mut k = 0usize;
    loop {
        let start = k as f64 * hop_s;
        if start + window_s > total_duration_s {
            break;
        }
        out.push(AudioSegment {
            start_s: start,
            end_s: start + window_s,
            padded: false,
        });
        k += 1;
    }
    let covered = out.last().map_or(0.0, |w| w.end_s);
    if covered < total_duration_s {
        let start = k as f64 * hop_s;
        out.push(AudioSegment {
            start_s: start,
            end_s: start + window_s,
            padded: true,
        });
    }
    Ok(out)
}

/// Seconds → feature-frame half-open range at `rate` frames per second
/// (floor for the start, ceil for the end).
pub fn sec_to_frame_range(start_s: f64, end_s: f64, rate: f64) -> (usize, usize) {
    let lo = (start_s * rate).floor().max(0.0) as usize;
    let hi = (end_s * rate).ceil() as usize;
    (lo, hi.max(lo + 1))
}
