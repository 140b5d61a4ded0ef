//! Speech-presence filtering of audio segments from visual mouth-opening
//! dynamics and annotation coverage: short gaps inside open-mouth regions
//! are closed, isolated short bursts are suppressed, and a segment is
//! kept only if enough smoothed open-mouth time and enough annotated
//! frames fall inside it.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::csv_io::{check_header, open_reader, parse_err, parse_field, record_line};
use crate::dataio::AnnotationTrack;
use crate::error::{Error, Result};

/// Per-frame mouth-open flags for one video.
#[derive(Debug, Clone, PartialEq)]
pub struct MouthSeries {
    pub video_id: String,
    pub fps: f64,
    pub open: Vec<bool>,
}

impl MouthSeries {
    pub fn new(video_id: impl Into<String>, fps: f64, open: Vec<bool>) -> Result<Self> {
        if open.is_empty() {
            return Err(Error::data("mouth series must cover at least one frame"));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::data(format!("mouth series fps {fps} must be positive")));
        }
        Ok(MouthSeries {
            video_id: video_id.into(),
            fps,
            open,
        })
    }

    /// The series with short gaps closed and short bursts suppressed.
    pub fn smoothed(&self, cfg: &FilterConfig) -> MouthSeries {
        MouthSeries {
            video_id: self.video_id.clone(),
            fps: self.fps,
            open: smooth_series(&self.open, self.fps, cfg),
        }
    }
}

/// Thresholds for smoothing and segment retention, in seconds (coverage
/// is a fraction). The source publication does not disclose its values;
/// these defaults are project choices and every field is configurable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    /// Close false runs strictly shorter than this many seconds.
    pub max_gap_s: f64,
    /// Suppress true runs strictly shorter than this many seconds.
    pub min_burst_s: f64,
    /// Keep a segment only with at least this much open-mouth time.
    pub min_open_s_per_segment: f64,
    /// Keep a segment only with at least this fraction of annotated frames.
    pub min_coverage_frac: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            max_gap_s: 0.5,
            min_burst_s: 0.3,
            min_open_s_per_segment: 1.0,
            min_coverage_frac: 0.5,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("max_gap_s", self.max_gap_s),
            ("min_burst_s", self.min_burst_s),
            ("min_open_s_per_segment", self.min_open_s_per_segment),
            ("min_coverage_frac", self.min_coverage_frac),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if self.min_coverage_frac > 1.0 {
            return Err(Error::config(format!(
                "min_coverage_frac {} exceeds 1",
                self.min_coverage_frac
            )));
        }
        Ok(())
    }
}

/// For each frame, the index of the nearest frame at or before it whose
/// value equals `target` (and the mirror array looking forward).
fn nearest_at_or_before(series: &[bool], target: bool) -> Vec<Option<usize>> {
    let mut out = Vec::with_capacity(series.len());
    let mut last = None;
    for (i, &v) in series.iter().enumerate() {
        if v == target {
            last = Some(i);
        }
        out.push(last);
    }
    out
}

fn nearest_at_or_after(series: &[bool], target: bool) -> Vec<Option<usize>> {
    let mut out = vec![None; series.len()];
    let mut next = None;
    for i in (0..series.len()).rev() {
        if series[i] == target {
            next = Some(i);
        }
        out[i] = next;
    }
    out
}

/// Open every frame inside a false run strictly shorter than `threshold`
/// frames that has true neighbours on both sides.
fn close_short_gaps(series: &[bool], threshold: f64) -> Vec<bool> {
    let left = nearest_at_or_before(series, true);
    let right = nearest_at_or_after(series, true);
    series
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if v {
                return true;
            }
            match (left[i], right[i]) {
                // The run containing i spans the open interval (l, r).
                (Some(l), Some(r)) => ((r - l - 1) as f64) < threshold,
                _ => false,
            }
        })
        .collect()
}

/// Close every frame inside a true run strictly shorter than `threshold`
/// frames; runs touching the series edges count their real length.
fn suppress_short_bursts(series: &[bool], threshold: f64) -> Vec<bool> {
    let n = series.len();
    let left = nearest_at_or_before(series, false);
    let right = nearest_at_or_after(series, false);
    series
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if !v {
                return false;
            }
            let l = left[i].map_or(-1, |x| x as i64);
            let r = right[i].map_or(n as i64, |x| x as i64);
            ((r - l - 1) as f64) >= threshold
        })
        .collect()
}

/// Temporal smoothing of a mouth-open series: first close false runs
/// strictly shorter than `max_gap_s * fps` frames that are flanked by
/// open frames on both sides, then suppress true runs strictly shorter
/// than `min_burst_s * fps` frames. The order is fixed (close, then
/// open) so a dashed speech region merges before burst pruning.
pub fn smooth_series(open: &[bool], fps: f64, cfg: &FilterConfig) -> Vec<bool> {
    let closed = close_short_gaps(open, cfg.max_gap_s * fps);
    suppress_short_bursts(&closed, cfg.min_burst_s * fps)
}

/// Which retention test(s) a dropped segment failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropReason {
    OpenDuration,
    Coverage,
    OpenDurationAndCoverage,
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DropReason::OpenDuration => "open duration",
            DropReason::Coverage => "coverage",
            DropReason::OpenDurationAndCoverage => "open duration and coverage",
        })
    }
}

/// Outcome of [`keep_segment`], with the measured quantities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeepDecision {
    pub keep: bool,
    /// Smoothed open-mouth time inside the segment, in seconds.
    pub open_seconds: f64,
    /// Fraction of segment frames carrying a valid annotation.
    pub coverage_frac: f64,
    pub reason: Option<DropReason>,
}

impl KeepDecision {
    pub fn reason_str(&self) -> String {
        self.reason.map(|r| r.to_string()).unwrap_or_default()
    }
}

/// Decide whether the audio segment `(start_s, end_s)` is kept: it needs
/// at least `min_open_s_per_segment` seconds of smoothed open-mouth time
/// and at least `min_coverage_frac` of its frames annotated. Frames past
/// the end of the series or track count as closed / unannotated.
pub fn keep_segment(
    segment: (f64, f64),
    smoothed: &MouthSeries,
    annotations: &AnnotationTrack,
    cfg: &FilterConfig,
) -> KeepDecision {
    let (start_s, end_s) = segment;
    let start = (start_s * smoothed.fps).round().max(0.0) as usize;
    let end = (end_s * smoothed.fps).round().max(0.0) as usize;
    let frames = end.saturating_sub(start);

    let open_frames = (start..end)
        .filter(|&f| smoothed.open.get(f).copied().unwrap_or(false))
        .count();
    let open_seconds = open_frames as f64 / smoothed.fps;

    let annotated = (start..end)
        .filter(|&f| annotations.frame_fully_valid(f))
        .count();
    let coverage_frac = if frames == 0 {
        0.0
    } else {
        annotated as f64 / frames as f64
    };

    let open_ok = open_seconds >= cfg.min_open_s_per_segment;
    let coverage_ok = coverage_frac >= cfg.min_coverage_frac;
    let reason = match (open_ok, coverage_ok) {
        (true, true) => None,
        (false, true) => Some(DropReason::OpenDuration),
        (true, false) => Some(DropReason::Coverage),
        (false, false) => Some(DropReason::OpenDurationAndCoverage),
    };
    KeepDecision {
        keep: reason.is_none(),
        open_seconds,
        coverage_frac,
        reason,
    }
}

/// One row of the filter report: a segment of one video and the decision.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterReportRow {
    pub video_id: String,
    pub start_s: f64,
    pub end_s: f64,
    pub keep: bool,
    pub reason: String,
}

/// Mouth-series CSV: header `frame,open`, open in {0,1}, frame indices
/// strictly increasing. Missing frames up to the last listed one count
/// as closed.
pub fn load_mouth_csv(path: &Path, video_id: &str, fps: f64) -> Result<MouthSeries> {
    let mut rdr = open_reader(path)?;
    let header = rdr
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    check_header(path, &header, &["frame".to_string(), "open".to_string()])?;

    let mut flags: Vec<(usize, bool)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(path, 0, e.to_string()))?;
        let line = record_line(&rec);
        if rec.len() != 2 {
            return Err(parse_err(path, line, format!("row has {} fields, expected 2", rec.len())));
        }
        let frame: usize = parse_field(path, line, &rec[0], "frame index")?;
        if let Some(&(prev, _)) = flags.last() {
            if frame <= prev {
                return Err(parse_err(
                    path,
                    line,
                    format!("frame index {frame} is not greater than previous {prev}"),
                ));
            }
        }
        let open = match rec[1].trim() {
            "0" => false,
            "1" => true,
            other => {
                return Err(parse_err(path, line, format!("open flag must be 0 or 1, got '{other}'")))
            }
        };
        flags.push((frame, open));
    }
    let last = flags
        .last()
        .ok_or_else(|| parse_err(path, 1, "mouth file has no data rows"))?
        .0;
    let mut open = vec![false; last + 1];
    for (frame, flag) in flags {
        open[frame] = flag;
    }
    MouthSeries::new(video_id, fps, open)
}

pub fn write_mouth_csv(path: &Path, series: &MouthSeries) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["frame", "open"])?;
    for (frame, &open) in series.open.iter().enumerate() {
        w.write_record([frame.to_string(), (open as u8).to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Filter report CSV: header `video_id,start_s,end_s,keep,reason` with
/// keep in {0,1}.
pub fn write_filter_report(path: &Path, rows: &[FilterReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["video_id", "start_s", "end_s", "keep", "reason"])?;
    for r in rows {
        w.write_record([
            r.video_id.clone(),
            r.start_s.to_string(),
            r.end_s.to_string(),
            (r.keep as u8).to_string(),
            r.reason.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
