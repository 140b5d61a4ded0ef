//! CSV readers/writers for feature, segment, annotation, and prediction
//! files. All formats are UTF-8 with a header row; parse failures carry
//! the path and 1-based line number.

use std::collections::BTreeMap;
use std::path::Path;

use super::{AnnotationTrack, FeatureStream, Modality, Segment, SegmentStream};
use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

pub(crate) fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: line as usize,
        msg: msg.into(),
    }
}

pub(crate) fn open_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file))
}

pub(crate) fn check_header(path: &Path, got: &csv::StringRecord, want: &[String]) -> Result<()> {
    let got_vec: Vec<&str> = got.iter().collect();
    if got_vec.len() != want.len() || got_vec.iter().zip(want).any(|(g, w)| *g != w) {
        return Err(parse_err(
            path,
            1,
            format!("header is '{}', expected '{}'", got_vec.join(","), want.join(",")),
        ));
    }
    Ok(())
}

fn feature_header(dim: usize) -> Vec<String> {
    let mut h = vec!["frame".to_string()];
    h.extend((0..dim).map(|i| format!("f{i}")));
    h
}

pub(crate) fn record_line(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

pub(crate) fn parse_field<T: std::str::FromStr>(
    path: &Path,
    line: u64,
    field: &str,
    what: &str,
) -> Result<T> {
    field
        .trim()
        .parse::<T>()
        .map_err(|_| parse_err(path, line, format!("cannot parse {what} from '{field}'")))
}

fn parse_finite(path: &Path, line: u64, field: &str, what: &str) -> Result<f64> {
    let v: f64 = parse_field(path, line, field, what)?;
    if !v.is_finite() {
        return Err(parse_err(path, line, format!("{what} '{field}' is not finite")));
    }
    Ok(v)
}

/// Feature CSV: header `frame,f0,…,f{D-1}`; frame indices strictly
/// increasing.
pub fn load_feature_csv(
    path: &Path,
    video_id: &str,
    modality: Modality,
    fps: f64,
) -> Result<FeatureStream> {
    let mut rdr = open_reader(path)?;
    let header = rdr
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    if header.len() < 2 || header.get(0) != Some("frame") {
        return Err(parse_err(
            path,
            1,
            "feature header must be 'frame,f0,f1,…'".to_string(),
        ));
    }
    let dim = header.len() - 1;
    check_header(path, &header, &feature_header(dim))?;

    let mut frames = BTreeMap::new();
    let mut prev: Option<usize> = None;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(path, 0, e.to_string()))?;
        let line = record_line(&rec);
        if rec.len() != dim + 1 {
            return Err(parse_err(
                path,
                line,
                format!("row has {} fields, expected {}", rec.len(), dim + 1),
            ));
        }
        let frame: usize = parse_field(path, line, &rec[0], "frame index")?;
        if let Some(p) = prev {
            if frame <= p {
                return Err(parse_err(
                    path,
                    line,
                    format!("frame index {frame} is not greater than previous {p}"),
                ));
            }
        }
        prev = Some(frame);
        let mut v = Vec::with_capacity(dim);
        for j in 0..dim {
            v.push(parse_finite(path, line, &rec[j + 1], &format!("f{j}"))?);
        }
        frames.insert(frame, v);
    }
    if frames.is_empty() {
        return Err(parse_err(path, 1, "feature file has no data rows"));
    }
    FeatureStream::new(video_id, modality, fps, dim, frames)
}

pub fn write_feature_csv(path: &Path, stream: &FeatureStream) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(feature_header(stream.dim))?;
    for (frame, values) in &stream.frames {
        let mut rec = vec![frame.to_string()];
        rec.extend(values.iter().map(|v| v.to_string()));
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Segment CSV: header `start_frame,end_frame,f0,…`; half-open frame
/// intervals sorted by start.
pub fn load_segment_csv(path: &Path, video_id: &str, modality: Modality) -> Result<SegmentStream> {
    let mut rdr = open_reader(path)?;
    let header = rdr
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    if header.len() < 3 || header.get(0) != Some("start_frame") || header.get(1) != Some("end_frame")
    {
        return Err(parse_err(
            path,
            1,
            "segment header must be 'start_frame,end_frame,f0,…'".to_string(),
        ));
    }
    let dim = header.len() - 2;
    let mut want = vec!["start_frame".to_string(), "end_frame".to_string()];
    want.extend((0..dim).map(|i| format!("f{i}")));
    check_header(path, &header, &want)?;

    let mut segments = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(path, 0, e.to_string()))?;
        let line = record_line(&rec);
        if rec.len() != dim + 2 {
            return Err(parse_err(
                path,
                line,
                format!("row has {} fields, expected {}", rec.len(), dim + 2),
            ));
        }
        let start: usize = parse_field(path, line, &rec[0], "start_frame")?;
        let end: usize = parse_field(path, line, &rec[1], "end_frame")?;
        let mut embedding = Vec::with_capacity(dim);
        for j in 0..dim {
            embedding.push(parse_finite(path, line, &rec[j + 2], &format!("f{j}"))?);
        }
        segments.push(Segment {
            start,
            end,
            embedding,
        });
    }
    SegmentStream::new(video_id, modality, segments)
}

pub fn write_segment_csv(path: &Path, stream: &SegmentStream) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["start_frame".to_string(), "end_frame".to_string()];
    header.extend((0..stream.dim).map(|i| format!("f{i}")));
    w.write_record(header)?;
    for s in &stream.segments {
        let mut rec = vec![s.start.to_string(), s.end.to_string()];
        rec.extend(s.embedding.iter().map(|v| v.to_string()));
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Annotation CSV: header `frame,valence,arousal`; frames strictly
/// increasing. Missing frames up to the last annotated one are filled
/// with the sentinel (invalid).
pub fn load_annotation_csv(path: &Path, video_id: &str, sentinel: f64) -> Result<AnnotationTrack> {
    let mut rdr = open_reader(path)?;
    let header = rdr
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    let want: Vec<String> = ["frame", "valence", "arousal"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    check_header(path, &header, &want)?;

    let mut rows: Vec<(usize, f64, f64)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(path, 0, e.to_string()))?;
        let line = record_line(&rec);
        if rec.len() != 3 {
            return Err(parse_err(
                path,
                line,
                format!("row has {} fields, expected 3", rec.len()),
            ));
        }
        let frame: usize = parse_field(path, line, &rec[0], "frame index")?;
        if let Some((p, _, _)) = rows.last() {
            if frame <= *p {
                return Err(parse_err(
                    path,
                    line,
                    format!("frame index {frame} is not greater than previous {p}"),
                ));
            }
        }
        let v = parse_finite(path, line, &rec[1], "valence")?;
        let a = parse_finite(path, line, &rec[2], "arousal")?;
        rows.push((frame, v, a));
    }
    if rows.is_empty() {
        return Err(parse_err(path, 1, "annotation file has no data rows"));
    }
    let total = rows.last().unwrap().0 + 1;
    let mut values = Tensor::full(total, 2, sentinel);
    for (frame, v, a) in rows {
        values.set(frame, 0, v);
        values.set(frame, 1, a);
    }
    Ok(AnnotationTrack {
        video_id: video_id.to_string(),
        values,
        sentinel,
    })
}

pub fn write_annotation_csv(path: &Path, track: &AnnotationTrack) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["frame", "valence", "arousal"])?;
    for frame in 0..track.values.rows() {
        w.write_record([
            frame.to_string(),
            track.values.at(frame, 0).to_string(),
            track.values.at(frame, 1).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Prediction CSV: header `frame,valence,arousal`, values clipped to
/// [-1, 1] on write.
pub fn write_prediction_csv(path: &Path, predictions: &BTreeMap<usize, [f64; 2]>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["frame", "valence", "arousal"])?;
    for (frame, [v, a]) in predictions {
        w.write_record([
            frame.to_string(),
            v.clamp(-1.0, 1.0).to_string(),
            a.clamp(-1.0, 1.0).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_prediction_csv(path: &Path) -> Result<BTreeMap<usize, [f64; 2]>> {
    let mut rdr = open_reader(path)?;
    let header = rdr
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    let want: Vec<String> = ["frame", "valence", "arousal"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    check_header(path, &header, &want)?;
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(path, 0, e.to_string()))?;
        let line = record_line(&rec);
        let frame: usize = parse_field(path, line, &rec[0], "frame index")?;
        let v = parse_finite(path, line, &rec[1], "valence")?;
        let a = parse_finite(path, line, &rec[2], "arousal")?;
        if out.insert(frame, [v, a]).is_some() {
            return Err(parse_err(path, line, format!("duplicate frame {frame}")));
        }
    }
    Ok(out)
}
