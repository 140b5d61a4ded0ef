//! The five pipeline commands as library functions. The binary is a thin
//! argument-parsing shell around these, and tests drive them directly.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use va_fusion_core::dataio::csv_io::write_prediction_csv;
use va_fusion_core::dataio::{segment_audio, Manifest, Split};
use va_fusion_core::filter::{
    keep_segment, load_mouth_csv, write_filter_report, FilterReportRow,
};
use va_fusion_core::metrics::CccReport;
use va_fusion_core::trainer::{
    evaluate_videos, load_split, load_video, predict_video, train, AnyModel, Checkpoint,
    ModelSpec, TrainConfig, VideoData,
};
use va_fusion_core::{Error, Result};

use crate::config::FilterSection;
use crate::synth::{generate, write_corpus, SynthSpec};

#[derive(Debug)]
pub struct SynthArtifacts {
    pub manifest: PathBuf,
    pub n_train: usize,
    pub n_devel: usize,
}

/// Generate and write a synthetic corpus under `out_dir`.
pub fn cmd_synth(spec: &SynthSpec, out_dir: &Path) -> Result<SynthArtifacts> {
    let videos = generate(spec)?;
    let manifest = write_corpus(spec, &videos, out_dir)?;
    let n_devel = videos.iter().filter(|v| v.split == Split::Devel).count();
    log::info!(
        "synthesized {} videos ({} train / {} devel) under {}",
        videos.len(),
        videos.len() - n_devel,
        n_devel,
        out_dir.display()
    );
    Ok(SynthArtifacts {
        manifest,
        n_train: videos.len() - n_devel,
        n_devel,
    })
}

#[derive(Debug)]
pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub best_dev_mean_ccc: Option<f64>,
    pub epochs_run: usize,
}

/// Train per the resolved config and write `checkpoint.json` (best dev
/// epoch) plus `metrics.jsonl` (one JSON object per epoch) under
/// `out_dir`. A run whose loss went non-finite still writes both files
/// (the checkpoint is the last good state) and then surfaces the
/// numeric failure.
pub fn cmd_train(manifest: &Manifest, cfg: &TrainConfig, out_dir: &Path) -> Result<TrainArtifacts> {
    let outcome = train(manifest, cfg)?;
    std::fs::create_dir_all(out_dir)?;
    let checkpoint = out_dir.join("checkpoint.json");
    outcome.checkpoint.save(&checkpoint)?;

    let metrics = out_dir.join("metrics.jsonl");
    let mut file = std::fs::File::create(&metrics)?;
    for record in &outcome.epochs {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::data(format!("cannot serialize epoch record: {e}")))?;
        writeln!(file, "{line}")?;
    }
    file.flush()?;

    if let Some(diagnostic) = outcome.aborted {
        return Err(Error::numeric(format!(
            "{diagnostic}; checkpoint and metrics written to {}",
            out_dir.display()
        )));
    }
    log::info!(
        "trained {} epochs, best dev mean CCC {:?}",
        outcome.epochs.len(),
        outcome.checkpoint.best_dev_mean_ccc
    );
    Ok(TrainArtifacts {
        checkpoint,
        metrics,
        best_dev_mean_ccc: outcome.checkpoint.best_dev_mean_ccc,
        epochs_run: outcome.epochs.len(),
    })
}

#[derive(Debug)]
pub struct EvalArtifacts {
    pub report: PathBuf,
    pub per_video: PathBuf,
    pub plots_dir: PathBuf,
    pub overall: CccReport,
}

fn load_checkpoint_model(checkpoint_path: &Path) -> Result<(Checkpoint, AnyModel)> {
    let ckpt = Checkpoint::load(checkpoint_path)?;
    let model = ckpt.build_model()?;
    Ok((ckpt, model))
}

/// Evaluate a checkpoint on one split. Writes `report.json` (the
/// split-level CCC report), `per_video.csv`, and one plot CSV per video
/// under `plots/` with columns `frame,target_v,pred_v,target_a,pred_a`.
pub fn cmd_eval(
    manifest: &Manifest,
    checkpoint_path: &Path,
    split: Split,
    out_dir: &Path,
) -> Result<EvalArtifacts> {
    let (ckpt, model) = load_checkpoint_model(checkpoint_path)?;
    let videos = load_split(manifest, split, ckpt.config.loss.invalid_sentinel)?;
    let eval = evaluate_videos(&model, &ckpt.config.model, &videos)?;

    std::fs::create_dir_all(out_dir)?;
    let report = out_dir.join("report.json");
    let json = serde_json::to_string_pretty(&eval.overall)
        .map_err(|e| Error::data(format!("cannot serialize report: {e}")))?;
    std::fs::write(&report, json + "\n")?;

    let per_video = out_dir.join("per_video.csv");
    let mut w = csv::Writer::from_path(&per_video)?;
    w.write_record([
        "video_id",
        "ccc_valence",
        "ccc_arousal",
        "ccc_mean",
        "n_valence",
        "n_arousal",
    ])?;
    for score in &eval.per_video {
        w.write_record([
            score.video_id.clone(),
            score.report.ccc_valence.to_string(),
            score.report.ccc_arousal.to_string(),
            score.report.ccc_mean.to_string(),
            score.report.n_valid.valence.to_string(),
            score.report.n_valid.arousal.to_string(),
        ])?;
    }
    w.flush()?;

    let plots_dir = out_dir.join("plots");
    std::fs::create_dir_all(&plots_dir)?;
    for video in &videos {
        let preds = predict_video(&model, &ckpt.config.model, video)?;
        write_plot_csv(&plots_dir.join(format!("{}.csv", video.id)), video, &preds)?;
    }

    log::info!(
        "evaluated {} {split} videos: mean CCC {:.4}",
        videos.len(),
        eval.overall.ccc_mean
    );
    Ok(EvalArtifacts {
        report,
        per_video,
        plots_dir,
        overall: eval.overall,
    })
}

/// Plot data for one video: rows are the frames where both target
/// dimensions are annotated and the model produced a prediction.
fn write_plot_csv(
    path: &Path,
    video: &VideoData,
    preds: &BTreeMap<usize, [f64; 2]>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["frame", "target_v", "pred_v", "target_a", "pred_a"])?;
    for (&frame, pred) in preds {
        let (Some(tv), Some(ta)) = (
            video.annotations.dim_value_if_valid(frame, 0),
            video.annotations.dim_value_if_valid(frame, 1),
        ) else {
            continue;
        };
        w.write_record([
            frame.to_string(),
            tv.to_string(),
            pred[0].to_string(),
            ta.to_string(),
            pred[1].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug)]
pub struct PredictArtifacts {
    pub dir: PathBuf,
    pub files: Vec<PathBuf>,
}

/// Export per-frame prediction CSVs for every video of the split, one
/// row per frame of the annotated timeline. Frames the model's windows
/// did not cover take the nearest covered prediction; exported values
/// are clipped to [-1, 1].
pub fn cmd_predict(
    manifest: &Manifest,
    checkpoint_path: &Path,
    split: Split,
    out_dir: &Path,
) -> Result<PredictArtifacts> {
    let (ckpt, model) = load_checkpoint_model(checkpoint_path)?;
    let videos = load_split(manifest, split, ckpt.config.loss.invalid_sentinel)?;
    let dir = out_dir.join("predictions");
    std::fs::create_dir_all(&dir)?;
    let mut files = Vec::with_capacity(videos.len());
    for video in &videos {
        let sparse = predict_video(&model, &ckpt.config.model, video)?;
        if sparse.is_empty() {
            return Err(Error::data(format!(
                "video {}: the model covered no frames",
                video.id
            )));
        }
        let total = video.annotations.total_frames();
        let full: BTreeMap<usize, [f64; 2]> =
            (0..total).map(|f| (f, nearest_prediction(&sparse, f))).collect();
        let path = dir.join(format!("{}.csv", video.id));
        write_prediction_csv(&path, &full)?;
        files.push(path);
    }
    log::info!("wrote {} prediction files under {}", files.len(), dir.display());
    Ok(PredictArtifacts { dir, files })
}

/// Value at `frame`, or of the nearest covered frame (ties toward the
/// earlier one) — mirrors the feature streams' nearest-frame fallback.
fn nearest_prediction(preds: &BTreeMap<usize, [f64; 2]>, frame: usize) -> [f64; 2] {
    if let Some(p) = preds.get(&frame) {
        return *p;
    }
    let below = preds.range(..frame).next_back();
    let above = preds.range(frame + 1..).next();
    match (below, above) {
        (Some((bi, bp)), Some((ai, ap))) => {
            if frame - bi <= ai - frame {
                *bp
            } else {
                *ap
            }
        }
        (Some((_, bp)), None) => *bp,
        (None, Some((_, ap))) => *ap,
        (None, None) => unreachable!("caller checked non-emptiness"),
    }
}

#[derive(Debug)]
pub struct FilterArtifacts {
    pub report: PathBuf,
    pub segments: usize,
    pub kept: usize,
}

/// Speech-presence filtering: smooth each video's mouth-open series,
/// cut the audio segmentation grid over its duration, and judge every
/// segment. Writes `filter_report.csv`.
pub fn cmd_filter(
    manifest: &Manifest,
    manifest_dir: &Path,
    section: &FilterSection,
    out_dir: &Path,
) -> Result<FilterArtifacts> {
    section.thresholds.validate()?;
    section.segmentation.validate()?;
    let mouth_dir = if section.mouth_dir.is_relative() {
        manifest_dir.join(&section.mouth_dir)
    } else {
        section.mouth_dir.clone()
    };

    let sentinel = va_fusion_core::metrics::LossConfig::default().invalid_sentinel;
    let mut rows = Vec::new();
    for entry in &manifest.videos {
        let mouth_path = mouth_dir.join(format!("{}.csv", entry.id));
        if !mouth_path.is_file() {
            return Err(Error::data(format!(
                "video {}: no mouth series at {}",
                entry.id,
                mouth_path.display()
            )));
        }
        let series = load_mouth_csv(&mouth_path, &entry.id, entry.fps)?;
        if series.open.is_empty() {
            return Err(Error::data(format!(
                "video {}: empty mouth series",
                entry.id
            )));
        }
        let video = load_video(entry, sentinel)?;
        let smoothed = series.smoothed(&section.thresholds);
        let duration = series.open.len() as f64 / entry.fps;
        for seg in segment_audio(
            duration,
            section.segmentation.window_s,
            section.segmentation.hop_s,
        )? {
            let decision = keep_segment(
                (seg.start_s, seg.end_s),
                &smoothed,
                &video.annotations,
                &section.thresholds,
            );
            rows.push(FilterReportRow {
                video_id: entry.id.clone(),
                start_s: seg.start_s,
                end_s: seg.end_s,
                keep: decision.keep,
                reason: decision.reason_str(),
            });
        }
    }

    std::fs::create_dir_all(out_dir)?;
    let report = out_dir.join("filter_report.csv");
    write_filter_report(&report, &rows)?;
    let kept = rows.iter().filter(|r| r.keep).count();
    log::info!("filter kept {kept}/{} segments", rows.len());
    Ok(FilterArtifacts {
        report,
        segments: rows.len(),
        kept,
    })
}

/// Map every error class to its own exit code so scripts can tell
/// configuration mistakes, bad data, and numeric failures apart.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Parse { .. } | Error::Io(_) | Error::Csv(_) => 3,
        Error::Numeric(_) | Error::Shape(_) => 4,
    }
}

/// Re-derive the model spec an existing checkpoint was trained with.
pub fn checkpoint_model_spec(path: &Path) -> Result<ModelSpec> {
    Ok(Checkpoint::load(path)?.config.model)
}
