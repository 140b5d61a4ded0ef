//! Deterministic synthetic corpus generation.
//!
//! Each video carries a smooth two-dimensional latent walk that *is* the
//! valence/arousal target track. Three modality streams are rendered as
//! fixed linear readouts of that latent plus independent noise:
//!
//! * `face` — per-frame features, valence-heavy view of the latent;
//! * `audio` — per-frame features, arousal-heavy view;
//! * `behavior_visual` — segment embeddings of the latent's segment mean,
//!   a balanced but weaker view.
//!
//! The views are complementary on purpose: no single stream observes both
//! latent dimensions strongly, so a fused model genuinely outperforms any
//! unimodal readout, while every stream alone still carries recoverable
//! signal (a noiseless linear probe decodes its strong dimension exactly).
//!
//! Everything is driven by one seeded RNG consumed in a fixed order, so a
//! fixed seed reproduces the corpus byte for byte.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use va_fusion_core::dataio::csv_io::{write_annotation_csv, write_feature_csv, write_segment_csv};
use va_fusion_core::dataio::manifest::save_manifest;
use va_fusion_core::dataio::{
    AnnotationTrack, FeatureStream, Manifest, ManifestEntry, Modality, Segment, SegmentStream,
    Split,
};
use va_fusion_core::filter::{write_mouth_csv, MouthSeries};
use va_fusion_core::metrics::LossConfig;
use va_fusion_core::numerics::Tensor;
use va_fusion_core::{Error, Result};

/// Strength at which each modality observes (valence, arousal).
const FACE_SCALE: [f64; 2] = [1.0, 0.15];
const AUDIO_SCALE: [f64; 2] = [0.15, 1.0];
const BEHAVIOR_SCALE: [f64; 2] = [0.35, 0.6];

/// Per-modality generation knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModalityGen {
    /// Feature width of the emitted stream.
    pub dim: usize,
    /// Standard deviation of the additive observation noise.
    pub noise_sigma: f64,
    /// Probability that a frame (or behavior segment) is dropped from
    /// the stream entirely, simulating upstream extraction failures.
    pub dropout_rho: f64,
}

impl Default for ModalityGen {
    fn default() -> Self {
        ModalityGen {
            dim: 8,
            noise_sigma: 0.3,
            dropout_rho: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_videos: usize,
    /// Inclusive range of frames per video.
    pub min_frames: usize,
    pub max_frames: usize,
    pub fps: f64,
    pub face: ModalityGen,
    pub audio: ModalityGen,
    pub behavior: ModalityGen,
    /// Frames summarized by one behavior segment embedding.
    pub segment_len: usize,
    /// Maximum per-frame step of the latent walk (uniform in ±walk_step).
    pub walk_step: f64,
    /// Fraction of videos assigned to the devel split (at least one each).
    pub dev_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_videos: 200,
            min_frames: 48,
            max_frames: 96,
            fps: 8.0,
            face: ModalityGen::default(),
            audio: ModalityGen::default(),
            behavior: ModalityGen::default(),
            segment_len: 8,
            walk_step: 0.1,
            dev_fraction: 0.25,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_videos < 2 {
            return Err(Error::config(
                "n_videos must be at least 2 (one train and one devel video)",
            ));
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return Err(Error::config(format!(
                "frame range [{}, {}] must be nonempty and positive",
                self.min_frames, self.max_frames
            )));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::config(format!("fps must be positive, got {}", self.fps)));
        }
        for (name, m) in [
            ("face", &self.face),
            ("audio", &self.audio),
            ("behavior", &self.behavior),
        ] {
            if m.dim < 2 {
                return Err(Error::config(format!(
                    "{name}.dim must be at least 2 to carry the two latent dimensions"
                )));
            }
            if !(m.noise_sigma >= 0.0 && m.noise_sigma.is_finite()) {
                return Err(Error::config(format!(
                    "{name}.noise_sigma must be finite and nonnegative, got {}",
                    m.noise_sigma
                )));
            }
            if !(0.0..=1.0).contains(&m.dropout_rho) {
                return Err(Error::config(format!(
                    "{name}.dropout_rho must lie in [0, 1], got {}",
                    m.dropout_rho
                )));
            }
        }
        if self.face.dropout_rho >= 1.0 && self.audio.dropout_rho >= 1.0 {
            return Err(Error::config(
                "face and audio cannot both have dropout_rho = 1; some per-frame \
                 modality must occasionally be observed",
            ));
        }
        if self.segment_len == 0 {
            return Err(Error::config("segment_len must be positive"));
        }
        if !(self.walk_step > 0.0 && self.walk_step.is_finite()) {
            return Err(Error::config(format!(
                "walk_step must be positive, got {}",
                self.walk_step
            )));
        }
        if !(self.dev_fraction > 0.0 && self.dev_fraction < 1.0) {
            return Err(Error::config(format!(
                "dev_fraction must lie strictly between 0 and 1, got {}",
                self.dev_fraction
            )));
        }
        Ok(())
    }

    fn n_devel(&self) -> usize {
        ((self.n_videos as f64 * self.dev_fraction).round() as usize)
            .clamp(1, self.n_videos - 1)
    }
}

/// One generated video, before any files are written.
#[derive(Debug, Clone)]
pub struct SynthVideo {
    pub id: String,
    pub split: Split,
    pub fps: f64,
    /// Per-frame (valence, arousal) targets, already inside [-1, 1].
    pub targets: Vec<[f64; 2]>,
    /// Sparse per-frame features; dropped frames are absent.
    pub face: BTreeMap<usize, Vec<f64>>,
    pub audio: BTreeMap<usize, Vec<f64>>,
    /// Kept behavior segments (dropped ones are absent).
    pub behavior: Vec<Segment>,
    /// Open-mouth flag per frame, for the speech-presence filter.
    pub mouth: Vec<bool>,
}

/// A per-modality linear readout matrix `[dim x 2]`, entries uniform in
/// ±1 and column-scaled by the modality's view strengths.
fn draw_map(dim: usize, scale: [f64; 2], rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    (0..dim)
        .map(|_| {
            [
                rng.gen_range(-1.0..1.0) * scale[0],
                rng.gen_range(-1.0..1.0) * scale[1],
            ]
        })
        .collect()
}

/// Uniform noise with standard deviation exactly `sigma`.
fn noise(sigma: f64, rng: &mut ChaCha8Rng) -> f64 {
    if sigma == 0.0 {
        // Still consume one draw so the RNG stream (and hence every
        // downstream byte) is invariant to the sigma value.
        let _ = rng.gen_range(-1.0..1.0);
        return 0.0;
    }
    rng.gen_range(-1.0..1.0) * sigma * 3.0_f64.sqrt()
}

fn observe(map: &[[f64; 2]], z: [f64; 2], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    map.iter()
        .map(|row| row[0] * z[0] + row[1] * z[1] + noise(sigma, rng))
        .collect()
}

/// Generate the corpus in memory. RNG consumption order is fixed:
/// readout maps first, then per video: frame count, latent walk, mouth
/// walk, face rows, audio rows, behavior rows, dropout masks.
pub fn generate(spec: &SynthSpec) -> Result<Vec<SynthVideo>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let face_map = draw_map(spec.face.dim, FACE_SCALE, &mut rng);
    let audio_map = draw_map(spec.audio.dim, AUDIO_SCALE, &mut rng);
    let behavior_map = draw_map(spec.behavior.dim, BEHAVIOR_SCALE, &mut rng);

    let n_train = spec.n_videos - spec.n_devel();
    let mut videos = Vec::with_capacity(spec.n_videos);
    for i in 0..spec.n_videos {
        let frames = rng.gen_range(spec.min_frames..=spec.max_frames);

        // Latent walk: the targets.
        let mut z = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let mut targets = Vec::with_capacity(frames);
        for _ in 0..frames {
            targets.push(z);
            for zd in &mut z {
                *zd = (*zd + rng.gen_range(-spec.walk_step..spec.walk_step)).clamp(-1.0, 1.0);
            }
        }

        // Mouth-open series: a slower independent walk thresholded so
        // open runs of varied length appear, giving the filter real work.
        let mut w: f64 = rng.gen_range(-1.0..1.0);
        let mut mouth = Vec::with_capacity(frames);
        for _ in 0..frames {
            mouth.push(w > -0.1);
            w = (w + rng.gen_range(-0.3..0.3)).clamp(-1.0, 1.0);
        }

        // Observations for every frame/segment; dropout only affects
        // which ones are emitted, not the RNG stream.
        let face_rows: Vec<Vec<f64>> = (0..frames)
            .map(|f| observe(&face_map, targets[f], spec.face.noise_sigma, &mut rng))
            .collect();
        let audio_rows: Vec<Vec<f64>> = (0..frames)
            .map(|f| observe(&audio_map, targets[f], spec.audio.noise_sigma, &mut rng))
            .collect();

        let spans: Vec<(usize, usize)> = (0..frames)
            .step_by(spec.segment_len)
            .map(|s| (s, (s + spec.segment_len).min(frames)))
            .collect();
        let behavior_rows: Vec<Vec<f64>> = spans
            .iter()
            .map(|&(s, e)| {
                let mut mean = [0.0; 2];
                for f in s..e {
                    mean[0] += targets[f][0];
                    mean[1] += targets[f][1];
                }
                let len = (e - s) as f64;
                let mean = [mean[0] / len, mean[1] / len];
                observe(&behavior_map, mean, spec.behavior.noise_sigma, &mut rng)
            })
            .collect();

        // Validity dropout, then repair so every frame keeps at least one
        // observed modality (a behavior segment covering the frame counts).
        let mut face_drop: Vec<bool> = (0..frames)
            .map(|_| rng.gen_bool(spec.face.dropout_rho))
            .collect();
        let mut audio_drop: Vec<bool> = (0..frames)
            .map(|_| rng.gen_bool(spec.audio.dropout_rho))
            .collect();
        let mut seg_drop: Vec<bool> = (0..spans.len())
            .map(|_| rng.gen_bool(spec.behavior.dropout_rho))
            .collect();
        // Segment streams cannot be empty; keep the first segment if all
        // were dropped.
        if seg_drop.iter().all(|&d| d) {
            seg_drop[0] = false;
        }
        // Undrop the per-frame modality with the lower dropout rate (so a
        // modality pinned at rho = 1 stays fully invalid, as configured).
        let prefer_face = spec.face.dropout_rho <= spec.audio.dropout_rho
            && spec.face.dropout_rho < 1.0;
        for f in 0..frames {
            let seg_ok = !seg_drop[f / spec.segment_len];
            if face_drop[f] && audio_drop[f] && !seg_ok {
                if prefer_face {
                    face_drop[f] = false;
                } else {
                    audio_drop[f] = false;
                }
            }
        }

        let keep_rows = |rows: Vec<Vec<f64>>, drop: &[bool]| -> BTreeMap<usize, Vec<f64>> {
            rows.into_iter()
                .enumerate()
                .filter(|(f, _)| !drop[*f])
                .collect()
        };
        let behavior = spans
            .iter()
            .zip(behavior_rows)
            .zip(&seg_drop)
            .filter(|(_, &dropped)| !dropped)
            .map(|((&(start, end), embedding), _)| Segment {
                start,
                end,
                embedding,
            })
            .collect();

        videos.push(SynthVideo {
            id: format!("v{i:04}"),
            split: if i < n_train { Split::Train } else { Split::Devel },
            fps: spec.fps,
            targets,
            face: keep_rows(face_rows, &face_drop),
            audio: keep_rows(audio_rows, &audio_drop),
            behavior,
            mouth,
        });
    }
    Ok(videos)
}

/// Corpus layout under the output directory.
fn corpus_paths(id: &str) -> [(&'static str, PathBuf); 5] {
    [
        ("annotations", PathBuf::from(format!("annotations/{id}.csv"))),
        ("face", PathBuf::from(format!("features/face/{id}.csv"))),
        ("audio", PathBuf::from(format!("features/audio/{id}.csv"))),
        (
            "behavior",
            PathBuf::from(format!("segments/behavior_visual/{id}.csv")),
        ),
        ("mouth", PathBuf::from(format!("mouth/{id}.csv"))),
    ]
}

/// Write the corpus: one CSV per stream per video plus `manifest.toml`
/// (with paths relative to the output directory). Returns the manifest
/// path.
pub fn write_corpus(spec: &SynthSpec, videos: &[SynthVideo], out_dir: &Path) -> Result<PathBuf> {
    for sub in [
        "annotations",
        "features/face",
        "features/audio",
        "segments/behavior_visual",
        "mouth",
    ] {
        std::fs::create_dir_all(out_dir.join(sub))?;
    }
    let sentinel = LossConfig::default().invalid_sentinel;

    let mut entries = Vec::with_capacity(videos.len());
    for video in videos {
        let [(_, ann_rel), (_, face_rel), (_, audio_rel), (_, beh_rel), (_, mouth_rel)] =
            corpus_paths(&video.id);

        let mut values = Tensor::zeros(video.targets.len(), 2);
        for (f, t) in video.targets.iter().enumerate() {
            values.set(f, 0, t[0]);
            values.set(f, 1, t[1]);
        }
        let track = AnnotationTrack {
            video_id: video.id.clone(),
            values,
            sentinel,
        };
        write_annotation_csv(&out_dir.join(&ann_rel), &track)?;

        let face = FeatureStream::new(
            &video.id,
            Modality::Face,
            video.fps,
            spec.face.dim,
            video.face.clone(),
        )?;
        write_feature_csv(&out_dir.join(&face_rel), &face)?;

        let audio = FeatureStream::new(
            &video.id,
            Modality::Audio,
            video.fps,
            spec.audio.dim,
            video.audio.clone(),
        )?;
        write_feature_csv(&out_dir.join(&audio_rel), &audio)?;

        let behavior =
            SegmentStream::new(&video.id, Modality::BehaviorVisual, video.behavior.clone())?;
        write_segment_csv(&out_dir.join(&beh_rel), &behavior)?;

        let mouth = MouthSeries::new(&video.id, video.fps, video.mouth.clone())?;
        write_mouth_csv(&out_dir.join(&mouth_rel), &mouth)?;

        entries.push(ManifestEntry {
            id: video.id.clone(),
            split: video.split,
            fps: video.fps,
            annotations: ann_rel,
            features: [(Modality::Face, face_rel), (Modality::Audio, audio_rel)]
                .into_iter()
                .collect(),
            segments: [(Modality::BehaviorVisual, beh_rel)].into_iter().collect(),
        });
    }

    let manifest_path = out_dir.join("manifest.toml");
    save_manifest(&manifest_path, &Manifest { videos: entries })?;
    Ok(manifest_path)
}

/// Ridge-regularized least-squares readout (with bias) of `ys` from
/// `xs`, returning the fitted predictions. Used to verify that each
/// stream carries linearly recoverable signal. The tiny ridge term
/// keeps the normal equations solvable when features span fewer
/// dimensions than they occupy (e.g. noiseless linear maps of a 2-D
/// latent), while perturbing well-posed fits only at the 1e-8 level.
pub fn linear_probe(xs: &[Vec<f64>], ys: &[[f64; 2]]) -> Result<Vec<[f64; 2]>> {
    if xs.len() != ys.len() || xs.is_empty() {
        return Err(Error::data(format!(
            "probe needs matching nonempty samples, got {} features / {} targets",
            xs.len(),
            ys.len()
        )));
    }
    let d = xs[0].len() + 1; // bias column
    let n = xs.len();
    let row = |i: usize, j: usize| -> f64 {
        if j < d - 1 {
            xs[i][j]
        } else {
            1.0
        }
    };

    // Normal equations: (XᵀX + λI) W = XᵀY, solved by Gaussian
    // elimination with partial pivoting (d is small).
    let mut a = vec![vec![0.0; d]; d];
    let mut b = vec![[0.0; 2]; d];
    for i in 0..n {
        for r in 0..d {
            let xr = row(i, r);
            for (c, ac) in a[r].iter_mut().enumerate() {
                *ac += xr * row(i, c);
            }
            b[r][0] += xr * ys[i][0];
            b[r][1] += xr * ys[i][1];
        }
    }
    let ridge = 1e-8 * n as f64;
    for (r, ar) in a.iter_mut().enumerate() {
        ar[r] += ridge;
    }
    for col in 0..d {
        let pivot = (col..d)
            .max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs()))
            .expect("nonempty range");
        if a[pivot][col].abs() < 1e-12 {
            return Err(Error::numeric("probe design matrix is singular"));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for r in 0..d {
            if r == col {
                continue;
            }
            let factor = a[r][col] / a[col][col];
            for c in 0..d {
                a[r][c] -= factor * a[col][c];
            }
            b[r][0] -= factor * b[col][0];
            b[r][1] -= factor * b[col][1];
        }
    }
    let w: Vec<[f64; 2]> = (0..d)
        .map(|r| [b[r][0] / a[r][r], b[r][1] / a[r][r]])
        .collect();

    Ok((0..n)
        .map(|i| {
            let mut p = [0.0; 2];
            for r in 0..d {
                p[0] += row(i, r) * w[r][0];
                p[1] += row(i, r) * w[r][1];
            }
            p
        })
        .collect())
}
