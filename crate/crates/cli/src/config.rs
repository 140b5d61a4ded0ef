//! Run configuration: one TOML file per run plus command-line overrides.
//! Flags always win over the file.
//!
//! ```toml
//! seed = 7
//!
//! [synth]
//! n_videos = 200
//!
//! [train]
//! max_epochs = 30
//! learning_rate = 1e-3
//! [train.model]
//! kind = "dcmmoe"
//! # ... full model spec; omit [train.model] entirely to let --model
//! # pick a default architecture sized from the manifest.
//!
//! [filter]
//! mouth_dir = "mouth"
//! [filter.thresholds]
//! max_gap_s = 0.5
//! ```

use std::path::{Path, PathBuf};

use serde::Deserialize;

use va_fusion_core::dataio::{Manifest, Modality};
use va_fusion_core::filter::FilterConfig;
use va_fusion_core::heads::{AudioHeadConfig, BehaviorHeadConfig, FaceHeadConfig};
use va_fusion_core::fusion::{DcmmoeConfig, RaavConfig};
use va_fusion_core::metrics::LossConfig;
use va_fusion_core::trainer::{
    AudioSegmentation, BehaviorVariant, FusionWindows, ModelKind, ModelSpec, PlateauConfig,
    TrainConfig,
};
use va_fusion_core::{Error, Result};

use crate::synth::SynthSpec;

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    /// Run seed; `--seed` overrides, commands default to 0.
    pub seed: Option<u64>,
    pub synth: Option<SynthSpec>,
    pub train: Option<TrainSection>,
    pub filter: Option<FilterSection>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Full model spec; when absent, `--model` selects a default
    /// architecture with input widths read from the manifest.
    pub model: Option<ModelSpec>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub weight_decay: Option<f64>,
    pub max_epochs: Option<usize>,
    pub grad_clip_norm: Option<f64>,
    pub schedule: Option<PlateauConfig>,
    pub loss: Option<LossConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    /// Directory of per-video mouth CSVs (`<dir>/<video_id>.csv`),
    /// relative paths resolving against the manifest's directory.
    pub mouth_dir: PathBuf,
    pub thresholds: FilterConfig,
    /// Audio segmentation whose windows are judged by the filter.
    pub segmentation: AudioSegmentation,
}

impl Default for FilterSection {
    fn default() -> Self {
        FilterSection {
            mouth_dir: PathBuf::from("mouth"),
            thresholds: FilterConfig::default(),
            segmentation: AudioSegmentation::default(),
        }
    }
}

/// Parse the run config; a missing `--config` flag means all defaults.
pub fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::config(format!("config {}: {e}", path.display())))
}

/// Build the effective training configuration from the file section,
/// the manifest (for default input widths), and the flag overrides.
pub fn resolve_train_config(
    file: &FileConfig,
    manifest: &Manifest,
    model_flag: Option<ModelKind>,
    seed_flag: Option<u64>,
) -> Result<TrainConfig> {
    let section = file.train.clone().unwrap_or_default();
    let spec = resolve_model_spec(&section, manifest, model_flag)?;
    let seed = seed_flag.or(file.seed).unwrap_or(0);
    let mut cfg = TrainConfig::for_spec(spec, seed);
    if let Some(v) = section.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = section.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = section.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = section.max_epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = section.grad_clip_norm {
        cfg.grad_clip_norm = v;
    }
    if let Some(v) = section.schedule {
        cfg.schedule = v;
    }
    if let Some(v) = section.loss {
        cfg.loss = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_model_spec(
    section: &TrainSection,
    manifest: &Manifest,
    flag: Option<ModelKind>,
) -> Result<ModelSpec> {
    match (&section.model, flag) {
        (Some(spec), None) => Ok(spec.clone()),
        (Some(spec), Some(kind)) if spec.kind() == kind => Ok(spec.clone()),
        // The flag names a different kind than the config: the flag wins
        // and the architecture falls back to defaults sized from data.
        (_, Some(kind)) => default_spec(kind, manifest),
        (None, None) => Err(Error::config(
            "no model selected: pass --model or set [train.model] in the config",
        )),
    }
}

/// Input widths advertised by the corpus: per-modality feature and
/// segment dimensions, read from the first CSV header that mentions
/// each modality.
#[derive(Debug, Default)]
pub struct CorpusDims {
    pub features: Vec<(Modality, usize)>,
    pub segments: Vec<(Modality, usize)>,
}

impl CorpusDims {
    fn feature(&self, m: Modality) -> Option<usize> {
        self.features.iter().find(|(k, _)| *k == m).map(|&(_, d)| d)
    }
    fn segment(&self, m: Modality) -> Option<usize> {
        self.segments.iter().find(|(k, _)| *k == m).map(|&(_, d)| d)
    }
}

pub fn corpus_dims(manifest: &Manifest) -> Result<CorpusDims> {
    let mut dims = CorpusDims::default();
    for entry in &manifest.videos {
        for (&modality, path) in &entry.features {
            if dims.feature(modality).is_none() {
                dims.features.push((modality, csv_width(path, 1)?));
            }
        }
        for (&modality, path) in &entry.segments {
            if dims.segment(modality).is_none() {
                dims.segments.push((modality, csv_width(path, 2)?));
            }
        }
    }
    Ok(dims)
}

/// Column count of a CSV header minus its index columns.
fn csv_width(path: &Path, index_cols: usize) -> Result<usize> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header = rdr.headers()?.len();
    if header <= index_cols {
        return Err(Error::data(format!(
            "{}: header has no feature columns",
            path.display()
        )));
    }
    Ok(header - index_cols)
}

fn default_spec(kind: ModelKind, manifest: &Manifest) -> Result<ModelSpec> {
    let dims = corpus_dims(manifest)?;
    let feature = |m: Modality| {
        dims.feature(m).ok_or_else(|| {
            Error::config(format!("manifest advertises no {m} features for --model {kind}"))
        })
    };
    match kind {
        ModelKind::Face => Ok(ModelSpec::Face {
            config: FaceHeadConfig {
                input_dim: feature(Modality::Face)?,
                ..FaceHeadConfig::default()
            },
        }),
        ModelKind::Behavior => {
            let (variant, dim) = if let Some(d) = dims.segment(Modality::BehaviorVisual) {
                (BehaviorVariant::Visual, d)
            } else if let Some(d) = dims.segment(Modality::BehaviorMultimodal) {
                (BehaviorVariant::Multimodal, d)
            } else {
                return Err(Error::config(
                    "manifest advertises no behavior segment stream for --model behavior",
                ));
            };
            let config = match variant {
                BehaviorVariant::Visual => BehaviorHeadConfig::visual(dim),
                BehaviorVariant::Multimodal => BehaviorHeadConfig::multimodal(dim),
            };
            Ok(ModelSpec::Behavior { variant, config })
        }
        ModelKind::Audio => Ok(ModelSpec::Audio {
            config: AudioHeadConfig {
                input_dim: feature(Modality::Audio)?,
                ..AudioHeadConfig::default()
            },
            segmentation: AudioSegmentation::default(),
        }),
        ModelKind::Dcmmoe => {
            let mut modality_dims = std::collections::BTreeMap::new();
            for (m, d) in dims.features.iter().chain(&dims.segments) {
                modality_dims.insert(m.to_string(), *d);
            }
            if modality_dims.len() < 2 {
                return Err(Error::config(
                    "fusion needs at least two modalities in the manifest",
                ));
            }
            Ok(ModelSpec::Dcmmoe {
                config: DcmmoeConfig {
                    modality_dims,
                    ..DcmmoeConfig::default()
                },
                windows: FusionWindows::default(),
            })
        }
        ModelKind::Raav => {
            let audio_dim = feature(Modality::Audio)?;
            let mut visual_dims = std::collections::BTreeMap::new();
            for (m, d) in dims.features.iter().chain(&dims.segments) {
                if *m != Modality::Audio {
                    visual_dims.insert(m.to_string(), *d);
                }
            }
            if visual_dims.is_empty() {
                return Err(Error::config(
                    "reliability fusion needs at least one visual modality",
                ));
            }
            Ok(ModelSpec::Raav {
                config: RaavConfig {
                    visual_dims,
                    audio_dim,
                    ..RaavConfig::default()
                },
                windows: FusionWindows::default(),
            })
        }
    }
}
