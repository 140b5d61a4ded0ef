//! Corpus manifest: which videos exist, their split, frame rate, and where
//! each modality's files live. Stored as TOML; relative paths resolve
//! against the manifest's directory at load time.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Modality;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Devel,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "devel" => Ok(Split::Devel),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!(
                "unknown split '{other}' (expected train, devel, or test)"
            ))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Devel => "devel",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub fps: f64,
    pub annotations: PathBuf,
    /// Per-frame feature CSV per modality (face, audio, …).
    #[serde(default)]
    pub features: BTreeMap<Modality, PathBuf>,
    /// Segment-embedding CSV per modality (behavior variants).
    #[serde(default)]
    pub segments: BTreeMap<Modality, PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub videos: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn split_entries(&self, split: Split) -> Vec<&ManifestEntry> {
        self.videos.iter().filter(|e| e.split == split).collect()
    }

    pub fn entry(&self, id: &str) -> Option<&ManifestEntry> {
        self.videos.iter().find(|e| e.id == id)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.videos {
            if !seen.insert(&e.id) {
                return Err(Error::data(format!("duplicate video id '{}'", e.id)));
            }
            if e.fps <= 0.0 || !e.fps.is_finite() {
                return Err(Error::data(format!(
                    "video '{}' has invalid fps {}",
                    e.id, e.fps
                )));
            }
            for path in e.paths() {
                if !path.is_file() {
                    return Err(Error::data(format!(
                        "video '{}' references missing file {}",
                        e.id,
                        path.display()
                    )));
                }
            }
        }
        Ok(())
    }
}

impl ManifestEntry {
    fn paths(&self) -> Vec<&PathBuf> {
        let mut v = vec![&self.annotations];
        v.extend(self.features.values());
        v.extend(self.segments.values());
        v
    }

    fn resolve_paths(&mut self, base: &Path) {
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&p);
            }
        };
        resolve(&mut self.annotations);
        for p in self.features.values_mut() {
            resolve(p);
        }
        for p in self.segments.values_mut() {
            resolve(p);
        }
    }
}

/// Parse a manifest, resolve relative paths against its directory, and
/// verify ids are unique and every referenced file exists.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read manifest {}: {e}", path.display())))?;
    let mut manifest: Manifest = toml::from_str(&text)
        .map_err(|e| Error::data(format!("manifest {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    for entry in &mut manifest.videos {
        entry.resolve_paths(base);
    }
    manifest.validate()?;
    Ok(manifest)
}

pub fn save_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let text = toml::to_string_pretty(manifest)
        .map_err(|e| Error::data(format!("cannot serialize manifest: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}
