use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::bundle::{FeatureBundle, GroundTruth};
use crate::error::{Error, Result};

/// How per-reference F1 scores of one video are aggregated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum F1Aggregation {
    /// Mean over references (TVSum convention).
    #[default]
    Avg,
    /// Best reference (SumMe convention).
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub video_id: String,
    /// Frame feature file, relative to the manifest directory.
    pub frames: PathBuf,
    pub captions: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<PathBuf>,
    pub split: String,
}

/// Which text file feeds language-guided attention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextMode {
    #[default]
    Generic,
    Query,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    #[serde(default)]
    pub f1_aggregation: F1Aggregation,
    pub entries: Vec<ManifestEntry>,
    /// Directory that relative paths resolve against; not serialised.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, f1_aggregation: F1Aggregation) -> Self {
        DatasetManifest {
            f1_aggregation,
            entries: Vec::new(),
            root: root.into(),
        }
    }

    /// Parses and validates a manifest: unique ids, every referenced file present.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.video_id.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate video_id {}",
                    e.video_id
                )));
            }
            let paths = [
                Some(&e.frames),
                Some(&e.captions),
                e.query.as_ref(),
                e.ground_truth.as_ref(),
            ];
            for p in paths.into_iter().flatten() {
                let full = self.resolve(p);
                if !full.is_file() {
                    return Err(Error::Validation(format!(
                        "{}: missing file {}",
                        e.video_id,
                        full.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, tag: &str) -> DatasetManifest {
        DatasetManifest {
            f1_aggregation: self.f1_aggregation,
            entries: self
                .entries
                .iter()
                .filter(|e| e.split == tag)
                .cloned()
                .collect(),
            root: self.root.clone(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn load_bundle(&self, entry: &ManifestEntry, mode: TextMode) -> Result<FeatureBundle> {
        let text = match mode {
            TextMode::Generic => &entry.captions,
            TextMode::Query => entry.query.as_ref().ok_or_else(|| {
                Error::Config(format!("{}: query mode but no query file", entry.video_id))
            })?,
        };
        let b = FeatureBundle::load(self.resolve(&entry.frames), self.resolve(text))?;
        if b.video_id != entry.video_id {
            return Err(Error::Validation(format!(
                "manifest id {} but file id {}",
                entry.video_id, b.video_id
            )));
        }
        Ok(b)
    }

    /// Ground truth for an entry, validated against `n_frames`; `None` when unlabeled.
    pub fn load_ground_truth(
        &self,
        entry: &ManifestEntry,
        n_frames: usize,
    ) -> Result<Option<GroundTruth>> {
        entry
            .ground_truth
            .as_ref()
            .map(|p| {
                let gt = GroundTruth::load(self.resolve(p))?;
                gt.validate(n_frames)?;
                Ok(gt)
            })
            .transpose()
    }
}
