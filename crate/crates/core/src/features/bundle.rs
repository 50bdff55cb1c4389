use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::format::{read_feature_file, FeatureKind};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Frame embeddings of one video together with its text side.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    pub video_id: String,
    /// `N×D`
    pub frames: Tensor,
    pub fps: f64,
    /// `M×D` caption embeddings, or `1×D` for a query.
    pub text: Tensor,
    /// [`FeatureKind::Captions`] or [`FeatureKind::Query`].
    pub text_kind: FeatureKind,
}

impl FeatureBundle {
    pub fn new(
        video_id: impl Into<String>,
        frames: Tensor,
        fps: f64,
        text: Tensor,
        text_kind: FeatureKind,
    ) -> Result<Self> {
        let b = FeatureBundle {
            video_id: video_id.into(),
            frames,
            fps,
            text,
            text_kind,
        };
        b.validate()?;
        Ok(b)
    }

    /// Loads a frames file and a captions-or-query file for the same video.
    pub fn load(frames_path: impl AsRef<Path>, text_path: impl AsRef<Path>) -> Result<Self> {
        let frames = read_feature_file(frames_path.as_ref())?;
        let text = read_feature_file(text_path.as_ref())?;
        if frames.kind != FeatureKind::Frames {
            return Err(Error::Validation(format!(
                "{}: expected kind=frames",
                frames_path.as_ref().display()
            )));
        }
        if frames.video_id != text.video_id {
            return Err(Error::Validation(format!(
                "video_id mismatch: {} vs {}",
                frames.video_id, text.video_id
            )));
        }
        Self::new(
            frames.video_id,
            frames.matrix,
            frames.fps,
            text.matrix,
            text.kind,
        )
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let v = |m: String| Err(Error::Validation(format!("{}: {m}", self.video_id)));
        if self.frames.shape().len() != 2 || self.text.shape().len() != 2 {
            return v("embeddings must be matrices".into());
        }
        if self.text_kind == FeatureKind::Frames {
            return v("text side cannot have kind=frames".into());
        }
        if self.frames.cols() != self.text.cols() {
            return v(format!(
                "frame dim {} != text dim {}",
                self.frames.cols(),
                self.text.cols()
            ));
        }
        if self.text_kind == FeatureKind::Query && self.text.rows() != 1 {
            return v(format!("query must be 1 row, got {}", self.text.rows()));
        }
        if !self.frames.is_finite() || !self.text.is_finite() {
            return v("non-finite embedding".into());
        }
        Ok(())
    }
}

/// Per-video annotations, stored as JSON next to the feature files.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub video_id: String,
    /// Binary keyframe label per frame.
    pub keyframe_labels: Vec<u8>,
    /// One importance-score array per annotator, each in `[0, 1]`.
    #[serde(default)]
    pub annotator_scores: Vec<Vec<f32>>,
    /// One binary per-frame summary mask per annotator.
    #[serde(default)]
    pub reference_summaries: Vec<Vec<u8>>,
    /// Shot starts plus the final `N`; synthesised uniformly when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shot_boundaries: Option<Vec<usize>>,
}

impl GroundTruth {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn num_frames(&self) -> usize {
        self.keyframe_labels.len()
    }

    pub fn validate(&self, n_frames: usize) -> Result<()> {
        let v = |m: String| {
            Err(Error::Validation(format!(
                "{} ground truth: {m}",
                self.video_id
            )))
        };
        if self.keyframe_labels.len() != n_frames {
            return v(format!(
                "{} labels for {n_frames} frames",
                self.keyframe_labels.len()
            ));
        }
        if self.keyframe_labels.iter().any(|&l| l > 1) {
            return v("labels must be 0 or 1".into());
        }
        for s in &self.annotator_scores {
            if s.len() != n_frames {
                return v(format!("annotator scores of length {}", s.len()));
            }
            if s.iter().any(|x| !(0.0..=1.0).contains(x)) {
                return v("annotator scores outside [0, 1]".into());
            }
        }
        for m in &self.reference_summaries {
            if m.len() != n_frames || m.iter().any(|&x| x > 1) {
                return v("reference summaries must be binary masks of length N".into());
            }
        }
        if let Some(b) = &self.shot_boundaries {
            validate_boundaries(b, n_frames)?;
        }
        Ok(())
    }

    /// Stored boundaries or uniform 5-second shots.
    pub fn boundaries_or_uniform(&self, fps: f64) -> Vec<usize> {
        self.shot_boundaries
            .clone()
            .unwrap_or_else(|| uniform_shot_boundaries(self.num_frames(), fps))
    }
}

pub const DEFAULT_SHOT_SECONDS: f64 = 5.0;

/// Shot length in frames for uniform segmentation: `ceil(5·fps)`, at least 1.
pub fn uniform_shot_len(fps: f64) -> usize {
    ((DEFAULT_SHOT_SECONDS * fps).ceil() as usize).max(1)
}

/// Uniform boundaries `[0, L, 2L, …, N]` with `L = ceil(5·fps)`.
pub fn uniform_shot_boundaries(n_frames: usize, fps: f64) -> Vec<usize> {
    let len = uniform_shot_len(fps);
    let mut b: Vec<usize> = (0..n_frames).step_by(len).collect();
    b.push(n_frames);
    b
}

/// Boundaries must start at 0, end at `N` and increase strictly.
pub fn validate_boundaries(b: &[usize], n_frames: usize) -> Result<()> {
    if b.len() < 2 || b[0] != 0 || *b.last().unwrap() != n_frames {
        return Err(Error::Validation(format!(
            "shot boundaries must run from 0 to {n_frames}, got {b:?}"
        )));
    }
    if b.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Validation(
            "shot boundaries not strictly increasing".into(),
        ));
    }
    Ok(())
}
