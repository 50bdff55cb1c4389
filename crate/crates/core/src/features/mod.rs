//! Feature files, datasets and the synthetic generator.

mod bundle;
mod format;
mod manifest;
mod synthetic;

pub use bundle::{
    uniform_shot_boundaries, uniform_shot_len, validate_boundaries, FeatureBundle, GroundTruth,
    DEFAULT_SHOT_SECONDS,
};
pub use format::{read_feature_file, write_feature_file, FeatureFile, FeatureKind, FEATURE_MAGIC};
pub use manifest::{DatasetManifest, F1Aggregation, ManifestEntry, TextMode};
pub use synthetic::{
    generate_query_pair_dataset, generate_synthetic_dataset, synthesize_video, synthetic_shot_len,
    two_topic_video, video_id, FrameRole, SyntheticConfig, SyntheticVideo, TopicSpace,
    TwoTopicVideo,
};
