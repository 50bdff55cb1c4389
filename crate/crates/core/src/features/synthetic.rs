//! Seeded synthetic datasets with a known language/keyframe relationship.
//!
//! A fixed set of orthonormal topic directions is drawn per dataset seed.
//! Each video has a primary topic: its keyframes lie near that topic and so
//! do its caption and query embeddings. A second "distractor" topic also
//! appears in the video but is labelled background, so scoring frames well
//! requires looking at the text. Background frames come from per-shot scene
//! vectors orthogonal to every topic.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::bundle::{uniform_shot_boundaries, uniform_shot_len, GroundTruth};
use super::format::{write_feature_file, FeatureFile, FeatureKind};
use super::manifest::{DatasetManifest, F1Aggregation, ManifestEntry};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::summary::{build_summary, DEFAULT_BUDGET_FRACTION};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_videos: usize,
    pub n_frames: usize,
    pub dim: usize,
    pub keyframe_fraction: f64,
    pub distractor_fraction: f64,
    pub n_topics: usize,
    pub n_captions: usize,
    pub fps: f64,
    /// Standard deviation of the isotropic frame noise (relative to unit signal).
    pub noise: f32,
    pub caption_noise: f32,
    pub annotators: usize,
    /// Fraction of videos (rounded up) tagged `test`.
    pub test_fraction: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 0,
            n_videos: 8,
            n_frames: 200,
            dim: 32,
            keyframe_fraction: 0.15,
            distractor_fraction: 0.15,
            n_topics: 4,
            n_captions: 10,
            fps: 2.0,
            noise: 0.3,
            caption_noise: 0.4,
            annotators: 3,
            test_fraction: 0.25,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic: {m}")));
        if !(self.keyframe_fraction > 0.0 && self.keyframe_fraction < 1.0) {
            return bad("keyframe_fraction must be in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.distractor_fraction) {
            return bad("distractor_fraction must be in [0, 1)");
        }
        if self.dim < 4 {
            return bad("dim must be at least 4");
        }
        if self.n_topics < 2 || 2 * self.n_topics > self.dim {
            return bad("need 2 <= n_topics <= dim/2");
        }
        if self.n_videos == 0 || self.n_frames == 0 || self.n_captions == 0 {
            return bad("n_videos, n_frames and n_captions must be positive");
        }
        if self.fps.is_nan() || self.fps <= 0.0 {
            return bad("fps must be positive");
        }
        if self.noise < 0.0 || self.caption_noise < 0.0 {
            return bad("noise must be nonnegative");
        }
        Ok(())
    }
}

/// Orthonormal topic directions shared by every video generated from one seed.
#[derive(Clone, Debug)]
pub struct TopicSpace {
    pub dim: usize,
    pub topics: Vec<Vec<f32>>,
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= n);
}

fn project_out(v: &mut [f64], basis: &[Vec<f32>]) {
    for b in basis {
        let d: f64 = v.iter().zip(b).map(|(x, y)| x * *y as f64).sum();
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * *y as f64);
    }
}

impl TopicSpace {
    pub fn new(seed: u64, dim: usize, n_topics: usize) -> Self {
        // topics depend only on the dataset seed
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7071_6373);
        let mut topics: Vec<Vec<f32>> = Vec::with_capacity(n_topics);
        while topics.len() < n_topics {
            let mut v = gaussian(&mut rng, dim);
            project_out(&mut v, &topics);
            normalize(&mut v);
            topics.push(v.iter().map(|&x| x as f32).collect());
        }
        TopicSpace { dim, topics }
    }

    /// Unit vector near `base` with isotropic noise of total norm ≈ `noise`.
    fn noisy(&self, rng: &mut ChaCha8Rng, base: &[f64], noise: f32) -> Vec<f32> {
        let g = gaussian(rng, self.dim);
        let scale = noise as f64 / (self.dim as f64).sqrt();
        let mut v: Vec<f64> = base.iter().zip(&g).map(|(b, n)| b + scale * n).collect();
        normalize(&mut v);
        v.into_iter().map(|x| x as f32).collect()
    }

    fn topic(&self, t: usize) -> Vec<f64> {
        self.topics[t].iter().map(|&x| x as f64).collect()
    }

    /// Random unit vector orthogonal to all topics.
    fn scene(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut v = gaussian(rng, self.dim);
        project_out(&mut v, &self.topics);
        normalize(&mut v);
        v
    }

    /// A query embedding near topic `t`.
    pub fn query(&self, rng: &mut ChaCha8Rng, t: usize, noise: f32) -> Tensor {
        Tensor::new(&[1, self.dim], self.noisy(rng, &self.topic(t), noise)).expect("shape")
    }
}

/// Role of a frame in a synthetic video.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameRole {
    Background,
    /// Near the video's primary topic; labelled keyframe.
    Key,
    /// Near another topic; labelled background.
    Distractor,
}

#[derive(Clone, Debug)]
pub struct SyntheticVideo {
    pub frames: FeatureFile,
    pub captions: FeatureFile,
    pub query: FeatureFile,
    pub ground_truth: GroundTruth,
    pub roles: Vec<FrameRole>,
    pub topic: usize,
    pub distractor_topic: usize,
}

/// Picks whole shots (in random order) covering exactly `count` frames; the
/// last shot may be covered partially from its start.
fn assign_frames(
    rng: &mut ChaCha8Rng,
    boundaries: &[usize],
    free: &mut Vec<usize>,
    count: usize,
    role: FrameRole,
    roles: &mut [FrameRole],
) -> Result<()> {
    let mut left = count;
    while left > 0 {
        if free.is_empty() {
            return Err(Error::Config(
                "synthetic: not enough shots for the requested key/distractor fractions".into(),
            ));
        }
        let shot = free.swap_remove(rng.random_range(0..free.len()));
        let (s, e) = (boundaries[shot], boundaries[shot + 1]);
        let take = left.min(e - s);
        roles[s..s + take].fill(role);
        left -= take;
    }
    Ok(())
}

/// Ground truth for frames with known roles: keyframe labels plus noisy
/// per-annotator scores and the knapsack summaries they imply.
fn annotate(
    rng: &mut ChaCha8Rng,
    video_id: &str,
    roles: &[FrameRole],
    boundaries: &[usize],
    annotators: usize,
) -> Result<GroundTruth> {
    let labels: Vec<u8> = roles.iter().map(|&r| (r == FrameRole::Key) as u8).collect();
    let mut annotator_scores = Vec::with_capacity(annotators);
    let mut reference_summaries = Vec::with_capacity(annotators);
    for _ in 0..annotators {
        let s: Vec<f32> = roles
            .iter()
            .map(|r| {
                let base = match r {
                    FrameRole::Key => 0.85,
                    FrameRole::Distractor => 0.35,
                    FrameRole::Background => 0.15,
                };
                (base + rng.random_range(-0.1f32..0.1)).clamp(0.0, 1.0)
            })
            .collect();
        reference_summaries.push(build_summary(&s, boundaries, DEFAULT_BUDGET_FRACTION)?.mask);
        annotator_scores.push(s);
    }
    Ok(GroundTruth {
        video_id: video_id.to_string(),
        keyframe_labels: labels,
        annotator_scores,
        reference_summaries,
        shot_boundaries: Some(boundaries.to_vec()),
    })
}

/// Generates one video in memory.
pub fn synthesize_video(
    cfg: &SyntheticConfig,
    space: &TopicSpace,
    video_id: &str,
    video_seed: u64,
) -> Result<SyntheticVideo> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(video_seed);
    let n = cfg.n_frames;
    let boundaries = uniform_shot_boundaries(n, cfg.fps);
    let topic = rng.random_range(0..cfg.n_topics);
    let distractor_topic = (topic + rng.random_range(1..cfg.n_topics)) % cfg.n_topics;

    let n_key = ((cfg.keyframe_fraction * n as f64).round() as usize).max(1);
    let n_dis = (cfg.distractor_fraction * n as f64).round() as usize;
    let mut roles = vec![FrameRole::Background; n];
    let mut free: Vec<usize> = (0..boundaries.len() - 1).collect();
    free.shuffle(&mut rng);
    assign_frames(
        &mut rng,
        &boundaries,
        &mut free,
        n_key,
        FrameRole::Key,
        &mut roles,
    )?;
    assign_frames(
        &mut rng,
        &boundaries,
        &mut free,
        n_dis,
        FrameRole::Distractor,
        &mut roles,
    )?;

    let key_dir = space.topic(topic);
    let dis_dir = space.topic(distractor_topic);
    let mut data = Vec::with_capacity(n * cfg.dim);
    for w in boundaries.windows(2) {
        let scene = space.scene(&mut rng);
        for role in &roles[w[0]..w[1]] {
            let base: Vec<f64> = match role {
                FrameRole::Background => scene.clone(),
                FrameRole::Key => key_dir
                    .iter()
                    .zip(&scene)
                    .map(|(t, s)| t + 0.5 * s)
                    .collect(),
                FrameRole::Distractor => dis_dir
                    .iter()
                    .zip(&scene)
                    .map(|(t, s)| t + 0.5 * s)
                    .collect(),
            };
            data.extend(space.noisy(&mut rng, &base, cfg.noise));
        }
    }
    let frames = Tensor::new(&[n, cfg.dim], data)?;

    let mut cap = Vec::with_capacity(cfg.n_captions * cfg.dim);
    for _ in 0..cfg.n_captions {
        cap.extend(space.noisy(&mut rng, &key_dir, cfg.caption_noise));
    }
    let captions = Tensor::new(&[cfg.n_captions, cfg.dim], cap)?;
    let query = space.query(&mut rng, topic, cfg.caption_noise / 2.0);

    let ground_truth = annotate(&mut rng, video_id, &roles, &boundaries, cfg.annotators)?;
    Ok(SyntheticVideo {
        frames: FeatureFile::new(video_id, FeatureKind::Frames, cfg.fps, frames),
        captions: FeatureFile::new(video_id, FeatureKind::Captions, cfg.fps, captions),
        query: FeatureFile::new(video_id, FeatureKind::Query, cfg.fps, query),
        ground_truth,
        roles,
        topic,
        distractor_topic,
    })
}

pub fn video_id(seed: u64, index: usize) -> String {
    format!("syn{seed}_{index:03}")
}

fn test_count(cfg: &SyntheticConfig) -> usize {
    if cfg.n_videos >= 2 {
        ((cfg.test_fraction * cfg.n_videos as f64).ceil() as usize).min(cfg.n_videos - 1)
    } else {
        0
    }
}

fn check_out_dir(out_dir: &Path) -> Result<()> {
    if !out_dir.is_dir() {
        return Err(Error::Config(format!(
            "output directory {} does not exist",
            out_dir.display()
        )));
    }
    Ok(())
}

fn write_config(cfg: &SyntheticConfig, out_dir: &Path) -> Result<()> {
    let p = out_dir.join("synthetic_config.json");
    fs::write(&p, serde_json::to_string_pretty(cfg).expect("serialisable"))
        .map_err(|e| Error::io(p, e))
}

/// Writes `n_videos` synthetic videos plus `manifest.json` into `out_dir`.
pub fn generate_synthetic_dataset(
    cfg: &SyntheticConfig,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    cfg.validate()?;
    check_out_dir(out_dir)?;
    let space = TopicSpace::new(cfg.seed, cfg.dim, cfg.n_topics);
    let n_test = test_count(cfg);
    let mut manifest = DatasetManifest::new(out_dir, F1Aggregation::Avg);
    let mut seeder = ChaCha8Rng::seed_from_u64(cfg.seed);
    for i in 0..cfg.n_videos {
        let id = video_id(cfg.seed, i);
        let v = synthesize_video(cfg, &space, &id, seeder.random())?;
        let names = [
            format!("{id}.frames.feat"),
            format!("{id}.captions.feat"),
            format!("{id}.query.feat"),
            format!("{id}.gt.json"),
        ];
        write_feature_file(&v.frames, out_dir.join(&names[0]))?;
        write_feature_file(&v.captions, out_dir.join(&names[1]))?;
        write_feature_file(&v.query, out_dir.join(&names[2]))?;
        v.ground_truth.save(out_dir.join(&names[3]))?;
        let split = if i >= cfg.n_videos - n_test {
            "test"
        } else {
            "train"
        };
        manifest.entries.push(ManifestEntry {
            video_id: id,
            frames: names[0].clone().into(),
            captions: names[1].clone().into(),
            query: Some(names[2].clone().into()),
            ground_truth: Some(names[3].clone().into()),
            split: split.into(),
        });
    }
    manifest.save(out_dir.join("manifest.json"))?;
    write_config(cfg, out_dir)?;
    Ok(manifest)
}

/// A video containing two topics in equal measure, with one query per topic.
#[derive(Clone, Debug)]
pub struct TwoTopicVideo {
    pub frames: Tensor,
    pub fps: f64,
    pub boundaries: Vec<usize>,
    pub topics: [usize; 2],
    pub queries: [Tensor; 2],
    /// Per-frame topic membership masks.
    pub masks: [Vec<u8>; 2],
}

/// Builds a two-topic video from the topic space of `cfg.seed`; each topic
/// occupies `keyframe_fraction` of the frames.
pub fn two_topic_video(cfg: &SyntheticConfig, video_seed: u64) -> Result<TwoTopicVideo> {
    cfg.validate()?;
    let space = TopicSpace::new(cfg.seed, cfg.dim, cfg.n_topics);
    let mut rng = ChaCha8Rng::seed_from_u64(video_seed);
    let a = rng.random_range(0..cfg.n_topics);
    let b = (a + rng.random_range(1..cfg.n_topics)) % cfg.n_topics;
    let n = cfg.n_frames;
    let boundaries = uniform_shot_boundaries(n, cfg.fps);
    let per = ((cfg.keyframe_fraction * n as f64).round() as usize).max(1);
    let mut roles = vec![FrameRole::Background; n];
    let mut free: Vec<usize> = (0..boundaries.len() - 1).collect();
    free.shuffle(&mut rng);
    assign_frames(
        &mut rng,
        &boundaries,
        &mut free,
        per,
        FrameRole::Key,
        &mut roles,
    )?;
    assign_frames(
        &mut rng,
        &boundaries,
        &mut free,
        per,
        FrameRole::Distractor,
        &mut roles,
    )?;
    let (da, db) = (space.topic(a), space.topic(b));
    let mut data = Vec::with_capacity(n * cfg.dim);
    for w in boundaries.windows(2) {
        let scene = space.scene(&mut rng);
        for role in &roles[w[0]..w[1]] {
            let base: Vec<f64> = match role {
                FrameRole::Background => scene.clone(),
                FrameRole::Key => da.iter().zip(&scene).map(|(t, s)| t + 0.5 * s).collect(),
                FrameRole::Distractor => db.iter().zip(&scene).map(|(t, s)| t + 0.5 * s).collect(),
            };
            data.extend(space.noisy(&mut rng, &base, cfg.noise));
        }
    }
    let masks = [
        roles.iter().map(|&r| (r == FrameRole::Key) as u8).collect(),
        roles
            .iter()
            .map(|&r| (r == FrameRole::Distractor) as u8)
            .collect(),
    ];
    Ok(TwoTopicVideo {
        frames: Tensor::new(&[n, cfg.dim], data)?,
        fps: cfg.fps,
        boundaries,
        topics: [a, b],
        queries: [
            space.query(&mut rng, a, cfg.caption_noise / 2.0),
            space.query(&mut rng, b, cfg.caption_noise / 2.0),
        ],
        masks,
    })
}

/// Writes `n_videos` two-topic videos, each stored twice:
/// entry `{id}a` pairs the frames with the first topic's query and labels that
/// topic's frames as keyframes, entry `{id}b` does the same for the second.
/// Training on both entries teaches query-conditional scoring. The caption
/// file of each entry holds the query embedding as a single caption.
pub fn generate_query_pair_dataset(
    cfg: &SyntheticConfig,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    cfg.validate()?;
    check_out_dir(out_dir)?;
    let n_test = test_count(cfg);
    let mut manifest = DatasetManifest::new(out_dir, F1Aggregation::Avg);
    let mut seeder = ChaCha8Rng::seed_from_u64(cfg.seed);
    for i in 0..cfg.n_videos {
        let seed: u64 = seeder.random();
        let v = two_topic_video(cfg, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7061_6972);
        let base = video_id(cfg.seed, i);
        let split = if i >= cfg.n_videos - n_test {
            "test"
        } else {
            "train"
        };
        for (k, suffix) in ["a", "b"].into_iter().enumerate() {
            let id = format!("{base}{suffix}");
            let frames_name = format!("{id}.frames.feat");
            let ff = FeatureFile::new(&id, FeatureKind::Frames, cfg.fps, v.frames.clone());
            write_feature_file(&ff, out_dir.join(&frames_name))?;
            let roles: Vec<FrameRole> = (0..cfg.n_frames)
                .map(|f| match (v.masks[k][f], v.masks[1 - k][f]) {
                    (1, _) => FrameRole::Key,
                    (_, 1) => FrameRole::Distractor,
                    _ => FrameRole::Background,
                })
                .collect();
            let gt = annotate(&mut rng, &id, &roles, &v.boundaries, cfg.annotators)?;
            let names = [
                format!("{id}.captions.feat"),
                format!("{id}.query.feat"),
                format!("{id}.gt.json"),
            ];
            let q = &v.queries[k];
            write_feature_file(
                &FeatureFile::new(&id, FeatureKind::Captions, cfg.fps, q.clone()),
                out_dir.join(&names[0]),
            )?;
            write_feature_file(
                &FeatureFile::new(&id, FeatureKind::Query, cfg.fps, q.clone()),
                out_dir.join(&names[1]),
            )?;
            gt.save(out_dir.join(&names[2]))?;
            manifest.entries.push(ManifestEntry {
                video_id: id,
                frames: frames_name.into(),
                captions: names[0].clone().into(),
                query: Some(names[1].clone().into()),
                ground_truth: Some(names[2].clone().into()),
                split: split.into(),
            });
        }
    }
    manifest.save(out_dir.join("manifest.json"))?;
    write_config(cfg, out_dir)?;
    Ok(manifest)
}

/// Shot length used by the generator, exposed for tests.
pub fn synthetic_shot_len(cfg: &SyntheticConfig) -> usize {
    uniform_shot_len(cfg.fps)
}
