//! Deterministic training over a manifest, and checkpoint evaluation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{adam_config, Checkpoint};
use crate::config::{RunConfig, TrainMode};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_video, EvalOptions, MetricReport};
use crate::features::{DatasetManifest, FeatureKind, TextMode};
use crate::model::{keyframe_weight, window_video, Dropout, Model, PaddedWindow};
use crate::numerics::{adam_step, AdamState, Tape, Tensor};

/// Mean per-window losses over one epoch, measured before each update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub total: f64,
    pub classification: Option<f64>,
    pub diversity: f64,
    pub reconstruction: f64,
    pub windows: usize,
    pub steps: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// One video prepared for training. Unsupervised runs never load labels.
struct TrainVideo {
    video_id: String,
    windows: Vec<PaddedWindow>,
    text: Tensor,
    kind: FeatureKind,
    labels: Option<Vec<u8>>,
    key_weight: f32,
}

fn load_videos(manifest: &DatasetManifest, model: &Model) -> Result<Vec<TrainVideo>> {
    let cfg = &model.config;
    let mut out = Vec::with_capacity(manifest.len());
    for e in &manifest.entries {
        let b = manifest.load_bundle(e, cfg.text_mode)?;
        model.check_dim(&format!("{} frames", e.video_id), b.dim())?;
        model.check_dim(&format!("{} text", e.video_id), b.text.cols())?;
        let labels = match cfg.mode {
            TrainMode::Supervised => {
                let gt = manifest
                    .load_ground_truth(e, b.num_frames())?
                    .ok_or_else(|| {
                        Error::Config(format!(
                            "supervised training needs ground truth for {}",
                            e.video_id
                        ))
                    })?;
                Some(gt.keyframe_labels)
            }
            TrainMode::Unsupervised => None,
        };
        let key_weight = labels
            .as_deref()
            .map(|l| keyframe_weight(l, cfg.invert_class_weight))
            .unwrap_or(0.0);
        out.push(TrainVideo {
            video_id: e.video_id.clone(),
            windows: window_video(&b.frames, cfg.window_len)?,
            text: b.text,
            kind: b.text_kind,
            labels,
            key_weight,
        });
    }
    Ok(out)
}

/// Trains a fresh model (initialised from `config.seed`) on every entry of `manifest`.
pub fn train(manifest: &DatasetManifest, config: &RunConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if manifest.is_empty() {
        return Err(Error::Usage("training manifest has no entries".into()));
    }
    let model = Model::new(config)?;
    let videos = load_videos(manifest, &model)?;
    let adam = AdamState::new(&model.params, adam_config(config));
    train_from(
        Checkpoint {
            model,
            adam,
            epoch: 0,
        },
        &videos,
    )
}

fn train_from(mut ckpt: Checkpoint, videos: &[TrainVideo]) -> Result<TrainOutcome> {
    let cfg = ckpt.model.config.clone();
    let mut order: Vec<(usize, usize)> = videos
        .iter()
        .enumerate()
        .flat_map(|(v, tv)| (0..tv.windows.len()).map(move |w| (v, w)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5348_5546);
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        let mut steps = 0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<Vec<Tensor>> = None;
            for &(v, w) in batch {
                let tv = &videos[v];
                let win = &tv.windows[w];
                let labels = tv
                    .labels
                    .as_ref()
                    .map(|l| &l[win.start..win.start + win.valid_len]);
                let mut dropout =
                    (cfg.dropout > 0.0).then(|| Dropout::new(cfg.dropout, rng.random()));
                let model = &ckpt.model;
                let mut t = Tape::with_params(&model.params);
                let (loss, parts) = model.window_loss(
                    &mut t,
                    win,
                    &tv.text,
                    tv.kind,
                    labels,
                    tv.key_weight,
                    dropout.as_mut(),
                    None,
                )?;
                if !parts.total.is_finite() {
                    return Err(Error::Numeric {
                        stage: format!(
                            "loss at epoch {epoch}, video {}, frames {}..{}: {parts:?}",
                            tv.video_id,
                            win.start,
                            win.start + win.valid_len
                        ),
                        layer: 0,
                    });
                }
                sums[0] += parts.total as f64;
                sums[1] += parts.classification.unwrap_or(0.0) as f64;
                sums[2] += parts.diversity as f64;
                sums[3] += parts.reconstruction as f64;
                let g = t.backward(loss)?.param_grads(&model.params);
                match acc.as_mut() {
                    None => acc = Some(g),
                    Some(a) => {
                        for (x, y) in a.iter_mut().zip(&g) {
                            for (p, q) in x.data_mut().iter_mut().zip(y.data()) {
                                *p += q;
                            }
                        }
                    }
                }
            }
            let mut grads = acc.expect("batches are nonempty");
            let inv = 1.0 / batch.len() as f32;
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|x| *x *= inv);
            }
            adam_step(&mut ckpt.model.params, &grads, &mut ckpt.adam)?;
            if !ckpt.model.params.all_finite() {
                return Err(Error::Numeric {
                    stage: format!("optimizer update at epoch {epoch}"),
                    layer: 0,
                });
            }
            steps += 1;
        }
        let n = order.len() as f64;
        let entry = EpochLog {
            epoch,
            total: sums[0] / n,
            classification: (cfg.mode == TrainMode::Supervised).then(|| sums[1] / n),
            diversity: sums[2] / n,
            reconstruction: sums[3] / n,
            windows: order.len(),
            steps,
        };
        log::info!(
            "epoch {epoch}: total {:.6} cls {} div {:.6} rec {:.6}",
            entry.total,
            entry
                .classification
                .map_or("-".to_string(), |v| format!("{v:.6}")),
            entry.diversity,
            entry.reconstruction
        );
        log.push(entry);
        ckpt.epoch = epoch;
    }
    Ok(TrainOutcome {
        checkpoint: ckpt,
        log,
    })
}

impl EvalOptions {
    pub fn from_config(cfg: &RunConfig, manifest: &DatasetManifest) -> Self {
        EvalOptions {
            budget_fraction: cfg.budget_fraction,
            aggregation: manifest.f1_aggregation,
            tau_variant: cfg.tau_variant,
        }
    }
}

/// Scores every entry with `model`, builds budgeted summaries and compares
/// them with the ground truth.
pub fn evaluate_model(
    model: &Model,
    manifest: &DatasetManifest,
    text_mode: TextMode,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    if manifest.is_empty() {
        return Err(Error::Usage("evaluation manifest has no entries".into()));
    }
    let mut videos = Vec::with_capacity(manifest.len());
    for e in &manifest.entries {
        let b = manifest.load_bundle(e, text_mode)?;
        let gt = manifest
            .load_ground_truth(e, b.num_frames())?
            .ok_or_else(|| Error::Config(format!("{} has no ground truth", e.video_id)))?;
        let scores = model.score_bundle(&b)?;
        let boundaries = gt.boundaries_or_uniform(b.fps);
        videos.push(evaluate_video(&scores, &gt, &boundaries, opts)?);
    }
    MetricReport::from_videos(videos, opts)
}

/// [`evaluate_model`] with the checkpoint's text mode and budget settings.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, manifest: &DatasetManifest) -> Result<MetricReport> {
    let cfg = &ckpt.model.config;
    evaluate_model(
        &ckpt.model,
        manifest,
        cfg.text_mode,
        &EvalOptions::from_config(cfg, manifest),
    )
}
