use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use sumkit::evaluation::{evaluate_video, EvalOptions, MetricReport};
use sumkit::features::{
    generate_query_pair_dataset, generate_synthetic_dataset, read_feature_file,
    uniform_shot_boundaries, validate_boundaries, DatasetManifest, F1Aggregation, FeatureBundle,
    FeatureKind, SyntheticConfig, TextMode,
};
use sumkit::summary::{budget_frames, frame_to_shot_scores, knapsack_select, SummaryReport};
use sumkit::trainer::evaluate_model;
use sumkit::{Checkpoint, RunConfig, TrainMode};

use crate::{
    AggregationArg, EvaluateArgs, GenSyntheticArgs, InspectArgs, ModeArg, RunFlags, ScoreArgs,
    SummarizeArgs, TextModeArg, TrainArgs,
};

/// Bad invocation detected by the front end itself.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Per-frame scores as written by `score` and read by `evaluate --scores`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreFile {
    pub video_id: String,
    pub fps: f64,
    pub scores: Vec<f32>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| usage(format!("malformed {what} {}: {e}", path.display())))
}

/// Pretty JSON to `out`, or to stdout.
fn emit_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => {
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "{text}")?;
        }
    }
    Ok(())
}

/// `SUMKIT_SEED`, if set.
fn env_seed() -> Result<Option<u64>> {
    match std::env::var("SUMKIT_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| usage(format!("SUMKIT_SEED={v:?} is not an unsigned integer"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(usage(format!("SUMKIT_SEED: {e}"))),
    }
}

/// The seed to apply over a config that may have come from `file`: the flag,
/// else the file's own seed, else `SUMKIT_SEED`.
fn seed_override(flag: Option<u64>, file: Option<&Path>) -> Result<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    if let Some(p) = file {
        let v: serde_json::Value = read_json(p, "config")?;
        if v.get("seed").is_some() {
            return Ok(None);
        }
    }
    env_seed()
}

pub fn gen_synthetic(a: GenSyntheticArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => read_json::<SyntheticConfig>(p, "generator config")?,
        None => SyntheticConfig::default(),
    };
    if let Some(v) = seed_override(a.seed, a.config.as_deref())? {
        cfg.seed = v;
    }
    if let Some(v) = a.videos {
        cfg.n_videos = v;
    }
    if let Some(v) = a.frames {
        cfg.n_frames = v;
    }
    if let Some(v) = a.dim {
        cfg.dim = v;
    }
    if let Some(v) = a.topics {
        cfg.n_topics = v;
    }
    if let Some(v) = a.distractor_fraction {
        cfg.distractor_fraction = v;
    }
    cfg.validate()?;
    if a.show_config {
        return emit_json(&cfg, None);
    }
    let out = a.out.expect("required by clap");
    let manifest = if a.query_pairs {
        generate_query_pair_dataset(&cfg, &out)?
    } else {
        generate_synthetic_dataset(&cfg, &out)?
    };
    log::info!(
        "wrote {} entries to {}",
        manifest.len(),
        out.join("manifest.json").display()
    );
    Ok(())
}

/// Defaults, then `SUMKIT_SEED`, then the config file, then flags.
pub fn resolve_run_config(f: &RunFlags) -> Result<RunConfig> {
    let mut c = match &f.config {
        Some(p) => RunConfig::from_json_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(m) = f.mode {
        c.mode = match m {
            ModeArg::Supervised => TrainMode::Supervised,
            ModeArg::Unsupervised => TrainMode::Unsupervised,
        };
    }
    if let Some(m) = f.text_mode {
        c.text_mode = match m {
            TextModeArg::Generic => TextMode::Generic,
            TextModeArg::Query => TextMode::Query,
        };
    }
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = f.$flag { c.$field = v; })*
        };
    }
    if let Some(v) = seed_override(f.seed, f.config.as_deref())? {
        c.seed = v;
    }
    set!(
        epochs => epochs, batch_size => batch_size, lr => lr,
        embed_dim => embed_dim, window_len => window_len, enc_layers => tf_enc_layers,
        dec_layers => tf_dec_layers, heads => tf_heads, lga_heads => lga_heads,
        alpha => alpha, beta => beta, lambda => lambda
    );
    c.validate()?;
    Ok(c)
}

fn load_manifest(path: &Path, split: Option<&str>) -> Result<DatasetManifest> {
    let m = DatasetManifest::load(path)?;
    Ok(match split {
        Some(s) => m.split(s),
        None => m,
    })
}

pub fn train(a: TrainArgs) -> Result<()> {
    let cfg = resolve_run_config(&a.run)?;
    if a.show_config {
        println!("{}", cfg.to_json_pretty());
        return Ok(());
    }
    let manifest_path = a.manifest.expect("required by clap");
    let out = a.out.expect("required by clap");
    let manifest = load_manifest(&manifest_path, a.split.as_deref())?;
    let outcome = sumkit::trainer::train(&manifest, &cfg)?;
    outcome.checkpoint.save(&out)?;
    if let Some(p) = &a.log {
        emit_json(&outcome.log, Some(p))?;
    }
    if let Some(last) = outcome.log.last() {
        log::info!(
            "saved {} after {} epochs, final loss {:.5}",
            out.display(),
            last.epoch,
            last.total
        );
    }
    Ok(())
}

pub fn score(a: ScoreArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let bundle = FeatureBundle::load(&a.frames, &a.text)?;
    let scores = ckpt.model.score_bundle(&bundle)?;
    emit_json(
        &ScoreFile {
            video_id: bundle.video_id,
            fps: bundle.fps,
            scores,
        },
        a.out.as_deref(),
    )
}

fn read_shots(path: &Path, n_frames: usize) -> Result<Vec<usize>> {
    let b: Vec<usize> = read_json(path, "shot boundaries")?;
    validate_boundaries(&b, n_frames)?;
    Ok(b)
}

pub fn summarize(a: SummarizeArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let (text, want) = match (&a.captions, &a.query) {
        (Some(c), None) => (c, FeatureKind::Captions),
        (None, Some(q)) => (q, FeatureKind::Query),
        _ => unreachable!("enforced by clap"),
    };
    let bundle = FeatureBundle::load(&a.frames, text)?;
    if bundle.text_kind != want {
        return Err(usage(format!(
            "{} holds {:?} features, expected {want:?}",
            text.display(),
            bundle.text_kind
        )));
    }
    let budget = a.budget.unwrap_or(ckpt.model.config.budget_fraction);
    if !(budget > 0.0 && budget <= 1.0) {
        return Err(usage(format!("--budget {budget} outside (0, 1]")));
    }
    let n = bundle.num_frames();
    let boundaries = match &a.shots {
        Some(p) => read_shots(p, n)?,
        None => uniform_shot_boundaries(n, bundle.fps),
    };
    let scores = ckpt.model.score_bundle(&bundle)?;
    let shots = frame_to_shot_scores(&scores, &boundaries)?;
    let summary = knapsack_select(&shots, budget_frames(n, budget));
    emit_json(
        &SummaryReport::new(&bundle.video_id, budget, &shots, &summary),
        a.out.as_deref(),
    )
}

fn scores_path(dir: &Path, video_id: &str) -> PathBuf {
    dir.join(format!("{video_id}.scores.json"))
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let manifest = load_manifest(&a.manifest, a.split.as_deref())?;
    if manifest.is_empty() {
        return Err(usage("no manifest entries to evaluate"));
    }
    let ckpt = a.checkpoint.as_ref().map(Checkpoint::load).transpose()?;
    let defaults = RunConfig::default();
    let cfg = ckpt.as_ref().map_or(&defaults, |c| &c.model.config);
    let mut opts = EvalOptions::from_config(cfg, &manifest);
    if let Some(b) = a.budget {
        opts.budget_fraction = b;
    }
    if let Some(agg) = a.aggregation {
        opts.aggregation = match agg {
            AggregationArg::Avg => F1Aggregation::Avg,
            AggregationArg::Max => F1Aggregation::Max,
        };
    }
    let report = match (&ckpt, &a.scores) {
        (Some(c), _) => evaluate_model(&c.model, &manifest, cfg.text_mode, &opts)?,
        (None, Some(dir)) => evaluate_score_files(&manifest, dir, &opts)?,
        (None, None) => unreachable!("enforced by clap"),
    };
    if let Some(p) = &a.csv {
        fs::write(p, report.to_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    log::info!(
        "{} videos: F1 {:.4}, tau {}, rho {}",
        report.videos.len(),
        report.mean_f1,
        report.mean_tau.map_or("n/a".into(), |v| format!("{v:.4}")),
        report.mean_rho.map_or("n/a".into(), |v| format!("{v:.4}")),
    );
    emit_json(&report, a.out.as_deref())
}

fn evaluate_score_files(
    manifest: &DatasetManifest,
    dir: &Path,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    let mut videos = Vec::with_capacity(manifest.len());
    for e in &manifest.entries {
        let path = scores_path(dir, &e.video_id);
        let s: ScoreFile = read_json(&path, "score file")?;
        if s.video_id != e.video_id {
            return Err(usage(format!(
                "{} is for video {}, expected {}",
                path.display(),
                s.video_id,
                e.video_id
            )));
        }
        let gt = manifest
            .load_ground_truth(e, s.scores.len())?
            .ok_or_else(|| usage(format!("{} has no ground truth", e.video_id)))?;
        let boundaries = gt.boundaries_or_uniform(s.fps);
        videos.push(evaluate_video(&s.scores, &gt, &boundaries, opts)?);
    }
    Ok(MetricReport::from_videos(videos, opts)?)
}

#[derive(Debug, Serialize)]
struct Inspection {
    path: PathBuf,
    video_id: String,
    kind: FeatureKind,
    rows: usize,
    dim: usize,
    fps: f64,
    min_row_norm: f64,
    max_row_norm: f64,
}

pub fn inspect_features(a: InspectArgs) -> Result<()> {
    let mut failures = 0;
    for path in &a.files {
        let f = match read_feature_file(path) {
            Ok(f) => f,
            Err(e) => {
                eprintln!("{}: invalid: {e}", path.display());
                failures += 1;
                continue;
            }
        };
        let (rows, dim) = f.matrix.dims2();
        let norms: Vec<f64> = (0..rows)
            .map(|i| {
                f.matrix
                    .row(i)
                    .iter()
                    .map(|&v| (v as f64).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let info = Inspection {
            path: path.clone(),
            video_id: f.video_id,
            kind: f.kind,
            rows,
            dim,
            fps: f.fps,
            min_row_norm: norms.iter().copied().fold(f64::INFINITY, f64::min),
            max_row_norm: norms.iter().copied().fold(0.0, f64::max),
        };
        if a.json {
            println!("{}", serde_json::to_string(&info)?);
        } else {
            println!(
                "{}: {} {:?} {}x{} @ {} fps, row norms [{:.4}, {:.4}]",
                info.path.display(),
                info.video_id,
                info.kind,
                info.rows,
                info.dim,
                info.fps,
                info.min_row_norm,
                info.max_row_norm
            );
        }
    }
    if failures > 0 {
        return Err(usage(format!(
            "{failures} of {} files invalid",
            a.files.len()
        )));
    }
    Ok(())
}
