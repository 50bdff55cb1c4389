use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sumkit::evaluation::{evaluate_video, EvalOptions, MetricReport};
use sumkit::features::DatasetManifest;
use sumkit::summary::RleMask;
use sumkit::RunConfig;

fn sumkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sumkit"))
        .args(args)
        .env_remove("SUMKIT_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn sumkit")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, extra: &[&str]) {
    let mut args = vec![
        "gen-synthetic",
        "--out",
        p(dir),
        "--seed",
        "7",
        "--videos",
        "4",
        "--frames",
        "120",
        "--dim",
        "16",
    ];
    args.extend_from_slice(extra);
    ok(&sumkit(&args));
}

/// Small, fast model settings written to a config file.
fn small_config(dir: &Path) -> PathBuf {
    let cfg = RunConfig {
        embed_dim: 16,
        lga_heads: 2,
        tf_heads: 4,
        tf_enc_layers: 1,
        tf_dec_layers: 1,
        window_len: 32,
        batch_size: 4,
        epochs: 2,
        lr: 1e-3,
        ..Default::default()
    };
    let path = dir.join("run.json");
    fs::write(&path, cfg.to_json_pretty()).unwrap();
    path
}

fn train_small(dir: &Path, extra: &[&str]) -> PathBuf {
    let cfg = small_config(dir);
    let ckpt = dir.join("model.ckpt");
    let manifest = dir.join("manifest.json");
    let mut args = vec![
        "train",
        "--manifest",
        p(&manifest),
        "--out",
        p(&ckpt),
        "--config",
        p(&cfg),
    ];
    args.extend_from_slice(extra);
    ok(&sumkit(&args));
    ckpt
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().into_string().unwrap(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn help_and_bad_flags() {
    assert_eq!(sumkit(&["--help"]).status.code(), Some(0));
    assert_eq!(sumkit(&["train", "--help"]).status.code(), Some(0));
    assert_eq!(sumkit(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(sumkit(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn gen_synthetic_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    gen(a.path(), &[]);
    gen(b.path(), &[]);
    let (ta, tb) = (read_tree(a.path()), read_tree(b.path()));
    assert!(ta.len() > 4);
    assert_eq!(ta, tb);
    let m = DatasetManifest::load(a.path().join("manifest.json")).unwrap();
    assert_eq!(m.len(), 4);
}

#[test]
fn gen_synthetic_missing_out_dir_is_a_config_error() {
    let d = tempfile::tempdir().unwrap();
    let missing = d.path().join("nope");
    let out = sumkit(&["gen-synthetic", "--out", p(&missing), "--seed", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!missing.exists());
}

#[test]
fn query_pairs_flag_writes_two_entries_per_video() {
    let d = tempfile::tempdir().unwrap();
    gen(d.path(), &["--query-pairs", "--topics", "2"]);
    let m = DatasetManifest::load(d.path().join("manifest.json")).unwrap();
    assert_eq!(m.len(), 8);
}

#[test]
fn show_config_precedence() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small_config(d.path());

    let defaults: Value = serde_json::from_str(&ok(&sumkit(&["train", "--show-config"]))).unwrap();
    assert_eq!(defaults["embed_dim"], 512);

    let file: Value = serde_json::from_str(&ok(&sumkit(&[
        "train",
        "--show-config",
        "--config",
        p(&cfg),
    ])))
    .unwrap();
    assert_eq!(file["embed_dim"], 16);
    assert_eq!(file["epochs"], 2);

    let flags: Value = serde_json::from_str(&ok(&sumkit(&[
        "train",
        "--show-config",
        "--config",
        p(&cfg),
        "--epochs",
        "9",
        "--mode",
        "unsupervised",
    ])))
    .unwrap();
    assert_eq!(flags["embed_dim"], 16);
    assert_eq!(flags["epochs"], 9);
    assert_eq!(flags["mode"], "unsupervised");

    let env = Command::new(env!("CARGO_BIN_EXE_sumkit"))
        .args(["train", "--show-config"])
        .env("SUMKIT_SEED", "1234")
        .output()
        .unwrap();
    let env: Value = serde_json::from_str(&ok(&env)).unwrap();
    assert_eq!(env["seed"], 1234);

    let both = Command::new(env!("CARGO_BIN_EXE_sumkit"))
        .args(["train", "--show-config", "--seed", "5"])
        .env("SUMKIT_SEED", "1234")
        .output()
        .unwrap();
    let both: Value = serde_json::from_str(&ok(&both)).unwrap();
    assert_eq!(both["seed"], 5);

    // a seed in the config file beats the environment
    let mut seeded: Value = serde_json::from_str(&fs::read_to_string(&cfg).unwrap()).unwrap();
    seeded["seed"] = 77.into();
    fs::write(&cfg, seeded.to_string()).unwrap();
    let file_seed = Command::new(env!("CARGO_BIN_EXE_sumkit"))
        .args(["train", "--show-config", "--config", p(&cfg)])
        .env("SUMKIT_SEED", "1234")
        .output()
        .unwrap();
    let file_seed: Value = serde_json::from_str(&ok(&file_seed)).unwrap();
    assert_eq!(file_seed["seed"], 77);

    let bad_env = Command::new(env!("CARGO_BIN_EXE_sumkit"))
        .args(["gen-synthetic", "--show-config"])
        .env("SUMKIT_SEED", "many")
        .output()
        .unwrap();
    assert_eq!(bad_env.status.code(), Some(2));
}

#[test]
fn invalid_config_values_exit_2() {
    let out = sumkit(&[
        "train",
        "--show-config",
        "--embed-dim",
        "30",
        "--lga-heads",
        "4",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let d = tempfile::tempdir().unwrap();
    let bad = d.path().join("bad.json");
    fs::write(&bad, r#"{"embed_dim": 16, "unknown_key": 1}"#).unwrap();
    let out = sumkit(&["train", "--show-config", "--config", p(&bad)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unsupervised_training_ignores_labels() {
    let d = tempfile::tempdir().unwrap();
    gen(d.path(), &[]);
    let log = d.path().join("log.json");
    let ckpt = train_small(d.path(), &["--mode", "unsupervised", "--log", p(&log)]);
    assert!(ckpt.exists());
    let log: Value = serde_json::from_str(&fs::read_to_string(log).unwrap()).unwrap();
    assert_eq!(log.as_array().unwrap().len(), 2);
}

#[test]
fn supervised_training_without_labels_exits_2() {
    let d = tempfile::tempdir().unwrap();
    gen(d.path(), &[]);
    let path = d.path().join("manifest.json");
    let mut m: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    for e in m["entries"].as_array_mut().unwrap() {
        e.as_object_mut().unwrap().remove("ground_truth");
    }
    fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
    let cfg = small_config(d.path());
    let ckpt = d.path().join("model.ckpt");
    let out = sumkit(&[
        "train",
        "--manifest",
        p(&path),
        "--out",
        p(&ckpt),
        "--config",
        p(&cfg),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!ckpt.exists());
}

fn decode_mask(report: &Value) -> Vec<u8> {
    let rle: RleMask = serde_json::from_value(report["frame_mask"].clone()).unwrap();
    rle.decode().unwrap()
}

#[test]
fn summarize_budgets_and_modes() {
    let d = tempfile::tempdir().unwrap();
    gen(d.path(), &[]);
    let ckpt = train_small(d.path(), &[]);
    let frames = d.path().join("syn7_000.frames.feat");
    let captions = d.path().join("syn7_000.captions.feat");
    let query = d.path().join("syn7_000.query.feat");

    let full: Value = serde_json::from_str(&ok(&sumkit(&[
        "summarize",
        "--checkpoint",
        p(&ckpt),
        "--frames",
        p(&frames),
        "--captions",
        p(&captions),
        "--budget",
        "1.0",
    ])))
    .unwrap();
    let mask = decode_mask(&full);
    assert_eq!(mask.len(), 120);
    assert!(mask.iter().all(|&v| v == 1));

    let q: Value = serde_json::from_str(&ok(&sumkit(&[
        "summarize",
        "--checkpoint",
        p(&ckpt),
        "--frames",
        p(&frames),
        "--query",
        p(&query),
    ])))
    .unwrap();
    let selected = decode_mask(&q).iter().filter(|&&v| v == 1).count();
    assert!(selected > 0 && selected <= 18, "selected {selected}");

    // a caption file passed as a query is rejected
    let out = sumkit(&[
        "summarize",
        "--checkpoint",
        p(&ckpt),
        "--frames",
        p(&frames),
        "--query",
        p(&captions),
    ]);
    assert_eq!(out.status.code(), Some(2));
    // captions and query together is a usage error
    let out = sumkit(&[
        "summarize",
        "--checkpoint",
        p(&ckpt),
        "--frames",
        p(&frames),
        "--captions",
        p(&captions),
        "--query",
        p(&query),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

/// Writes each video's first annotator as its score file.
fn annotator_scores(dir: &Path, scores: &Path) -> DatasetManifest {
    let m = DatasetManifest::load(dir.join("manifest.json")).unwrap();
    for e in &m.entries {
        let gt = m.load_ground_truth(e, 120).unwrap().unwrap();
        let file = serde_json::json!({
            "video_id": e.video_id,
            "fps": 30.0,
            "scores": gt.annotator_scores[0],
        });
        fs::write(
            scores.join(format!("{}.scores.json", e.video_id)),
            file.to_string(),
        )
        .unwrap();
    }
    m
}

#[test]
fn evaluate_scores_matches_library() {
    let d = tempfile::tempdir().unwrap();
    let data = d.path().join("data");
    let scores = d.path().join("scores");
    fs::create_dir_all(&data).unwrap();
    fs::create_dir_all(&scores).unwrap();
    gen(&data, &[]);
    let m = annotator_scores(&data, &scores);

    let report_path = d.path().join("report.json");
    let csv = d.path().join("report.csv");
    ok(&sumkit(&[
        "evaluate",
        "--manifest",
        p(&data.join("manifest.json")),
        "--scores",
        p(&scores),
        "--out",
        p(&report_path),
        "--csv",
        p(&csv),
    ]));
    let got: Value = serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();

    let opts = EvalOptions::from_config(&RunConfig::default(), &m);
    let videos = m
        .entries
        .iter()
        .map(|e| {
            let gt = m.load_ground_truth(e, 120).unwrap().unwrap();
            let b = gt.boundaries_or_uniform(30.0);
            evaluate_video(&gt.annotator_scores[0], &gt, &b, &opts).unwrap()
        })
        .collect();
    let want = MetricReport::from_videos(videos, &opts).unwrap();
    assert_eq!(got, serde_json::to_value(&want).unwrap());
    assert_eq!(fs::read_to_string(csv).unwrap(), want.to_csv());
}

#[test]
fn evaluate_single_annotator_scores_give_perfect_f1() {
    let d = tempfile::tempdir().unwrap();
    let data = d.path().join("data");
    let scores = d.path().join("scores");
    fs::create_dir_all(&data).unwrap();
    fs::create_dir_all(&scores).unwrap();
    let cfg = data.join("gen.json");
    let mut gen_cfg = sumkit::features::SyntheticConfig {
        seed: 7,
        n_videos: 3,
        n_frames: 120,
        dim: 16,
        ..Default::default()
    };
    gen_cfg.annotators = 1;
    fs::write(&cfg, serde_json::to_string(&gen_cfg).unwrap()).unwrap();
    ok(&sumkit(&[
        "gen-synthetic",
        "--out",
        p(&data),
        "--config",
        p(&cfg),
    ]));
    annotator_scores(&data, &scores);
    let report: Value = serde_json::from_str(&ok(&sumkit(&[
        "evaluate",
        "--manifest",
        p(&data.join("manifest.json")),
        "--scores",
        p(&scores),
    ])))
    .unwrap();
    assert!((report["mean_f1"].as_f64().unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn evaluate_rejects_malformed_score_files() {
    let d = tempfile::tempdir().unwrap();
    let data = d.path().join("data");
    let scores = d.path().join("scores");
    fs::create_dir_all(&data).unwrap();
    fs::create_dir_all(&scores).unwrap();
    gen(&data, &[]);
    annotator_scores(&data, &scores);
    fs::write(scores.join("syn7_001.scores.json"), "{\"video_id\": 3").unwrap();
    let out = sumkit(&[
        "evaluate",
        "--manifest",
        p(&data.join("manifest.json")),
        "--scores",
        p(&scores),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn score_then_evaluate_with_checkpoint() {
    let d = tempfile::tempdir().unwrap();
    gen(d.path(), &[]);
    let ckpt = train_small(d.path(), &[]);
    let s: Value = serde_json::from_str(&ok(&sumkit(&[
        "score",
        "--checkpoint",
        p(&ckpt),
        "--frames",
        p(&d.path().join("syn7_002.frames.feat")),
        "--text",
        p(&d.path().join("syn7_002.captions.feat")),
    ])))
    .unwrap();
    assert_eq!(s["video_id"], "syn7_002");
    let scores = s["scores"].as_array().unwrap();
    assert_eq!(scores.len(), 120);
    assert!(scores
        .iter()
        .all(|v| (0.0..=1.0).contains(&v.as_f64().unwrap())));

    let report: Value = serde_json::from_str(&ok(&sumkit(&[
        "evaluate",
        "--manifest",
        p(&d.path().join("manifest.json")),
        "--checkpoint",
        p(&ckpt),
    ])))
    .unwrap();
    assert_eq!(report["videos"].as_array().unwrap().len(), 4);
}

#[test]
fn inspect_features_validates() {
    let d = tempfile::tempdir().unwrap();
    gen(d.path(), &[]);
    let frames = d.path().join("syn7_000.frames.feat");
    let line = ok(&sumkit(&["inspect-features", "--json", p(&frames)]));
    let info: Value = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(info["rows"], 120);
    assert_eq!(info["dim"], 16);
    assert_eq!(info["kind"], "frames");

    let bytes = fs::read(&frames).unwrap();
    let truncated = d.path().join("cut.feat");
    fs::write(&truncated, &bytes[..bytes.len() - 5]).unwrap();
    let out = sumkit(&["inspect-features", p(&frames), p(&truncated)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stdout).contains("syn7_000"));
}
