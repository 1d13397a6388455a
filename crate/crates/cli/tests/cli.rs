use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use segtcn::raster::load_hmap;
use serde_json::Value;

fn segtcn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segtcn"))
        .args(args)
        .env("SEGTCN_THREADS", "1")
        .output()
        .expect("spawn segtcn")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn error_kind(out: &Output) -> String {
    let line = String::from_utf8_lossy(&out.stderr);
    let v: Value = serde_json::from_str(line.lines().last().unwrap()).unwrap();
    v["error"]["kind"].as_str().unwrap().to_string()
}

fn synth(dir: &Path) -> PathBuf {
    let out = segtcn(&[
        "synth",
        "--videos",
        "3",
        "--classes",
        "3",
        "--seed",
        "4",
        "--min-segment-frames",
        "8",
        "--max-segment-frames",
        "12",
        "--min-segments",
        "3",
        "--max-segments",
        "4",
        "--out",
        path(dir),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    PathBuf::from(v["manifest"].as_str().unwrap())
}

#[test]
fn usage_errors_exit_with_one() {
    let out = segtcn(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_kind(&out), "usage");

    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let skeleton = dir.path().join("skeletons/vid000.json");
    let out = segtcn(&[
        "perturb",
        "--input",
        path(&skeleton),
        "--output",
        "x.json",
        "--p",
        "1.5",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_kind(&out), "validation");

    let out = segtcn(&[
        "eval",
        "--checkpoint",
        path(&manifest),
        "--manifest",
        path(&manifest),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_kind(&out), "parse");
}

#[test]
fn rasterize_writes_replicated_clips() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let out = segtcn(&[
        "rasterize",
        "--manifest",
        path(&manifest),
        "--heatmap",
        "joint+limb",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let clip = load_hmap(dir.path().join("heatmaps/vid000.hmap")).unwrap();
    assert_eq!((clip.channels, clip.width, clip.height), (3, 56, 56));
    let peak = clip.frames.iter().flatten().fold(0.0f32, |a, &b| a.max(b));
    // renormalized before resizing, so interpolation may shave the peak
    assert!(peak > 0.5 && peak <= 1.0, "{peak}");

    let feats = dir.path().join("encoded");
    let out = segtcn(&[
        "encode",
        "--input",
        path(&dir.path().join("heatmaps")),
        "--out",
        path(&feats),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let track = segtcn::features::load_features(feats.join("vid000.feat")).unwrap();
    assert_eq!((track.dim(), track.len()), (64, clip.len()));

    let out = segtcn(&[
        "encode",
        "--input",
        path(&dir.path().join("heatmaps")),
        "--out",
        path(&feats),
        "--grid",
        "5",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_eval_report_round() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        r#"{"model": {"feature_width": 6, "prediction_layers": 3, "refinement_layers": 2}, "train": {"epochs": 2}}"#,
    )
    .unwrap();
    let run = dir.path().join("run");
    let out = segtcn(&[
        "train",
        "--manifest",
        path(&manifest),
        "--config",
        path(&config),
        "--out",
        path(&run),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in ["final.ckpt", "best.ckpt", "train_log.json", "config.json"] {
        assert!(run.join(f).exists(), "{f}");
    }

    let ckpt = run.join("final.ckpt");
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    let out = segtcn(&[
        "eval",
        "--checkpoint",
        path(&ckpt),
        "--manifest",
        path(&manifest),
        "--out",
        path(&a),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let svg = dir.path().join("svg");
    let out = segtcn(&[
        "eval",
        "--checkpoint",
        path(&ckpt),
        "--manifest",
        path(&manifest),
        "--drop-p",
        "1",
        "--out",
        path(&b),
        "--svg",
        path(&svg),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(std::fs::read_dir(&svg).unwrap().count() > 0);

    let report: Value = serde_json::from_str(&std::fs::read_to_string(&b).unwrap()).unwrap();
    assert_eq!(report["drop_p"], 1.0);
    let out = segtcn(&["report", "--compare", path(&a), path(&b)]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("f1@10"));

    // a checkpoint trained on other features is rejected as a runtime error
    let out = segtcn(&[
        "eval",
        "--checkpoint",
        path(&ckpt),
        "--manifest",
        path(&manifest),
        "--features",
        "file",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_kind(&out), "dimension");
}

#[test]
fn perturb_round_trips_skeleton_files() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let input = dir.path().join("skeletons/vid001.json");
    let output = dir.path().join("dropped.json");
    let out = segtcn(&[
        "perturb",
        "--input",
        path(&input),
        "--output",
        path(&output),
        "--p",
        "0",
    ]);
    assert!(out.status.success());
    let a = segtcn::pose::load_skeleton_sequence(&input).unwrap();
    let b = segtcn::pose::load_skeleton_sequence(&output).unwrap();
    assert_eq!(a, b);
}
