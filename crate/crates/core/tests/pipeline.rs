use std::path::{Path, PathBuf};

use segtcn::checkpoint::{Checkpoint, TrainedModel};
use segtcn::evaluate::{evaluate, EvalOptions, EvalReport, REPORT_SCHEMA};
use segtcn::pose::{DatasetManifest, Split};
use segtcn::synth::{write_dataset, SynthConfig};
use segtcn::train::{load_samples, train_fused, train_single, LoadOptions, RunConfig};

fn small_run() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.feature_width = 8;
    cfg.model.prediction_layers = 4;
    cfg.model.refinement_layers = 3;
    cfg.train.epochs = 3;
    cfg.train.epochs_stage2 = 2;
    cfg
}

fn dataset(dir: &Path) -> PathBuf {
    let cfg = SynthConfig {
        videos: 3,
        classes: 3,
        segment_frames: (10, 16),
        segments_per_video: (3, 4),
        seed: 11,
        ..SynthConfig::default()
    };
    write_dataset(&cfg, dir).unwrap()
}

fn trained(manifest: &DatasetManifest, cfg: &RunConfig) -> Checkpoint {
    let classes = manifest.classes().unwrap();
    let samples = load_samples(
        manifest,
        &classes,
        Split::Train,
        &cfg.feature_spec(),
        &LoadOptions::default(),
    )
    .unwrap();
    let out = train_single(&samples, classes.len(), cfg, &mut |_| {}).unwrap();
    Checkpoint {
        model: TrainedModel::Single(out.last),
        features: cfg.feature_spec(),
        class_names: classes.names().to_vec(),
    }
}

#[test]
fn report_validates_against_schema() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = DatasetManifest::load(dataset(dir.path())).unwrap();
    let ckpt = trained(&manifest, &small_run());
    let (report, preds) = evaluate(&ckpt, &manifest, Split::Test, &EvalOptions::default()).unwrap();
    assert_eq!(preds.len(), report.num_sequences);

    let schema: serde_json::Value = serde_json::from_str(REPORT_SCHEMA).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let instance: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
    assert!(validator.is_valid(&instance), "{}", report.to_json());

    let mut broken = instance.clone();
    broken["metrics"]["f1_10"]["mean"] = serde_json::json!(140.0);
    assert!(!validator.is_valid(&broken));
    assert_eq!(
        EvalReport::from_json(&report.to_json(), "mem").unwrap(),
        report
    );
}

#[test]
fn oracle_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = DatasetManifest::load(dataset(dir.path())).unwrap();
    let ckpt = trained(&manifest, &small_run());
    let opts = EvalOptions {
        oracle: true,
        ..EvalOptions::default()
    };
    for split in [Split::Train, Split::Test] {
        let (report, _) = evaluate(&ckpt, &manifest, split, &opts).unwrap();
        let m = report.metrics;
        for s in [m.f1_10, m.edit, m.map, m.acc] {
            assert_eq!(s.mean, 100.0);
            assert_eq!(s.std, 0.0);
        }
    }
}

#[test]
fn zero_drop_matches_no_drop_and_reload_matches() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = DatasetManifest::load(dataset(dir.path())).unwrap();
    let ckpt = trained(&manifest, &small_run());
    let plain = evaluate(&ckpt, &manifest, Split::Test, &EvalOptions::default()).unwrap();
    let zero = EvalOptions {
        drop_p: 0.0,
        drop_seed: 99,
        ..EvalOptions::default()
    };
    let dropped = evaluate(&ckpt, &manifest, Split::Test, &zero).unwrap();
    assert_eq!(plain.1, dropped.1);
    assert_eq!(plain.0.sequences, dropped.0.sequences);

    let path = dir.path().join("model.ckpt");
    ckpt.save(&path).unwrap();
    let reloaded = Checkpoint::load(&path).unwrap();
    let again = evaluate(&reloaded, &manifest, Split::Test, &EvalOptions::default()).unwrap();
    assert_eq!(plain.0.to_json(), again.0.to_json());
}

#[test]
fn fused_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = DatasetManifest::load(dataset(dir.path())).unwrap();
    let cfg = small_run();
    let classes = manifest.classes().unwrap();
    let opts = LoadOptions {
        want_aux: true,
        ..LoadOptions::default()
    };
    let samples = load_samples(
        &manifest,
        &classes,
        Split::Train,
        &cfg.feature_spec(),
        &opts,
    )
    .unwrap();
    let out = train_fused(&samples, classes.len(), &cfg, &mut |_, _| {}).unwrap();
    assert_eq!(out.fusion.log.len(), 2);
    let ckpt = Checkpoint {
        model: TrainedModel::Fusion(out.fusion.last),
        features: cfg.feature_spec(),
        class_names: classes.names().to_vec(),
    };
    let (report, _) = evaluate(&ckpt, &manifest, Split::Test, &EvalOptions::default()).unwrap();
    assert!(report.metrics.acc.mean.is_finite());
}

#[test]
fn mismatched_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = DatasetManifest::load(dataset(dir.path())).unwrap();
    let mut cfg = small_run();
    let ckpt = trained(&manifest, &cfg);
    cfg.grid = 4;
    let mut other = ckpt.clone();
    other.features = cfg.feature_spec();
    let err = evaluate(&other, &manifest, Split::Test, &EvalOptions::default()).unwrap_err();
    assert_eq!(err.kind(), "dimension");
}
