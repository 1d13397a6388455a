use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use segtcn::checkpoint::{Checkpoint, FeatureSource, TrainedModel};
use segtcn::evaluate::{compare_reports, evaluate, timeline_svg, EvalOptions, EvalReport};
use segtcn::features::save_features;
use segtcn::perturb::drop_limbs;
use segtcn::pose::{load_skeleton_sequence, write_skeleton_sequence, DatasetManifest, Split};
use segtcn::raster::{load_hmap, pooled_encoder, save_hmap, skeleton_heatmaps, HeatmapKind};
use segtcn::synth::{write_dataset, SynthConfig};
use segtcn::train::{
    load_samples, train_fused, train_single, with_threads, EpochLog, LoadOptions, RunConfig,
};
use segtcn::{Error, Result};

#[derive(Parser)]
#[command(
    name = "segtcn",
    version,
    about = "Skeleton-heatmap temporal action segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic puppet dataset.
    Synth(SynthArgs),
    /// Render skeleton sequences into cropped, resized heatmap clips (HMAP files).
    Rasterize(RasterizeArgs),
    /// Pool HMAP clips into feature files (FEAT files).
    Encode(EncodeArgs),
    /// Train a single-branch or fusion model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest split.
    Eval(EvalArgs),
    /// Randomly drop limbs from a skeleton file.
    Perturb(PerturbArgs),
    /// Print a report as a table, or compare two reports.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 5)]
    videos: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 24)]
    min_segment_frames: usize,
    #[arg(long, default_value_t = 48)]
    max_segment_frames: usize,
    #[arg(long, default_value_t = 8)]
    min_segments: usize,
    #[arg(long, default_value_t = 12)]
    max_segments: usize,
}

#[derive(Args)]
struct RasterizeArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Heatmap type: joint, limb or joint+limb (default from the config).
    #[arg(long)]
    heatmap: Option<HeatmapKind>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: `heatmaps/` next to the manifest).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EncodeArgs {
    /// An HMAP file or a directory of them.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    grid: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: `run/` next to the manifest).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    features: Option<FeatureSource>,
    /// Train the two-branch fusion model (auxiliary features from the manifest).
    #[arg(long)]
    fusion: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    #[arg(long, default_value_t = 0.0)]
    drop_p: f64,
    #[arg(long, default_value_t = 0)]
    drop_seed: u64,
    #[arg(long)]
    features: Option<FeatureSource>,
    /// Score ground truth against itself.
    #[arg(long)]
    oracle: bool,
    /// Write the JSON report here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write one SVG timeline per sequence into this directory.
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Args)]
struct PerturbArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    p: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReportArgs {
    /// Two reports to compare (b - a).
    #[arg(long, num_args = 2, value_names = ["A", "B"])]
    compare: Option<Vec<PathBuf>>,
    /// A report to print as a table.
    report: Option<PathBuf>,
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split '{s}' (expected train or test)")),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.render().to_string();
            let first = message
                .lines()
                .next()
                .unwrap_or_default()
                .trim_start_matches("error: ");
            eprintln!("{}", json!({"error": {"kind": "usage", "message": first}}));
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "{}",
                json!({"error": {"kind": e.kind(), "message": e.to_string()}})
            );
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Rasterize(a) => with_threads(0, || rasterize(a))?,
        Command::Encode(a) => encode(a),
        Command::Train(a) => with_threads(1, || train(a))?,
        Command::Eval(a) => with_threads(0, || eval(a))?,
        Command::Perturb(a) => perturb(a),
        Command::Report(a) => report(a),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn sibling(manifest: &Path, name: &str) -> PathBuf {
    manifest
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(name)
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        videos: a.videos,
        classes: a.classes,
        seed: a.seed,
        segment_frames: (a.min_segment_frames, a.max_segment_frames),
        segments_per_video: (a.min_segments, a.max_segments),
        ..SynthConfig::default()
    };
    let manifest = write_dataset(&cfg, &a.out)?;
    println!("{}", json!({"manifest": manifest}));
    Ok(())
}

fn rasterize(a: RasterizeArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(kind) = a.heatmap {
        cfg.heatmap = kind;
    }
    let manifest = DatasetManifest::load(&a.manifest)?;
    let out = a.out.unwrap_or_else(|| sibling(&a.manifest, "heatmaps"));
    create_dir(&out)?;
    let mut written = Vec::new();
    for e in &manifest.entries {
        let seq = load_skeleton_sequence(&e.skeleton)?;
        let clip = skeleton_heatmaps(&seq, cfg.heatmap, &cfg.raster)?;
        let path = out.join(format!("{}.hmap", e.id));
        save_hmap(&path, &clip)?;
        written.push(path);
    }
    println!("{}", json!({"heatmaps": written}));
    Ok(())
}

fn encode(a: EncodeArgs) -> Result<()> {
    let inputs: Vec<PathBuf> = if a.input.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(&a.input)
            .map_err(|e| Error::Io {
                path: a.input.clone(),
                source: e,
            })?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "hmap"))
            .collect();
        files.sort();
        files
    } else {
        vec![a.input.clone()]
    };
    if inputs.is_empty() {
        return Err(Error::Validation(format!(
            "no .hmap files in {}",
            a.input.display()
        )));
    }
    create_dir(&a.out)?;
    let mut written = Vec::new();
    for input in inputs {
        let clip = load_hmap(&input)?;
        let track = pooled_encoder(&clip, a.grid)?;
        let stem = input
            .file_stem()
            .unwrap_or_default()
            .to_string_lossy()
            .into_owned();
        let path = a.out.join(format!("{stem}.feat"));
        save_features(&path, &track)?;
        written.push(path);
    }
    println!("{}", json!({"features": written}));
    Ok(())
}

fn log_epoch(phase: &str, e: &EpochLog) {
    eprintln!(
        "{}",
        json!({"phase": phase, "epoch": e.epoch, "loss": e.loss})
    );
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(source) = a.features {
        cfg.features = source;
    }
    if a.fusion && cfg.features == FeatureSource::File {
        return Err(Error::Validation(
            "fusion training reads heatmap features from skeletons; use --features builtin".into(),
        ));
    }
    let manifest = DatasetManifest::load(&a.manifest)?;
    let classes = manifest.classes()?;
    let spec = cfg.feature_spec();
    let load = LoadOptions {
        want_aux: a.fusion,
        ..LoadOptions::default()
    };
    let samples = load_samples(&manifest, &classes, Split::Train, &spec, &load)?;
    let out = a.out.unwrap_or_else(|| sibling(&a.manifest, "run"));
    create_dir(&out)?;
    let ckpt = |model: TrainedModel| Checkpoint {
        model,
        features: spec,
        class_names: classes.names().to_vec(),
    };
    let mut log = Vec::new();
    let summary = if a.fusion {
        let result = train_fused(&samples, classes.len(), &cfg, &mut |phase, e| {
            let phase = serde_json::to_value(phase).expect("phase name");
            let phase = phase.as_str().unwrap_or_default().to_string();
            log_epoch(&phase, e);
            log.push(json!({"phase": phase, "epoch": e.epoch, "loss": e.loss}));
        })?;
        ckpt(TrainedModel::Single(result.heat.last)).save(out.join("heat.ckpt"))?;
        ckpt(TrainedModel::Single(result.aux.last)).save(out.join("aux.ckpt"))?;
        ckpt(TrainedModel::Fusion(result.fusion.last)).save(out.join("final.ckpt"))?;
        ckpt(TrainedModel::Fusion(result.fusion.best)).save(out.join("best.ckpt"))?;
        json!({"best_epoch": result.fusion.best_epoch})
    } else {
        let result = train_single(&samples, classes.len(), &cfg, &mut |e| {
            log_epoch("single", e);
            log.push(json!({"phase": "single", "epoch": e.epoch, "loss": e.loss}));
        })?;
        ckpt(TrainedModel::Single(result.last)).save(out.join("final.ckpt"))?;
        ckpt(TrainedModel::Single(result.best)).save(out.join("best.ckpt"))?;
        json!({"best_epoch": result.best_epoch})
    };
    let log_path = out.join("train_log.json");
    write_file(
        &log_path,
        serde_json::to_string_pretty(&log).expect("log serialization") + "\n",
    )?;
    write_file(
        &out.join("config.json"),
        serde_json::to_string_pretty(&cfg).expect("config serialization") + "\n",
    )?;
    println!(
        "{}",
        json!({
            "final": out.join("final.ckpt"),
            "best": out.join("best.ckpt"),
            "best_epoch": summary["best_epoch"],
            "log": log_path,
        })
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let opts = EvalOptions {
        drop_p: a.drop_p,
        drop_seed: a.drop_seed,
        oracle: a.oracle,
        features: a.features,
    };
    let (report, preds) = evaluate(&ckpt, &manifest, a.split, &opts)?;
    if let Some(dir) = &a.svg {
        create_dir(dir)?;
        let names = manifest.classes()?.names().to_vec();
        for p in &preds {
            write_file(&dir.join(format!("{}.svg", p.id)), timeline_svg(p, &names))?;
        }
    }
    match &a.out {
        Some(path) => {
            write_file(path, report.to_json())?;
            print!("{}", report.table());
        }
        None => print!("{}", report.to_json()),
    }
    Ok(())
}

fn perturb(a: PerturbArgs) -> Result<()> {
    let seq = load_skeleton_sequence(&a.input)?;
    let out = drop_limbs(&seq, a.p, a.seed)?;
    write_skeleton_sequence(&a.output, &out)
}

fn load_report(path: &Path) -> Result<EvalReport> {
    EvalReport::from_json(&read_file(path)?, &path.display().to_string())
}

fn report(a: ReportArgs) -> Result<()> {
    match (a.compare, a.report) {
        (Some(pair), None) => {
            let (x, y) = (load_report(&pair[0])?, load_report(&pair[1])?);
            print!("{}", compare_reports(&x, &y));
            Ok(())
        }
        (None, Some(path)) => {
            print!("{}", load_report(&path)?.table());
            Ok(())
        }
        _ => Err(Error::Validation(
            "report needs either --compare A B or a single report path".into(),
        )),
    }
}
