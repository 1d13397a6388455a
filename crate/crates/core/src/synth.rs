//! Synthetic "puppet" dataset: a 13-joint stick figure performing scripted
//! periodic motions, one motion per action class.
//!
//! Every class holds a characteristic posture and oscillates around it, so
//! single frames are already informative and longer windows disambiguate
//! further. Classes beyond the six scripted motions blend two of them.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{save_features, FeatureTrack};
use crate::pose::{
    write_label_track, write_skeleton_sequence, ClassMap, DatasetManifest, Joint, LabelTrack,
    LimbTopology, ManifestEntry, SkeletonSequence, Split, CLASS_MAP_FILE,
};
use crate::raster::{pooled_encoder, skeleton_heatmaps, HeatmapKind, RasterConfig};

pub const JOINTS: usize = 13;
pub const CANVAS: usize = 128;

/// Rest pose relative to the body centre, in pixels (y grows downwards).
const REST: [(f64, f64); JOINTS] = [
    (0.0, -45.0),
    (-12.0, -32.0),
    (12.0, -32.0),
    (-16.0, -14.0),
    (16.0, -14.0),
    (-18.0, 4.0),
    (18.0, 4.0),
    (-8.0, 5.0),
    (8.0, 5.0),
    (-9.0, 27.0),
    (9.0, 27.0),
    (-10.0, 50.0),
    (10.0, 50.0),
];

const SCRIPTED: [&str; 6] = [
    "arm-raise",
    "squat",
    "side-bend",
    "wave",
    "kick",
    "jumping-jack",
];

const HEAD: usize = 0;
const L_SHOULDER: usize = 1;
const R_SHOULDER: usize = 2;
const L_ELBOW: usize = 3;
const R_ELBOW: usize = 4;
const L_WRIST: usize = 5;
const R_WRIST: usize = 6;
const L_HIP: usize = 7;
const R_HIP: usize = 8;
const L_KNEE: usize = 9;
const R_KNEE: usize = 10;
const L_ANKLE: usize = 11;
const R_ANKLE: usize = 12;

pub fn class_name(class: usize) -> String {
    match SCRIPTED.get(class) {
        Some(name) => name.to_string(),
        None => format!("blend-{class}"),
    }
}

/// Frames per motion cycle.
pub fn motif_period(class: usize) -> usize {
    20 + 6 * (class % 4)
}

/// Joint displacement of a scripted motion at activation `s ∈ [0, 1]` and
/// cycle angle `phi`.
fn scripted(kind: usize, s: f64, phi: f64) -> [(f64, f64); JOINTS] {
    let mut d = [(0.0, 0.0); JOINTS];
    match kind {
        0 => {
            d[L_WRIST] = (-4.0 * s, -45.0 * s);
            d[R_WRIST] = (4.0 * s, -45.0 * s);
            d[L_ELBOW] = (-2.0 * s, -22.0 * s);
            d[R_ELBOW] = (2.0 * s, -22.0 * s);
            d[HEAD] = (0.0, -3.0 * s);
        }
        1 => {
            for j in [
                HEAD, L_SHOULDER, R_SHOULDER, L_ELBOW, R_ELBOW, L_WRIST, R_WRIST, L_HIP, R_HIP,
            ] {
                d[j] = (0.0, 20.0 * s);
            }
            d[L_WRIST].1 -= 12.0 * s;
            d[R_WRIST].1 -= 12.0 * s;
            d[L_KNEE] = (-9.0 * s, 8.0 * s);
            d[R_KNEE] = (9.0 * s, 8.0 * s);
        }
        2 => {
            d[HEAD] = (18.0 * s, 4.0 * s);
            d[L_SHOULDER] = (14.0 * s, 6.0 * s);
            d[R_SHOULDER] = (14.0 * s, -2.0 * s);
            d[L_ELBOW] = (12.0 * s, 4.0 * s);
            d[R_ELBOW] = (12.0 * s, -2.0 * s);
            d[L_WRIST] = (10.0 * s, 2.0 * s);
            d[R_WRIST] = (10.0 * s, -2.0 * s);
        }
        3 => {
            let wave = phi.sin();
            d[R_ELBOW] = (10.0, -18.0);
            d[R_WRIST] = (14.0 + 10.0 * wave, -40.0 - 4.0 * s);
            d[HEAD] = (-8.0, -2.0);
            d[R_SHOULDER] = (0.0, -6.0);
            d[L_WRIST] = (6.0, 0.0);
        }
        4 => {
            d[L_KNEE] = (-12.0 * s, -12.0 * s);
            d[L_ANKLE] = (-28.0 * s, -18.0 * s);
            d[L_WRIST] = (-8.0, -6.0);
            d[R_WRIST] = (8.0, -6.0);
            d[HEAD] = (4.0 * s, 0.0);
            d[L_SHOULDER] = (3.0 * s, 0.0);
            d[R_SHOULDER] = (3.0 * s, 0.0);
        }
        _ => {
            d[L_WRIST] = (-25.0 * s, -35.0 * s);
            d[R_WRIST] = (25.0 * s, -35.0 * s);
            d[L_ELBOW] = (-15.0 * s, -15.0 * s);
            d[R_ELBOW] = (15.0 * s, -15.0 * s);
            d[L_KNEE] = (-7.0 * s, 0.0);
            d[R_KNEE] = (7.0 * s, 0.0);
            d[L_ANKLE] = (-15.0 * s, 0.0);
            d[R_ANKLE] = (15.0 * s, 0.0);
            d[HEAD] = (0.0, -4.0 * s);
        }
    }
    d
}

/// Noise-free joint positions of `class` at `frame` frames into its cycle,
/// relative to the body centre.
pub fn motif_pose(class: usize, frame: f64) -> [(f64, f64); JOINTS] {
    let phi = TAU * frame / motif_period(class) as f64;
    // a held posture (0.4) plus an oscillation around it
    let s = 0.4 + 0.6 * (0.5 - 0.5 * phi.cos());
    let primary = scripted(class % SCRIPTED.len(), s, phi);
    let secondary = (class >= SCRIPTED.len()).then(|| {
        let other =
            (class % SCRIPTED.len() + 1 + (class / SCRIPTED.len() - 1) % (SCRIPTED.len() - 1))
                % SCRIPTED.len();
        scripted(other, s, phi)
    });
    let mut pose = REST;
    for j in 0..JOINTS {
        pose[j].0 += primary[j].0;
        pose[j].1 += primary[j].1;
        if let Some(sec) = secondary {
            pose[j].0 += 0.5 * sec[j].0;
            pose[j].1 += 0.5 * sec[j].1;
        }
    }
    pose
}

/// Largest per-joint RMS distance between the trajectories of two classes
/// over `frames` frames starting at phase zero.
pub fn motif_separation(a: usize, b: usize, frames: usize) -> f64 {
    (0..JOINTS)
        .map(|j| {
            let sq: f64 = (0..frames)
                .map(|t| {
                    let (pa, pb) = (motif_pose(a, t as f64)[j], motif_pose(b, t as f64)[j]);
                    (pa.0 - pb.0).powi(2) + (pa.1 - pb.1).powi(2)
                })
                .sum();
            (sq / frames as f64).sqrt()
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub videos: usize,
    pub classes: usize,
    /// Inclusive range of segment lengths in frames.
    pub segment_frames: (usize, usize),
    /// Inclusive range of segments per video.
    pub segments_per_video: (usize, usize),
    /// Standard deviation of coordinate noise in pixels.
    pub noise_px: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            videos: 5,
            classes: 4,
            segment_frames: (24, 48),
            segments_per_video: (8, 12),
            noise_px: 1.0,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Validation(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.videos == 0 {
            return Err(Error::Validation("need at least one video".into()));
        }
        let (lo, hi) = self.segment_frames;
        if lo == 0 || lo > hi {
            return Err(Error::Validation(format!(
                "bad segment length range {lo}..={hi}"
            )));
        }
        let (lo, hi) = self.segments_per_video;
        if lo == 0 || lo > hi {
            return Err(Error::Validation(format!(
                "bad segment count range {lo}..={hi}"
            )));
        }
        if self.noise_px.is_nan()
            || self.noise_px < 0.0
            || !(0.0..1.0).contains(&self.test_fraction)
        {
            return Err(Error::Validation(
                "noise must be >= 0 and test fraction in [0,1)".into(),
            ));
        }
        Ok(())
    }

    /// Number of videos assigned to the test split (the last ones).
    pub fn test_videos(&self) -> usize {
        let n = (self.videos as f64 * self.test_fraction).round() as usize;
        if self.videos >= 2 && self.test_fraction > 0.0 {
            n.clamp(1, self.videos - 1)
        } else {
            0
        }
    }
}

/// A generated video with exact framewise labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthVideo {
    pub id: String,
    pub skeleton: SkeletonSequence,
    pub labels: Vec<usize>,
}

fn video_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Generates video `index` of the dataset described by `cfg`. Each video
/// draws from its own random stream, so videos are independent of each other.
pub fn generate_video(cfg: &SynthConfig, index: usize) -> Result<SynthVideo> {
    cfg.validate()?;
    let mut rng = video_rng(cfg.seed, index);
    let noise = Normal::new(0.0, cfg.noise_px).map_err(|e| Error::Validation(e.to_string()))?;
    let centre = (
        CANVAS as f64 / 2.0 + rng.random_range(-8.0..8.0),
        CANVAS as f64 / 2.0 + rng.random_range(-4.0..4.0),
    );
    let segments = rng.random_range(cfg.segments_per_video.0..=cfg.segments_per_video.1);
    let mut frames = Vec::new();
    let mut labels = Vec::new();
    let mut prev: Option<usize> = None;
    for _ in 0..segments {
        // adjacent segments always change class so segment boundaries are real
        let class = loop {
            let c = rng.random_range(0..cfg.classes);
            if Some(c) != prev {
                break c;
            }
        };
        prev = Some(class);
        let len = rng.random_range(cfg.segment_frames.0..=cfg.segment_frames.1);
        let phase = rng.random_range(0.0..motif_period(class) as f64);
        for t in 0..len {
            let pose = motif_pose(class, phase + t as f64);
            let frame = pose
                .iter()
                .map(|&(dx, dy)| {
                    let x =
                        (centre.0 + dx + noise.sample(&mut rng)).clamp(0.0, (CANVAS - 1) as f64);
                    let y =
                        (centre.1 + dy + noise.sample(&mut rng)).clamp(0.0, (CANVAS - 1) as f64);
                    Joint::new(x, y, rng.random_range(0.9..=1.0))
                })
                .collect();
            frames.push(frame);
            labels.push(class);
        }
    }
    let skeleton = SkeletonSequence::new(frames, LimbTopology::body13(), CANVAS, CANVAS)?;
    Ok(SynthVideo {
        id: format!("vid{index:03}"),
        skeleton,
        labels,
    })
}

pub fn class_map(classes: usize) -> ClassMap {
    ClassMap::new((0..classes).map(class_name).collect()).expect("generated class names are unique")
}

/// Rasterization used for the simulated second modality: joint-only
/// heatmaps with a wider kernel at a coarser resolution.
pub fn aux_raster_config() -> RasterConfig {
    RasterConfig {
        sigma: 2.0,
        out_size: 32,
        ..RasterConfig::default()
    }
}

pub const AUX_GRID: usize = 4;
pub const AUX_KIND: HeatmapKind = HeatmapKind::Joint;

pub fn aux_features(seq: &SkeletonSequence) -> Result<FeatureTrack> {
    pooled_encoder(
        &skeleton_heatmaps(seq, AUX_KIND, &aux_raster_config())?,
        AUX_GRID,
    )
}

/// Writes the dataset under `out`: `skeletons/`, `labels/`, auxiliary
/// `features/`, `classes.tsv` and `manifest.json`. Returns the manifest path.
pub fn write_dataset(cfg: &SynthConfig, out: impl AsRef<Path>) -> Result<PathBuf> {
    cfg.validate()?;
    let out = out.as_ref();
    for sub in ["skeletons", "labels", "features"] {
        let dir = out.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let classes = class_map(cfg.classes);
    classes.write(out.join(CLASS_MAP_FILE))?;
    let first_test = cfg.videos - cfg.test_videos();
    let mut entries = Vec::with_capacity(cfg.videos);
    for index in 0..cfg.videos {
        let video = generate_video(cfg, index)?;
        let skeleton = PathBuf::from("skeletons").join(format!("{}.json", video.id));
        let labels = PathBuf::from("labels").join(format!("{}.txt", video.id));
        let features = PathBuf::from("features").join(format!("{}.feat", video.id));
        write_skeleton_sequence(out.join(&skeleton), &video.skeleton)?;
        let track = LabelTrack::new(video.labels, classes.names().to_vec())?;
        write_label_track(out.join(&labels), &track)?;
        save_features(out.join(&features), &aux_features(&video.skeleton)?)?;
        entries.push(ManifestEntry {
            id: video.id,
            skeleton,
            labels,
            features: Some(features),
            split: if index < first_test {
                Split::Train
            } else {
                Split::Test
            },
        });
    }
    let manifest = out.join("manifest.json");
    DatasetManifest::write(&manifest, &entries)?;
    Ok(manifest)
}

/// A short deterministic sequence cycling through the scripted motions,
/// handy for tests and examples.
pub fn demo_sequence(frames: usize) -> SkeletonSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let centre = CANVAS as f64 / 2.0;
    let frames = (0..frames)
        .map(|t| {
            let class = (t / 20) % SCRIPTED.len();
            motif_pose(class, t as f64)
                .iter()
                .map(|&(dx, dy)| {
                    Joint::new(
                        centre + dx + noise.sample(&mut rng),
                        centre + dy + noise.sample(&mut rng),
                        rng.random_range(0.9..=1.0),
                    )
                })
                .collect()
        })
        .collect();
    SkeletonSequence::new(frames, LimbTopology::body13(), CANVAS, CANVAS)
        .expect("demo sequence is valid")
}
