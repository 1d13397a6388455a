//! Gaussian joint and limb heatmaps, and the crop / sum / resize / replicate
//! pipeline that turns a skeleton video into fixed-size image-like frames.
//!
//! Pixels are sampled at integer centers: `i` indexes columns (x) and `j`
//! rows (y). Rasters are stored channel-major, `data[(ch * h + j) * w + i]`.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureTrack;
use crate::pose::{Joint, LimbTopology, SkeletonSequence};

/// Gaussian values below this are not evaluated (treated as exact zero).
const TAIL_CUTOFF: f64 = 1e-12;
/// Floor on the per-video peak used for renormalization.
const PEAK_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMode {
    /// `exp(-d / 2σ²)`, the limb formula as commonly printed.
    #[default]
    Linear,
    /// `exp(-d² / 2σ²)`, consistent with the joint formula.
    Squared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum HeatmapKind {
    #[serde(rename = "joint")]
    Joint,
    #[serde(rename = "limb")]
    Limb,
    #[default]
    #[serde(rename = "joint+limb")]
    JointLimb,
}

impl std::str::FromStr for HeatmapKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(HeatmapKind::Joint),
            "limb" => Ok(HeatmapKind::Limb),
            "joint+limb" => Ok(HeatmapKind::JointLimb),
            other => Err(Error::Validation(format!(
                "unknown heatmap kind '{other}' (expected joint, limb or joint+limb)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RasterConfig {
    pub sigma: f64,
    pub out_size: usize,
    pub replicate_channels: usize,
    pub crop_padding: usize,
    pub distance_mode: DistanceMode,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            sigma: 0.6,
            out_size: 56,
            replicate_channels: 3,
            crop_padding: 2,
            distance_mode: DistanceMode::Linear,
        }
    }
}

impl RasterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Validation(format!(
                "sigma must be > 0, got {}",
                self.sigma
            )));
        }
        if self.out_size == 0 {
            return Err(Error::Validation("out_size must be >= 1".into()));
        }
        if self.replicate_channels == 0 {
            return Err(Error::Validation("replicate_channels must be >= 1".into()));
        }
        Ok(())
    }

    fn two_sigma_sq(&self) -> f64 {
        2.0 * self.sigma * self.sigma
    }
}

/// A sequence of equally shaped multi-channel rasters with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapClip {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub frames: Vec<Vec<f32>>,
}

impl HeatmapClip {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        frames: Vec<Vec<f32>>,
    ) -> Result<Self> {
        let n = width * height * channels;
        if let Some(m) = frames.iter().position(|f| f.len() != n) {
            return Err(Error::shape(
                "heatmap clip",
                format!("frame {m} has {} values, expected {n}", frames[m].len()),
            ));
        }
        Ok(Self {
            width,
            height,
            channels,
            frames,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    #[inline]
    pub fn index(&self, ch: usize, i: usize, j: usize) -> usize {
        (ch * self.height + j) * self.width + i
    }

    pub fn get(&self, frame: usize, ch: usize, i: usize, j: usize) -> f32 {
        self.frames[frame][self.index(ch, i, j)]
    }

    pub fn channel(&self, frame: usize, ch: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.frames[frame][ch * n..(ch + 1) * n]
    }
}

/// Inclusive pixel bounds `[x0, x1] × [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl CropBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }
}

/// Euclidean distance from `p` to the closed segment `a`-`b`.
pub fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len_sq = dx * dx + dy * dy;
    let t = if len_sq > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len_sq).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Integer pixel range `[lo, hi]` within `[0, n)` covering `[center - r, center + r]`.
fn pixel_span(lo: f64, hi: f64, n: usize) -> Option<(usize, usize)> {
    let lo = lo.floor().max(0.0);
    let hi = hi.ceil().min(n as f64 - 1.0);
    if hi < lo {
        return None;
    }
    Some((lo as usize, hi as usize))
}

fn draw_joint(out: &mut [f32], w: usize, h: usize, joint: &Joint, cfg: &RasterConfig) {
    if joint.c <= 0.0 {
        return;
    }
    let s2 = cfg.two_sigma_sq();
    let radius = (s2 * (1.0 / TAIL_CUTOFF).ln()).sqrt();
    let (Some((i0, i1)), Some((j0, j1))) = (
        pixel_span(joint.x - radius, joint.x + radius, w),
        pixel_span(joint.y - radius, joint.y + radius, h),
    ) else {
        return;
    };
    for j in j0..=j1 {
        let dy = j as f64 - joint.y;
        for i in i0..=i1 {
            let dx = i as f64 - joint.x;
            let v = (-(dx * dx + dy * dy) / s2).exp() * joint.c;
            out[j * w + i] = v as f32;
        }
    }
}

fn draw_limb(out: &mut [f32], w: usize, h: usize, a: &Joint, b: &Joint, cfg: &RasterConfig) {
    let c = a.c.min(b.c);
    if c <= 0.0 {
        return;
    }
    let s2 = cfg.two_sigma_sq();
    let reach = match cfg.distance_mode {
        DistanceMode::Linear => s2 * (1.0 / TAIL_CUTOFF).ln(),
        DistanceMode::Squared => (s2 * (1.0 / TAIL_CUTOFF).ln()).sqrt(),
    };
    let (Some((i0, i1)), Some((j0, j1))) = (
        pixel_span(a.x.min(b.x) - reach, a.x.max(b.x) + reach, w),
        pixel_span(a.y.min(b.y) - reach, a.y.max(b.y) + reach, h),
    ) else {
        return;
    };
    for j in j0..=j1 {
        for i in i0..=i1 {
            let d = point_segment_distance((i as f64, j as f64), (a.x, a.y), (b.x, b.y));
            let d = match cfg.distance_mode {
                DistanceMode::Linear => d,
                DistanceMode::Squared => d * d,
            };
            let v = (-d / s2).exp() * c;
            out[j * w + i] = v as f32;
        }
    }
}

/// Renders one skeleton frame into a full-size channel-major raster.
pub fn render_frame(
    frame: &[Joint],
    topology: &LimbTopology,
    kind: HeatmapKind,
    width: usize,
    height: usize,
    cfg: &RasterConfig,
) -> Vec<f32> {
    let plane = width * height;
    let joints = matches!(kind, HeatmapKind::Joint | HeatmapKind::JointLimb);
    let limbs = matches!(kind, HeatmapKind::Limb | HeatmapKind::JointLimb);
    let channels = channel_count(topology, kind);
    let mut out = vec![0.0f32; channels * plane];
    let mut ch = 0;
    if joints {
        for joint in frame {
            draw_joint(
                &mut out[ch * plane..(ch + 1) * plane],
                width,
                height,
                joint,
                cfg,
            );
            ch += 1;
        }
    }
    if limbs {
        for limb in topology.limbs() {
            let dst = &mut out[ch * plane..(ch + 1) * plane];
            draw_limb(dst, width, height, &frame[limb.a], &frame[limb.b], cfg);
            ch += 1;
        }
    }
    out
}

pub fn channel_count(topology: &LimbTopology, kind: HeatmapKind) -> usize {
    match kind {
        HeatmapKind::Joint => topology.joint_count(),
        HeatmapKind::Limb => topology.limb_count(),
        HeatmapKind::JointLimb => topology.joint_count() + topology.limb_count(),
    }
}

fn render_clip(seq: &SkeletonSequence, kind: HeatmapKind, cfg: &RasterConfig) -> HeatmapClip {
    let frames = seq
        .frames
        .par_iter()
        .map(|f| render_frame(f, &seq.topology, kind, seq.width, seq.height, cfg))
        .collect();
    HeatmapClip {
        width: seq.width,
        height: seq.height,
        channels: channel_count(&seq.topology, kind),
        frames,
    }
}

/// One Gaussian per joint, scaled by its confidence (`ch = K`).
pub fn joint_heatmap(seq: &SkeletonSequence, cfg: &RasterConfig) -> HeatmapClip {
    render_clip(seq, HeatmapKind::Joint, cfg)
}

/// One distance-to-bone falloff per limb, scaled by the weaker endpoint (`ch = L`).
pub fn limb_heatmap(seq: &SkeletonSequence, cfg: &RasterConfig) -> Result<HeatmapClip> {
    if seq.topology.limb_count() == 0 {
        return Err(Error::Validation(
            "limb heatmap needs at least one limb".into(),
        ));
    }
    Ok(render_clip(seq, HeatmapKind::Limb, cfg))
}

/// Joint channels followed by limb channels (`ch = K + L`).
pub fn combined_heatmap(seq: &SkeletonSequence, cfg: &RasterConfig) -> HeatmapClip {
    render_clip(seq, HeatmapKind::JointLimb, cfg)
}

pub fn heatmap(
    seq: &SkeletonSequence,
    kind: HeatmapKind,
    cfg: &RasterConfig,
) -> Result<HeatmapClip> {
    match kind {
        HeatmapKind::Limb => limb_heatmap(seq, cfg),
        _ => Ok(render_clip(seq, kind, cfg)),
    }
}

/// Smallest box holding every confident joint of the whole video, padded and
/// clamped to the frame.
pub fn video_crop_box(seq: &SkeletonSequence, cfg: &RasterConfig) -> Result<CropBox> {
    let mut bounds: Option<(f64, f64, f64, f64)> = None;
    for joint in seq.frames.iter().flatten().filter(|j| j.c > 0.0) {
        let b = bounds.get_or_insert((joint.x, joint.y, joint.x, joint.y));
        b.0 = b.0.min(joint.x);
        b.1 = b.1.min(joint.y);
        b.2 = b.2.max(joint.x);
        b.3 = b.3.max(joint.y);
    }
    let (min_x, min_y, max_x, max_y) = bounds.ok_or(Error::EmptySkeletonVideo)?;
    let pad = cfg.crop_padding as f64;
    let clamp = |v: f64, n: usize| v.clamp(0.0, (n - 1) as f64) as usize;
    let (x0, x1) = widen(
        clamp((min_x - pad).floor(), seq.width),
        clamp((max_x + pad).ceil(), seq.width),
        seq.width,
    );
    let (y0, y1) = widen(
        clamp((min_y - pad).floor(), seq.height),
        clamp((max_y + pad).ceil(), seq.height),
        seq.height,
    );
    Ok(CropBox { x0, y0, x1, y1 })
}

// Keeps lo < hi whenever the extent allows it.
fn widen(lo: usize, hi: usize, n: usize) -> (usize, usize) {
    if lo < hi {
        (lo, hi)
    } else if hi + 1 < n {
        (lo, hi + 1)
    } else if lo > 0 {
        (lo - 1, hi)
    } else {
        (lo, hi)
    }
}

fn crop_and_sum(frame: &[f32], w: usize, h: usize, channels: usize, b: &CropBox) -> Vec<f64> {
    let (cw, chh) = (b.width(), b.height());
    let mut out = vec![0.0f64; cw * chh];
    for ch in 0..channels {
        let base = ch * w * h;
        for (r, j) in (b.y0..=b.y1).enumerate() {
            let row = &frame[base + j * w + b.x0..base + j * w + b.x1 + 1];
            for (dst, &v) in out[r * cw..(r + 1) * cw].iter_mut().zip(row) {
                *dst += v as f64;
            }
        }
    }
    out
}

/// Bilinear resampling with half-pixel center alignment.
pub fn resize_bilinear(src: &[f64], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<f64> {
    let taps = |d: usize, sn: usize, dn: usize| -> (usize, usize, f64) {
        let s = ((d as f64 + 0.5) * sn as f64 / dn as f64 - 0.5).clamp(0.0, (sn - 1) as f64);
        let s0 = s.floor() as usize;
        let s1 = (s0 + 1).min(sn - 1);
        (s0, s1, s - s0 as f64)
    };
    let cols: Vec<_> = (0..dw).map(|x| taps(x, sw, dw)).collect();
    let mut out = Vec::with_capacity(dw * dh);
    for y in 0..dh {
        let (y0, y1, fy) = taps(y, sh, dh);
        for &(x0, x1, fx) in &cols {
            let top = src[y0 * sw + x0] * (1.0 - fx) + src[y0 * sw + x1] * fx;
            let bottom = src[y1 * sw + x0] * (1.0 - fx) + src[y1 * sw + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

fn finish_frames(summed: Vec<Vec<f64>>, b: &CropBox, cfg: &RasterConfig) -> HeatmapClip {
    let peak = summed
        .iter()
        .flatten()
        .fold(0.0f64, |m, &v| m.max(v))
        .max(PEAK_EPS);
    let n = cfg.out_size;
    let frames = summed
        .into_par_iter()
        .map(|mut map| {
            map.iter_mut().for_each(|v| *v /= peak);
            let resized = resize_bilinear(&map, b.width(), b.height(), n, n);
            let mut out = Vec::with_capacity(n * n * cfg.replicate_channels);
            for _ in 0..cfg.replicate_channels {
                out.extend(resized.iter().map(|&v| v as f32));
            }
            out
        })
        .collect();
    HeatmapClip {
        width: n,
        height: n,
        channels: cfg.replicate_channels,
        frames,
    }
}

/// Crops every frame to `crop`, sums the channels, renormalizes by the
/// per-video peak, resizes to `out_size²` and replicates the result.
pub fn collapse_and_resize(
    clip: &HeatmapClip,
    crop: &CropBox,
    cfg: &RasterConfig,
) -> Result<HeatmapClip> {
    cfg.validate()?;
    if crop.x1 >= clip.width || crop.y1 >= clip.height || crop.x0 > crop.x1 || crop.y0 > crop.y1 {
        return Err(Error::Validation(format!(
            "crop box {crop:?} outside {}x{} raster",
            clip.width, clip.height
        )));
    }
    let summed = clip
        .frames
        .par_iter()
        .map(|f| crop_and_sum(f, clip.width, clip.height, clip.channels, crop))
        .collect();
    Ok(finish_frames(summed, crop, cfg))
}

/// Full skeleton-to-image pipeline, rendering one frame at a time so memory
/// stays proportional to the output rather than to `K + L` full rasters.
/// Produces exactly `collapse_and_resize(heatmap(seq), video_crop_box(seq))`.
pub fn skeleton_heatmaps(
    seq: &SkeletonSequence,
    kind: HeatmapKind,
    cfg: &RasterConfig,
) -> Result<HeatmapClip> {
    cfg.validate()?;
    if kind == HeatmapKind::Limb && seq.topology.limb_count() == 0 {
        return Err(Error::Validation(
            "limb heatmap needs at least one limb".into(),
        ));
    }
    let crop = video_crop_box(seq, cfg)?;
    let channels = channel_count(&seq.topology, kind);
    let summed = seq
        .frames
        .par_iter()
        .map(|f| {
            let full = render_frame(f, &seq.topology, kind, seq.width, seq.height, cfg);
            crop_and_sum(&full, seq.width, seq.height, channels, &crop)
        })
        .collect();
    Ok(finish_frames(summed, &crop, cfg))
}

/// Average-pools channel 0 of each square frame into a `grid × grid` cell
/// layout, flattened row-major.
pub fn pooled_encoder(clip: &HeatmapClip, grid: usize) -> Result<FeatureTrack> {
    if clip.width != clip.height {
        return Err(Error::Validation(format!(
            "pooled encoder needs square frames, got {}x{}",
            clip.width, clip.height
        )));
    }
    let side = clip.width;
    if grid == 0 || !side.is_multiple_of(grid) {
        return Err(Error::Validation(format!(
            "grid {grid} does not divide frame side {side}"
        )));
    }
    let cell = side / grid;
    let norm = 1.0 / (cell * cell) as f64;
    let mut data = Vec::with_capacity(clip.len() * grid * grid);
    for m in 0..clip.len() {
        let plane = clip.channel(m, 0);
        for gy in 0..grid {
            for gx in 0..grid {
                let mut acc = 0.0f64;
                for j in gy * cell..(gy + 1) * cell {
                    for i in gx * cell..(gx + 1) * cell {
                        acc += plane[j * side + i] as f64;
                    }
                }
                data.push((acc * norm) as f32);
            }
        }
    }
    FeatureTrack::new(grid * grid, data)
}

const HMAP_MAGIC: &str = "HMAP v1";

/// Writes the clip as `HMAP v1 <M> <h> <w> <ch> f32le` followed by values in
/// `[frame][row][col][channel]` order.
pub fn write_hmap(mut out: impl Write, clip: &HeatmapClip) -> std::io::Result<()> {
    writeln!(
        out,
        "{HMAP_MAGIC} {} {} {} {} f32le",
        clip.len(),
        clip.height,
        clip.width,
        clip.channels
    )?;
    let mut buf = Vec::with_capacity(clip.width * clip.height * clip.channels * 4);
    for frame in &clip.frames {
        buf.clear();
        for j in 0..clip.height {
            for i in 0..clip.width {
                for ch in 0..clip.channels {
                    buf.extend_from_slice(&frame[clip.index(ch, i, j)].to_le_bytes());
                }
            }
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_hmap(input: impl Read, context: &str) -> Result<HeatmapClip> {
    let mut reader = BufReader::new(input);
    let mut header = String::new();
    reader
        .read_line(&mut header)
        .map_err(|e| Error::parse(context, e))?;
    let fields: Vec<&str> = header.trim_end_matches('\n').split(' ').collect();
    if fields.len() != 7
        || format!("{} {}", fields[0], fields[1]) != HMAP_MAGIC
        || fields[6] != "f32le"
    {
        return Err(Error::parse(
            context,
            format!("bad HMAP header '{}'", header.trim_end()),
        ));
    }
    let dims: Vec<usize> = fields[2..6]
        .iter()
        .map(|s| s.parse().map_err(|e| Error::parse(context, e)))
        .collect::<Result<_>>()?;
    let (m, h, w, ch) = (dims[0], dims[1], dims[2], dims[3]);
    let mut bytes = Vec::new();
    reader
        .read_to_end(&mut bytes)
        .map_err(|e| Error::parse(context, e))?;
    let per_frame = h * w * ch;
    if bytes.len() != m * per_frame * 4 {
        return Err(Error::parse(
            context,
            format!(
                "expected {} payload bytes, found {}",
                m * per_frame * 4,
                bytes.len()
            ),
        ));
    }
    let mut frames = Vec::with_capacity(m);
    for chunk in bytes.chunks_exact(per_frame * 4) {
        let mut frame = vec![0.0f32; per_frame];
        for (n, v) in chunk.chunks_exact(4).enumerate() {
            let c = n % ch;
            let i = (n / ch) % w;
            let j = n / (ch * w);
            frame[(c * h + j) * w + i] = f32::from_le_bytes(v.try_into().unwrap());
        }
        frames.push(frame);
    }
    HeatmapClip::new(w, h, ch, frames)
}

pub fn save_hmap(path: impl AsRef<Path>, clip: &HeatmapClip) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_hmap(&mut w, clip)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_hmap(path: impl AsRef<Path>) -> Result<HeatmapClip> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_hmap(file, &path.display().to_string())
}
