//! Skeleton sequences, framewise labels, class maps and dataset manifests.
//!
//! A missing joint is always encoded in-band as a joint with zero confidence;
//! frames never have absent entries.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Joint {
    pub x: f64,
    pub y: f64,
    /// Detection confidence in `[0, 1]`.
    pub c: f64,
}

impl Joint {
    pub fn new(x: f64, y: f64, c: f64) -> Self {
        Self { x, y, c }
    }
}

impl From<[f64; 3]> for Joint {
    fn from([x, y, c]: [f64; 3]) -> Self {
        Self { x, y, c }
    }
}

impl From<Joint> for [f64; 3] {
    fn from(j: Joint) -> Self {
        [j.x, j.y, j.c]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LimbGroup {
    LeftArm,
    RightArm,
    LeftLeg,
    RightLeg,
    TorsoHead,
}

impl LimbGroup {
    /// The four groups eligible for limb dropout.
    pub const EXTREMITIES: [LimbGroup; 4] = [
        LimbGroup::LeftArm,
        LimbGroup::RightArm,
        LimbGroup::LeftLeg,
        LimbGroup::RightLeg,
    ];
}

impl fmt::Display for LimbGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LimbGroup::LeftArm => "left-arm",
            LimbGroup::RightArm => "right-arm",
            LimbGroup::LeftLeg => "left-leg",
            LimbGroup::RightLeg => "right-leg",
            LimbGroup::TorsoHead => "torso-head",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "(usize, usize, LimbGroup)", into = "(usize, usize, LimbGroup)")]
pub struct Limb {
    pub a: usize,
    pub b: usize,
    pub group: LimbGroup,
}

impl From<(usize, usize, LimbGroup)> for Limb {
    fn from((a, b, group): (usize, usize, LimbGroup)) -> Self {
        Self { a, b, group }
    }
}

impl From<Limb> for (usize, usize, LimbGroup) {
    fn from(l: Limb) -> Self {
        (l.a, l.b, l.group)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LimbTopology {
    joint_names: Vec<String>,
    limbs: Vec<Limb>,
}

impl LimbTopology {
    pub fn new(joint_names: Vec<String>, limbs: Vec<Limb>) -> Result<Self> {
        let k = joint_names.len();
        if k == 0 {
            return Err(Error::Validation("topology has no joints".into()));
        }
        let mut seen = HashSet::new();
        for (l, limb) in limbs.iter().enumerate() {
            if limb.a >= k || limb.b >= k {
                return Err(Error::Validation(format!(
                    "limb {l} ({}, {}) references a joint outside [0, {k})",
                    limb.a, limb.b
                )));
            }
            if limb.a == limb.b {
                return Err(Error::Validation(format!("limb {l} is a self-loop")));
            }
            let key = (limb.a.min(limb.b), limb.a.max(limb.b));
            if !seen.insert(key) {
                return Err(Error::Validation(format!(
                    "limb {l} duplicates pair ({}, {})",
                    limb.a, limb.b
                )));
            }
        }
        Ok(Self { joint_names, limbs })
    }

    /// The 13-joint body layout used by the synthetic generator.
    pub fn body13() -> Self {
        use LimbGroup::*;
        let names = [
            "head",
            "left_shoulder",
            "right_shoulder",
            "left_elbow",
            "right_elbow",
            "left_wrist",
            "right_wrist",
            "left_hip",
            "right_hip",
            "left_knee",
            "right_knee",
            "left_ankle",
            "right_ankle",
        ];
        let limbs = [
            (0, 1, TorsoHead),
            (0, 2, TorsoHead),
            (1, 3, LeftArm),
            (3, 5, LeftArm),
            (2, 4, RightArm),
            (4, 6, RightArm),
            (1, 7, TorsoHead),
            (2, 8, TorsoHead),
            (7, 9, LeftLeg),
            (9, 11, LeftLeg),
            (8, 10, RightLeg),
            (10, 12, RightLeg),
        ];
        Self::new(
            names.iter().map(|s| s.to_string()).collect(),
            limbs.into_iter().map(Limb::from).collect(),
        )
        .expect("built-in topology is valid")
    }

    pub fn joint_count(&self) -> usize {
        self.joint_names.len()
    }

    pub fn limb_count(&self) -> usize {
        self.limbs.len()
    }

    pub fn limbs(&self) -> &[Limb] {
        &self.limbs
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    /// Joints touched only by limbs of `group`. Joints shared with any other
    /// group (e.g. a shoulder that also anchors a torso limb) are excluded.
    pub fn exclusive_joints(&self, group: LimbGroup) -> Vec<usize> {
        let mut owners: Vec<HashSet<LimbGroup>> = vec![HashSet::new(); self.joint_count()];
        for limb in &self.limbs {
            owners[limb.a].insert(limb.group);
            owners[limb.b].insert(limb.group);
        }
        owners
            .iter()
            .enumerate()
            .filter(|(_, g)| g.len() == 1 && g.contains(&group))
            .map(|(k, _)| k)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSequence {
    pub frames: Vec<Vec<Joint>>,
    pub topology: LimbTopology,
    pub width: usize,
    pub height: usize,
}

impl SkeletonSequence {
    pub fn new(
        frames: Vec<Vec<Joint>>,
        topology: LimbTopology,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let seq = Self {
            frames,
            topology,
            width,
            height,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::Validation("skeleton sequence has no frames".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Validation(format!(
                "frame size {}x{} must be at least 1x1",
                self.width, self.height
            )));
        }
        let k = self.topology.joint_count();
        for (m, frame) in self.frames.iter().enumerate() {
            if frame.len() != k {
                return Err(Error::Validation(format!(
                    "frame {m} has {} joints, expected {k}",
                    frame.len()
                )));
            }
            for (j, joint) in frame.iter().enumerate() {
                if !(joint.x.is_finite() && joint.y.is_finite()) {
                    return Err(Error::Validation(format!(
                        "joint ({m},{j}) has non-finite coordinates"
                    )));
                }
                if !(0.0..=1.0).contains(&joint.c) {
                    return Err(Error::Validation(format!(
                        "joint ({m},{j}) confidence {} outside [0,1]",
                        joint.c
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
struct SkeletonFile {
    width: usize,
    height: usize,
    joint_names: Vec<String>,
    limbs: Vec<Limb>,
    frames: Vec<Vec<Joint>>,
}

pub fn parse_skeleton_sequence(text: &str, context: &str) -> Result<SkeletonSequence> {
    let file: SkeletonFile = serde_json::from_str(text).map_err(|e| Error::parse(context, e))?;
    let topology = LimbTopology::new(file.joint_names, file.limbs)?;
    SkeletonSequence::new(file.frames, topology, file.width, file.height)
}

pub fn load_skeleton_sequence(path: impl AsRef<Path>) -> Result<SkeletonSequence> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_skeleton_sequence(&text, &path.display().to_string())
}

pub fn skeleton_to_json(seq: &SkeletonSequence) -> String {
    let file = SkeletonFile {
        width: seq.width,
        height: seq.height,
        joint_names: seq.topology.joint_names.clone(),
        limbs: seq.topology.limbs.clone(),
        frames: seq.frames.clone(),
    };
    serde_json::to_string(&file).expect("skeleton serialization cannot fail")
}

pub fn write_skeleton_sequence(path: impl AsRef<Path>, seq: &SkeletonSequence) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, skeleton_to_json(seq)).map_err(|e| Error::io(path, e))
}

/// Bidirectional mapping between action names and dense class ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    names: Vec<String>,
    ids: HashMap<String, usize>,
}

impl ClassMap {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Validation("class map is empty".into()));
        }
        let mut ids = HashMap::new();
        for (i, n) in names.iter().enumerate() {
            if ids.insert(n.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate class name '{n}'")));
            }
        }
        Ok(Self { names, ids })
    }

    pub fn parse(text: &str, context: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let (name, id) = line.split_once('\t').ok_or_else(|| {
                Error::parse(context, format!("line {}: expected name<TAB>id", n + 1))
            })?;
            let id: usize = id
                .trim()
                .parse()
                .map_err(|e| Error::parse(context, format!("line {}: {e}", n + 1)))?;
            pairs.push((id, name.to_string()));
        }
        pairs.sort();
        for (expected, (id, _)) in pairs.iter().enumerate() {
            if *id != expected {
                return Err(Error::Validation(format!(
                    "{context}: class ids must be exactly 0..{}, found {id}",
                    pairs.len()
                )));
            }
        }
        Self::new(pairs.into_iter().map(|(_, n)| n).collect())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        self.names
            .iter()
            .enumerate()
            .map(|(i, n)| format!("{n}\t{i}\n"))
            .collect()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.ids.get(name).copied()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelTrack {
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl LabelTrack {
    pub fn new(labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if let Some((i, &c)) = labels
            .iter()
            .enumerate()
            .find(|(_, &c)| c >= class_names.len())
        {
            return Err(Error::Validation(format!(
                "label {c} at frame {i} outside [0, {})",
                class_names.len()
            )));
        }
        Ok(Self {
            labels,
            class_names,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for &l in &self.labels {
            out.push_str(&self.class_names[l]);
            out.push('\n');
        }
        out
    }
}

pub fn parse_label_track(text: &str, classes: &ClassMap, context: &str) -> Result<LabelTrack> {
    let mut labels = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let name = line.trim_end_matches('\r');
        let id = classes.id(name).ok_or_else(|| {
            Error::Validation(format!(
                "{context}: line {}: unknown action '{name}'",
                n + 1
            ))
        })?;
        labels.push(id);
    }
    if labels.is_empty() {
        return Err(Error::Validation(format!("{context}: empty label track")));
    }
    LabelTrack::new(labels, classes.names().to_vec())
}

pub fn load_label_track(path: impl AsRef<Path>, class_map: impl AsRef<Path>) -> Result<LabelTrack> {
    let classes = ClassMap::load(class_map)?;
    load_label_track_with(path, &classes)
}

pub fn load_label_track_with(path: impl AsRef<Path>, classes: &ClassMap) -> Result<LabelTrack> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_label_track(&text, classes, &path.display().to_string())
}

pub fn write_label_track(path: impl AsRef<Path>, track: &LabelTrack) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, track.to_text()).map_err(|e| Error::io(path, e))
}

/// A maximal run of one class, frames `start..=end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub class: usize,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Run-length decomposition of a framewise label sequence.
pub fn segments_of(labels: &[usize]) -> Vec<Segment> {
    let mut out: Vec<Segment> = Vec::new();
    for (t, &c) in labels.iter().enumerate() {
        match out.last_mut() {
            Some(seg) if seg.class == c => seg.end = t,
            _ => out.push(Segment {
                class: c,
                start: t,
                end: t,
            }),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub skeleton: PathBuf,
    pub labels: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<PathBuf>,
    pub split: Split,
}

/// Dataset listing. Relative paths are resolved against the manifest's
/// directory; the class map lives next to the manifest as `classes.tsv`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub class_map: PathBuf,
}

pub const CLASS_MAP_FILE: &str = "classes.tsv";

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries: Vec<ManifestEntry> =
            serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
        let root = path.parent().unwrap_or_else(|| Path::new("."));
        let resolve = |p: &Path| {
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                root.join(p)
            }
        };
        let mut ids = HashSet::new();
        for e in &mut entries {
            if !ids.insert(e.id.clone()) {
                return Err(Error::Validation(format!(
                    "duplicate sequence id '{}'",
                    e.id
                )));
            }
            e.skeleton = resolve(&e.skeleton);
            e.labels = resolve(&e.labels);
            e.features = e.features.as_deref().map(resolve);
            let files = [Some(&e.skeleton), Some(&e.labels), e.features.as_ref()];
            for f in files.into_iter().flatten() {
                if !f.exists() {
                    return Err(Error::Validation(format!(
                        "sequence '{}' references missing file {}",
                        e.id,
                        f.display()
                    )));
                }
            }
        }
        let class_map = root.join(CLASS_MAP_FILE);
        if !class_map.exists() {
            return Err(Error::Validation(format!(
                "class map {} not found",
                class_map.display()
            )));
        }
        Ok(Self { entries, class_map })
    }

    /// Writes `entries` verbatim (paths as given, normally relative).
    pub fn write(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(entries).expect("manifest serialization");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn classes(&self) -> Result<ClassMap> {
        ClassMap::load(&self.class_map)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(k: usize, c: f64) -> Vec<Joint> {
        (0..k)
            .map(|i| Joint::new(i as f64 * 1.5, 2.0 + i as f64, c))
            .collect()
    }

    #[test]
    fn skeleton_round_trip() {
        let seq = SkeletonSequence::new(
            vec![frame(13, 0.9), frame(13, 1.0 / 3.0)],
            LimbTopology::body13(),
            100,
            80,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.json");
        write_skeleton_sequence(&p, &seq).unwrap();
        let back = load_skeleton_sequence(&p).unwrap();
        assert_eq!(back, seq);
        assert_eq!(back.len(), 2);
        assert_eq!(back.topology.joint_count(), 13);
    }

    #[test]
    fn inconsistent_joint_count_names_frame() {
        let mut seq = SkeletonSequence {
            frames: vec![frame(13, 1.0), frame(13, 1.0)],
            topology: LimbTopology::body13(),
            width: 10,
            height: 10,
        };
        seq.frames[1].pop();
        let text = skeleton_to_json(&seq);
        let err = parse_skeleton_sequence(&text, "x").unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("frame 1"), "{err}");
    }

    #[test]
    fn confidence_out_of_range_names_joint() {
        let mut seq = SkeletonSequence {
            frames: vec![frame(13, 1.0)],
            topology: LimbTopology::body13(),
            width: 10,
            height: 10,
        };
        seq.frames[0][4].c = 1.2;
        let err = parse_skeleton_sequence(&skeleton_to_json(&seq), "x").unwrap_err();
        assert!(err.to_string().contains("(0,4)"), "{err}");
    }

    #[test]
    fn malformed_json_is_parse_error() {
        let err = parse_skeleton_sequence("{\"width\": 3", "bad").unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }

    #[test]
    fn topology_rejects_bad_limbs() {
        let names: Vec<String> = (0..3).map(|i| i.to_string()).collect();
        let g = LimbGroup::TorsoHead;
        assert!(LimbTopology::new(names.clone(), vec![(0, 3, g).into()]).is_err());
        assert!(LimbTopology::new(names.clone(), vec![(1, 1, g).into()]).is_err());
        assert!(LimbTopology::new(names, vec![(0, 1, g).into(), (1, 0, g).into()]).is_err());
    }

    #[test]
    fn exclusive_joints_skip_shared_shoulders() {
        let t = LimbTopology::body13();
        assert_eq!(t.exclusive_joints(LimbGroup::LeftArm), vec![3, 5]);
        assert_eq!(t.exclusive_joints(LimbGroup::RightLeg), vec![10, 12]);
    }

    #[test]
    fn label_track_parsing() {
        let map = ClassMap::parse("walk\t0\nreach\t1\n", "map").unwrap();
        let t = parse_label_track("walk\nwalk\nreach\n", &map, "l").unwrap();
        assert_eq!(t.labels, vec![0, 0, 1]);

        let err = parse_label_track("walk\nreach\nfly\n", &map, "l").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");

        let err = parse_label_track("", &map, "l").unwrap_err();
        assert!(err.to_string().contains("empty label track"));
    }

    #[test]
    fn class_map_requires_dense_ids() {
        assert!(ClassMap::parse("a\t0\nb\t2\n", "m").is_err());
        let m = ClassMap::parse("b\t1\na\t0\n", "m").unwrap();
        assert_eq!(m.names(), &["a".to_string(), "b".to_string()]);
        assert_eq!(ClassMap::parse(&m.to_text(), "m").unwrap(), m);
    }

    #[test]
    fn segments_examples() {
        let seg = |class, start, end| Segment { class, start, end };
        assert_eq!(
            segments_of(&[0, 0, 1, 1, 1, 0]),
            vec![seg(0, 0, 1), seg(1, 2, 4), seg(0, 5, 5)]
        );
        assert_eq!(segments_of(&[2]), vec![seg(2, 0, 0)]);
        assert_eq!(segments_of(&[3; 100]), vec![seg(3, 0, 99)]);
    }

    #[test]
    fn manifest_resolves_and_checks_files() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.json"), "{}").unwrap();
        fs::write(dir.path().join("a.txt"), "x\n").unwrap();
        fs::write(dir.path().join(CLASS_MAP_FILE), "x\t0\n").unwrap();
        let entry = ManifestEntry {
            id: "a".into(),
            skeleton: "a.json".into(),
            labels: "a.txt".into(),
            features: None,
            split: Split::Train,
        };
        let mpath = dir.path().join("manifest.json");
        DatasetManifest::write(&mpath, std::slice::from_ref(&entry)).unwrap();
        let m = DatasetManifest::load(&mpath).unwrap();
        assert_eq!(m.entries[0].skeleton, dir.path().join("a.json"));

        DatasetManifest::write(&mpath, &[entry.clone(), entry.clone()]).unwrap();
        assert!(DatasetManifest::load(&mpath).is_err());

        let missing = ManifestEntry {
            features: Some("nope.feat".into()),
            ..entry
        };
        DatasetManifest::write(&mpath, &[missing]).unwrap();
        assert!(DatasetManifest::load(&mpath).is_err());
    }
}
