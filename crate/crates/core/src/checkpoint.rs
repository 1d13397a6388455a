//! Checkpoint files: a `SEGTCN-CKPT v1` line, a one-line JSON manifest that
//! fully describes the network and its feature pipeline, then every
//! parameter as little-endian `f32` in manifest order.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::engine::ParamSet;
use crate::error::{Error, Result};
use crate::model::{FusionMode, FusionModel, SegModel, SegNet};
use crate::raster::{HeatmapKind, RasterConfig};

const MAGIC: &str = "SEGTCN-CKPT v1";

/// Where the primary (heatmap-branch) features come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    /// Rasterize the skeleton and pool the heatmaps.
    #[default]
    Builtin,
    /// Read the manifest's feature file.
    File,
}

impl std::str::FromStr for FeatureSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "builtin" => Ok(Self::Builtin),
            "file" => Ok(Self::File),
            _ => Err(Error::Validation(format!(
                "unknown feature source '{s}' (expected builtin or file)"
            ))),
        }
    }
}

/// How a sequence becomes network input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub source: FeatureSource,
    pub heatmap: HeatmapKind,
    pub raster: RasterConfig,
    pub grid: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Topology {
    Single {
        net: SegNet,
    },
    Fusion {
        heat: SegNet,
        aux: SegNet,
        mode: FusionMode,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainedModel {
    Single(SegModel<f32>),
    Fusion(FusionModel<f32>),
}

impl TrainedModel {
    pub fn params(&self) -> &ParamSet<f32> {
        match self {
            Self::Single(m) => &m.params,
            Self::Fusion(m) => &m.params,
        }
    }

    pub fn topology(&self) -> Topology {
        match self {
            Self::Single(m) => Topology::Single { net: m.net.clone() },
            Self::Fusion(m) => Topology::Fusion {
                heat: m.heat.clone(),
                aux: m.aux.clone(),
                mode: m.mode,
            },
        }
    }

    /// Input dimension of the heatmap branch.
    pub fn input_dim(&self) -> usize {
        match self {
            Self::Single(m) => m.net.input_dim,
            Self::Fusion(m) => m.heat.input_dim,
        }
    }

    pub fn aux_dim(&self) -> Option<usize> {
        match self {
            Self::Single(_) => None,
            Self::Fusion(m) => Some(m.aux.input_dim),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Self::Single(m) => m.net.num_classes,
            Self::Fusion(m) => m.heat.num_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: TrainedModel,
    pub features: FeatureSpec,
    pub class_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    topology: Topology,
    features: FeatureSpec,
    class_names: Vec<String>,
    params: Vec<ParamEntry>,
}

impl Checkpoint {
    pub fn write(&self, mut out: impl Write) -> std::io::Result<()> {
        let params = self.model.params();
        let manifest = Manifest {
            topology: self.model.topology(),
            features: self.features,
            class_names: self.class_names.clone(),
            params: params
                .iter()
                .map(|(name, a)| ParamEntry {
                    name: name.clone(),
                    shape: [a.nrows(), a.ncols()],
                })
                .collect(),
        };
        writeln!(out, "{MAGIC}")?;
        writeln!(
            out,
            "{}",
            serde_json::to_string(&manifest).expect("manifest serialization")
        )?;
        let mut bytes = Vec::with_capacity(params.numel() * 4);
        for (_, a) in params.iter() {
            for v in a.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.write_all(&bytes)
    }

    pub fn read(input: impl Read, context: &str) -> Result<Self> {
        let mut input = BufReader::new(input);
        let mut line = String::new();
        input
            .read_line(&mut line)
            .map_err(|e| Error::parse(context, e))?;
        if line.trim_end() != MAGIC {
            return Err(Error::parse(
                context,
                format!("not a checkpoint (expected '{MAGIC}')"),
            ));
        }
        line.clear();
        input
            .read_line(&mut line)
            .map_err(|e| Error::parse(context, e))?;
        let manifest: Manifest =
            serde_json::from_str(&line).map_err(|e| Error::parse(context, e))?;
        let mut params = ParamSet::new();
        let mut buf = Vec::new();
        for entry in &manifest.params {
            let [r, c] = entry.shape;
            buf.resize(r * c * 4, 0);
            input.read_exact(&mut buf).map_err(|_| {
                Error::parse(
                    context,
                    format!("truncated payload in parameter '{}'", entry.name),
                )
            })?;
            let values: Vec<f32> = buf
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4-byte chunk")))
                .collect();
            params.insert(
                entry.name.clone(),
                Array2::from_shape_vec((r, c), values).expect("shape matches length"),
            );
        }
        let mut rest = Vec::new();
        input
            .read_to_end(&mut rest)
            .map_err(|e| Error::parse(context, e))?;
        if !rest.is_empty() {
            return Err(Error::parse(
                context,
                format!("{} trailing bytes", rest.len()),
            ));
        }
        let model = match manifest.topology {
            Topology::Single { net } => TrainedModel::Single(SegModel { net, params }),
            Topology::Fusion { heat, aux, mode } => TrainedModel::Fusion(FusionModel {
                heat,
                aux,
                mode,
                params,
            }),
        };
        Ok(Self {
            model,
            features: manifest.features,
            class_names: manifest.class_names,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        self.write(&mut bytes).map_err(|e| Error::io(path, e))?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(file, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec() -> FeatureSpec {
        FeatureSpec {
            source: FeatureSource::Builtin,
            heatmap: HeatmapKind::JointLimb,
            raster: RasterConfig::default(),
            grid: 8,
        }
    }

    fn small() -> SegModel<f32> {
        let cfg = ModelConfig {
            feature_width: 5,
            prediction_layers: 3,
            refinement_layers: 2,
            ..ModelConfig::default()
        };
        SegModel::new(
            SegNet::new(cfg, 4, 3).unwrap(),
            &mut ChaCha8Rng::seed_from_u64(2),
        )
    }

    #[test]
    fn single_round_trip() {
        let ckpt = Checkpoint {
            model: TrainedModel::Single(small()),
            features: spec(),
            class_names: vec!["a".into(), "b".into(), "c".into()],
        };
        let mut bytes = Vec::new();
        ckpt.write(&mut bytes).unwrap();
        assert_eq!(Checkpoint::read(&bytes[..], "mem").unwrap(), ckpt);
    }

    #[test]
    fn fusion_round_trip() {
        let m = small();
        let fused = FusionModel::from_branches(&m, &m, FusionMode::SupervisionOnly).unwrap();
        let ckpt = Checkpoint {
            model: TrainedModel::Fusion(fused),
            features: spec(),
            class_names: vec!["a".into(), "b".into(), "c".into()],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        ckpt.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), ckpt);
    }

    #[test]
    fn truncated_payload() {
        let ckpt = Checkpoint {
            model: TrainedModel::Single(small()),
            features: spec(),
            class_names: vec!["a".into(), "b".into(), "c".into()],
        };
        let mut bytes = Vec::new();
        ckpt.write(&mut bytes).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(Checkpoint::read(&bytes[..], "mem")
            .unwrap_err()
            .to_string()
            .contains("truncated"));
        assert!(Checkpoint::read(&b"nope\n"[..], "mem").is_err());
    }
}
