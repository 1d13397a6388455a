//! Training loops for single-branch and two-branch fusion models.
//!
//! Training is one full sequence per ADAM step, over a seeded shuffle of the
//! training split each epoch. Everything random (initialization, shuffling,
//! dropout) derives from one seed.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{FeatureSource, FeatureSpec};
use crate::engine::{AdamConfig, AdamState, Graph, NodeId, ParamSet};
use crate::error::{Error, Result};
use crate::features::{load_features, FeatureTrack};
use crate::loss::{total_loss, LossConfig};
use crate::model::{argmax_frames, FusionMode, FusionModel, ModelConfig, SegModel, SegNet};
use crate::perturb::drop_limbs;
use crate::pose::{
    load_label_track_with, load_skeleton_sequence, ClassMap, DatasetManifest, SkeletonSequence,
    Split,
};
use crate::raster::{pooled_encoder, skeleton_heatmaps, HeatmapKind, RasterConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Learning rate of joint fusion training.
    pub lr_stage2: f64,
    pub epochs_stage2: usize,
    pub fusion_mode: FusionMode,
    /// Also apply the loss to each branch's own stage outputs during joint
    /// fusion training.
    pub supervise_branches: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            epochs: 100,
            lr_stage2: 0.0005,
            epochs_stage2: 100,
            fusion_mode: FusionMode::Recurrent,
            supervise_branches: false,
            seed: 0,
        }
    }
}

/// Every knob of a run, loadable from one JSON file. Missing fields take
/// their defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub raster: RasterConfig,
    pub heatmap: HeatmapKind,
    /// Cells per side of the pooled heatmap encoder.
    pub grid: usize,
    pub features: FeatureSource,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            raster: RasterConfig::default(),
            heatmap: HeatmapKind::default(),
            grid: 8,
            features: FeatureSource::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str, context: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::parse(context, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.raster.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        if self.grid == 0 || !self.raster.out_size.is_multiple_of(self.grid) {
            return Err(Error::Validation(format!(
                "grid {} does not divide out_size {}",
                self.grid, self.raster.out_size
            )));
        }
        let t = &self.train;
        if !(t.lr > 0.0 && t.lr_stage2 > 0.0) {
            return Err(Error::Validation("learning rates must be > 0".into()));
        }
        Ok(())
    }

    pub fn feature_spec(&self) -> FeatureSpec {
        FeatureSpec {
            source: self.features,
            heatmap: self.heatmap,
            raster: self.raster,
            grid: self.grid,
        }
    }
}

/// Runs `f` on a thread pool sized by `SEGTCN_THREADS`, or `default` threads
/// when unset (0 means all available cores).
pub fn with_threads<R: Send>(default: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let n = std::env::var("SEGTCN_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(default);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::Validation(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Pooled heatmap features of a skeleton sequence.
pub fn heatmap_features(seq: &SkeletonSequence, spec: &FeatureSpec) -> Result<FeatureTrack> {
    pooled_encoder(
        &skeleton_heatmaps(seq, spec.heatmap, &spec.raster)?,
        spec.grid,
    )
}

/// A sequence ready for the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// Heatmap-branch input, `D × M`.
    pub heat: Array2<f32>,
    /// Auxiliary-branch input, `D' × M`.
    pub aux: Option<Array2<f32>>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LoadOptions {
    pub want_aux: bool,
    /// Limb dropout probability applied to skeletons before rasterization.
    pub drop_p: Option<f64>,
    pub drop_seed: u64,
}

/// Loads and featurizes the sequences of one split, in manifest order.
pub fn load_samples(
    manifest: &DatasetManifest,
    classes: &ClassMap,
    split: Split,
    spec: &FeatureSpec,
    opts: &LoadOptions,
) -> Result<Vec<Sample>> {
    let entries: Vec<_> = manifest.split(split).enumerate().collect();
    entries
        .par_iter()
        .map(|&(k, e)| {
            let labels = load_label_track_with(&e.labels, classes)?.labels;
            let file_features = || -> Result<FeatureTrack> {
                let path = e.features.as_ref().ok_or_else(|| {
                    Error::Validation(format!("sequence '{}' has no feature file", e.id))
                })?;
                load_features(path)
            };
            let heat = match spec.source {
                FeatureSource::Builtin => {
                    let mut seq = load_skeleton_sequence(&e.skeleton)?;
                    if let Some(p) = opts.drop_p {
                        seq = drop_limbs(&seq, p, opts.drop_seed.wrapping_add(k as u64))?;
                    }
                    heatmap_features(&seq, spec)?
                }
                FeatureSource::File => file_features()?,
            };
            let aux = if opts.want_aux {
                Some(file_features()?)
            } else {
                None
            };
            for (name, track) in
                std::iter::once(("heatmap", &heat)).chain(aux.iter().map(|a| ("auxiliary", a)))
            {
                if track.len() != labels.len() {
                    return Err(Error::Dimension(format!(
                        "sequence '{}': {name} features have {} frames, labels {}",
                        e.id,
                        track.len(),
                        labels.len()
                    )));
                }
            }
            Ok(Sample {
                id: e.id.clone(),
                heat: heat.to_matrix(),
                aux: aux.map(|a| a.to_matrix()),
                labels,
            })
        })
        .collect()
}

/// A model the generic training loop can optimize.
pub trait Trainable: Clone + Send + Sync {
    fn params(&self) -> &ParamSet<f32>;
    fn params_mut(&mut self) -> &mut ParamSet<f32>;
    /// Records the training objective for one sample. Dropout is active when
    /// `rng` is given.
    fn loss_graph(
        &self,
        g: &mut Graph<f32>,
        sample: &Sample,
        cfg: &RunConfig,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId>;
    /// Final-stage probabilities in inference mode.
    fn final_probs(&self, sample: &Sample) -> Result<Array2<f32>>;
}

impl Trainable for SegModel<f32> {
    fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<f32> {
        &mut self.params
    }

    fn loss_graph(
        &self,
        g: &mut Graph<f32>,
        sample: &Sample,
        cfg: &RunConfig,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        let outs = self.forward_graph(g, sample.heat.clone(), rng)?;
        let probs: Vec<NodeId> = outs.iter().map(|o| o.probs).collect();
        total_loss(g, &probs, &sample.labels, &cfg.loss)
    }

    fn final_probs(&self, sample: &Sample) -> Result<Array2<f32>> {
        Ok(self
            .forward_single(sample.heat.clone())?
            .pop()
            .expect("at least one stage"))
    }
}

fn aux_of(sample: &Sample) -> Result<Array2<f32>> {
    sample.aux.clone().ok_or_else(|| {
        Error::Validation(format!(
            "sequence '{}' has no auxiliary features",
            sample.id
        ))
    })
}

impl Trainable for FusionModel<f32> {
    fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<f32> {
        &mut self.params
    }

    fn loss_graph(
        &self,
        g: &mut Graph<f32>,
        sample: &Sample,
        cfg: &RunConfig,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        let out = self.forward_graph(g, sample.heat.clone(), aux_of(sample)?, rng)?;
        let mut stages = out.fused.clone();
        if cfg.train.supervise_branches {
            stages.extend(&out.heat);
            stages.extend(&out.aux);
        }
        total_loss(g, &stages, &sample.labels, &cfg.loss)
    }

    fn final_probs(&self, sample: &Sample) -> Result<Array2<f32>> {
        Ok(self
            .forward_fused(sample.heat.clone(), aux_of(sample)?)?
            .pop()
            .expect("at least one stage"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training loss over the epoch's sequences (dropout active).
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    pub initial: M,
    /// Parameters after the epoch with the lowest training loss (the
    /// initialization when no epoch ran).
    pub best: M,
    pub best_epoch: usize,
    pub last: M,
    pub log: Vec<EpochLog>,
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const INIT_STREAM: u64 = 0;
const AUX_INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const DROPOUT_STREAM: u64 = 3;

/// Optimizes `model` on `samples` with ADAM, one sequence per step.
pub fn fit<M: Trainable>(
    model: M,
    samples: &[Sample],
    cfg: &RunConfig,
    lr: f64,
    epochs: usize,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome<M>> {
    if samples.is_empty() {
        return Err(Error::Validation("training split is empty".into()));
    }
    let mut shuffle_rng = stream(seed, SHUFFLE_STREAM);
    let mut dropout_rng = stream(seed, DROPOUT_STREAM);
    let mut adam = AdamState::new(AdamConfig::with_lr(lr));
    let initial = model.clone();
    let mut model = model;
    let mut best = (model.clone(), 0usize, f64::INFINITY);
    let mut log = Vec::with_capacity(epochs);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 1..=epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sum = 0.0;
        for &k in &order {
            let sample = &samples[k];
            let mut g = Graph::new();
            let loss = model.loss_graph(&mut g, sample, cfg, Some(&mut dropout_rng))?;
            let value = g.scalar(loss) as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at epoch {epoch}, sequence '{}'",
                    sample.id
                )));
            }
            g.backward(loss)?;
            adam.step(model.params_mut(), &g.param_grads())
                .map_err(|e| match e {
                    Error::NonFinite(what) => Error::NonFinite(format!(
                        "{what} at epoch {epoch}, sequence '{}'",
                        sample.id
                    )),
                    other => other,
                })?;
            sum += value;
        }
        let entry = EpochLog {
            epoch,
            loss: sum / samples.len() as f64,
        };
        on_epoch(&entry);
        if entry.loss < best.2 {
            best = (model.clone(), epoch, entry.loss);
        }
        log.push(entry);
    }
    Ok(TrainOutcome {
        initial,
        best: best.0,
        best_epoch: best.1,
        last: model,
        log,
    })
}

/// Mean training objective over `samples` in inference mode (no dropout).
pub fn mean_loss<M: Trainable>(model: &M, samples: &[Sample], cfg: &RunConfig) -> Result<f64> {
    let losses: Vec<f64> = samples
        .par_iter()
        .map(|s| {
            let mut g = Graph::new();
            let l = model.loss_graph(&mut g, s, cfg, None)?;
            Ok(g.scalar(l) as f64)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Framewise predictions of every sample.
pub fn predict_all<M: Trainable>(model: &M, samples: &[Sample]) -> Result<Vec<Vec<usize>>> {
    samples
        .par_iter()
        .map(|s| Ok(argmax_frames(model.final_probs(s)?.view())))
        .collect()
}

pub fn new_branch(
    cfg: &RunConfig,
    input_dim: usize,
    num_classes: usize,
    seed: u64,
    aux: bool,
) -> Result<SegModel<f32>> {
    let net = SegNet::new(cfg.model, input_dim, num_classes)?;
    let mut rng = stream(seed, if aux { AUX_INIT_STREAM } else { INIT_STREAM });
    Ok(SegModel::new(net, &mut rng))
}

/// Trains a single-branch model on the heatmap features of `samples`.
pub fn train_single(
    samples: &[Sample],
    num_classes: usize,
    cfg: &RunConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome<SegModel<f32>>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Validation("training split is empty".into()))?;
    let model = new_branch(cfg, first.heat.nrows(), num_classes, cfg.train.seed, false)?;
    fit(
        model,
        samples,
        cfg,
        cfg.train.lr,
        cfg.train.epochs,
        cfg.train.seed,
        on_epoch,
    )
}

/// Which training phase an epoch log line belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Heat,
    Aux,
    Fusion,
}

#[derive(Debug, Clone)]
pub struct FusedOutcome {
    pub heat: TrainOutcome<SegModel<f32>>,
    pub aux: TrainOutcome<SegModel<f32>>,
    pub fusion: TrainOutcome<FusionModel<f32>>,
}

/// Two-stage fusion training: each branch alone at `lr`, then the fusion
/// model built from the final branch weights, jointly at `lr_stage2`.
pub fn train_fused(
    samples: &[Sample],
    num_classes: usize,
    cfg: &RunConfig,
    on_epoch: &mut dyn FnMut(Phase, &EpochLog),
) -> Result<FusedOutcome> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Validation("training split is empty".into()))?;
    if let Some(s) = samples.iter().find(|s| s.aux.is_none()) {
        return Err(Error::Validation(format!(
            "training sequence '{}' has no auxiliary features",
            s.id
        )));
    }
    let t = &cfg.train;
    let heat_model = new_branch(cfg, first.heat.nrows(), num_classes, t.seed, false)?;
    let heat = fit(heat_model, samples, cfg, t.lr, t.epochs, t.seed, &mut |e| {
        on_epoch(Phase::Heat, e)
    })?;

    let aux_samples: Vec<Sample> = samples
        .iter()
        .map(|s| Sample {
            heat: s.aux.clone().expect("checked above"),
            aux: None,
            ..s.clone()
        })
        .collect();
    let aux_dim = aux_samples[0].heat.nrows();
    let aux_model = new_branch(cfg, aux_dim, num_classes, t.seed, true)?;
    let aux = fit(
        aux_model,
        &aux_samples,
        cfg,
        t.lr,
        t.epochs,
        t.seed.wrapping_add(1),
        &mut |e| on_epoch(Phase::Aux, e),
    )?;

    let fused = FusionModel::from_branches(&heat.last, &aux.last, t.fusion_mode)?;
    let fusion = fit(
        fused,
        samples,
        cfg,
        t.lr_stage2,
        t.epochs_stage2,
        t.seed.wrapping_add(2),
        &mut |e| on_epoch(Phase::Fusion, e),
    )?;
    Ok(FusedOutcome { heat, aux, fusion })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_video, SynthConfig};

    fn tiny_cfg() -> RunConfig {
        RunConfig {
            model: ModelConfig {
                feature_width: 8,
                prediction_layers: 4,
                refinement_layers: 3,
                refinement_stages: 1,
                ..ModelConfig::default()
            },
            ..RunConfig::default()
        }
    }

    fn samples(n: usize) -> Vec<Sample> {
        let cfg = SynthConfig {
            classes: 3,
            segments_per_video: (3, 4),
            seed: 4,
            ..SynthConfig::default()
        };
        let spec = tiny_cfg().feature_spec();
        (0..n)
            .map(|i| {
                let v = generate_video(&cfg, i).unwrap();
                Sample {
                    id: v.id,
                    heat: heatmap_features(&v.skeleton, &spec).unwrap().to_matrix(),
                    aux: Some(crate::synth::aux_features(&v.skeleton).unwrap().to_matrix()),
                    labels: v.labels,
                }
            })
            .collect()
    }

    #[test]
    fn config_defaults_and_overrides() {
        let cfg = RunConfig::from_json("{}", "cfg").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train.lr, 0.001);
        assert_eq!(cfg.train.epochs, 100);
        assert_eq!(cfg.train.lr_stage2, 0.0005);
        let cfg = RunConfig::from_json(r#"{"train": {"epochs": 3}, "grid": 4}"#, "cfg").unwrap();
        assert_eq!((cfg.train.epochs, cfg.grid), (3, 4));
        assert!(RunConfig::from_json(r#"{"grid": 5}"#, "cfg").is_err());
        assert!(RunConfig::from_json(r#"{"bogus": 1}"#, "cfg").is_err());
    }

    #[test]
    fn zero_epochs_keeps_initialization() {
        let data = samples(2);
        let mut cfg = tiny_cfg();
        cfg.train.epochs = 0;
        let out = train_single(&data, 3, &cfg, &mut |_| {}).unwrap();
        assert_eq!(out.last, out.initial);
        assert_eq!(out.best, out.initial);
        assert!(out.log.is_empty());
    }

    #[test]
    fn one_epoch_reduces_loss() {
        let data = samples(2);
        let mut cfg = tiny_cfg();
        cfg.train.epochs = 1;
        let out = train_single(&data, 3, &cfg, &mut |_| {}).unwrap();
        let before = mean_loss(&out.initial, &data, &cfg).unwrap();
        let after = mean_loss(&out.last, &data, &cfg).unwrap();
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn training_is_deterministic() {
        let data = samples(2);
        let mut cfg = tiny_cfg();
        cfg.train.epochs = 2;
        let a = train_single(&data, 3, &cfg, &mut |_| {}).unwrap();
        let b = train_single(&data, 3, &cfg, &mut |_| {}).unwrap();
        assert_eq!(a.last, b.last);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn fused_training_requires_aux() {
        let mut data = samples(2);
        data[1].aux = None;
        let mut cfg = tiny_cfg();
        cfg.train.epochs = 0;
        cfg.train.epochs_stage2 = 0;
        let err = train_fused(&data, 3, &cfg, &mut |_, _| {}).unwrap_err();
        assert!(err.to_string().contains(&data[1].id));
    }

    #[test]
    fn fused_zero_epochs_starts_from_branches() {
        let data = samples(2);
        let mut cfg = tiny_cfg();
        cfg.train.epochs = 1;
        cfg.train.epochs_stage2 = 0;
        let out = train_fused(&data, 3, &cfg, &mut |_, _| {}).unwrap();
        assert_eq!(
            out.fusion.last.branch(crate::model::HEAT_PREFIX),
            out.heat.last
        );
        assert_eq!(
            out.fusion.last.branch(crate::model::AUX_PREFIX),
            out.aux.last
        );
    }

    #[test]
    fn non_finite_input_is_reported() {
        let mut data = samples(1);
        data[0].heat[[0, 3]] = f32::NAN;
        let mut cfg = tiny_cfg();
        cfg.train.epochs = 1;
        let err = train_single(&data, 3, &cfg, &mut |_| {}).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("epoch 1") && msg.contains(&data[0].id),
            "{msg}"
        );
    }
}
