//! Multi-stage temporal convolutional segmentation networks.
//!
//! A [`SegNet`] is the topology of one single-branch network: a prediction
//! stage of dual-dilated residual layers followed by refinement stages that
//! re-read the previous stage's class probabilities. Parameters live in a
//! [`ParamSet`] under the net's name prefix, so several nets can share one
//! set (the two branches of a [`FusionModel`]).

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{kaiming_uniform, Graph, NodeId, ParamSet, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_width: usize,
    pub prediction_layers: usize,
    pub refinement_layers: usize,
    pub refinement_stages: usize,
    pub kernel: usize,
    /// Dropout after each residual layer during training.
    pub dropout: f64,
    /// Use the two-dilation layer in the prediction stage.
    pub dual_dilated: bool,
    /// All refinement stages reuse one set of weights.
    pub shared_weights: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_width: 64,
            prediction_layers: 11,
            refinement_layers: 10,
            refinement_stages: 3,
            kernel: 3,
            dropout: 0.5,
            dual_dilated: true,
            shared_weights: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_width == 0 {
            return Err(Error::Validation("feature_width must be >= 1".into()));
        }
        if self.prediction_layers == 0
            || (self.refinement_stages > 0 && self.refinement_layers == 0)
        {
            return Err(Error::Validation(
                "every stage needs at least one layer".into(),
            ));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Validation(format!(
                "kernel {} must be odd",
                self.kernel
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Validation(format!(
                "dropout {} outside [0,1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        1 + self.refinement_stages
    }
}

/// Shape of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageConfig {
    pub layer_count: usize,
    pub feature_width: usize,
    pub dual_dilated: bool,
    pub num_classes: usize,
    pub input_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegNet {
    pub config: ModelConfig,
    pub input_dim: usize,
    pub num_classes: usize,
    /// Prepended to every parameter name.
    pub prefix: String,
}

/// Per-stage outputs of a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct StageOutput {
    /// Pre-classifier features, `feature_width × M`.
    pub features: NodeId,
    /// Class probabilities, `C × M`.
    pub probs: NodeId,
}

impl SegNet {
    pub fn new(config: ModelConfig, input_dim: usize, num_classes: usize) -> Result<Self> {
        Self::with_prefix(config, input_dim, num_classes, "")
    }

    pub fn with_prefix(
        config: ModelConfig,
        input_dim: usize,
        num_classes: usize,
        prefix: &str,
    ) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 || num_classes == 0 {
            return Err(Error::Validation(format!(
                "input_dim ({input_dim}) and num_classes ({num_classes}) must be >= 1"
            )));
        }
        Ok(Self {
            config,
            input_dim,
            num_classes,
            prefix: prefix.to_string(),
        })
    }

    pub fn stage_config(&self, stage: usize) -> StageConfig {
        let first = stage == 0;
        StageConfig {
            layer_count: if first {
                self.config.prediction_layers
            } else {
                self.config.refinement_layers
            },
            feature_width: self.config.feature_width,
            dual_dilated: first && self.config.dual_dilated,
            num_classes: self.num_classes,
            input_dim: if first {
                self.input_dim
            } else {
                self.num_classes
            },
        }
    }

    fn stage_prefix(&self, stage: usize) -> String {
        if stage > 0 && self.config.shared_weights {
            format!("{}refine", self.prefix)
        } else {
            format!("{}stage{stage}", self.prefix)
        }
    }

    fn dilations(&self, stage: usize, layer: usize) -> (usize, usize) {
        let n = self.stage_config(stage).layer_count;
        (1 << (n - 1 - layer), 1 << layer)
    }

    /// Fills `params` with freshly initialized weights (zero biases).
    pub fn init_params<F: Scalar>(&self, rng: &mut impl Rng, params: &mut ParamSet<F>) {
        let k = self.config.kernel;
        let w = self.config.feature_width;
        let mut conv = |params: &mut ParamSet<F>, name: String, out: usize, fan_in: usize| {
            params.insert(
                format!("{name}.w"),
                kaiming_uniform(rng, out, fan_in, fan_in),
            );
            params.insert(format!("{name}.b"), Array2::zeros((out, 1)));
        };
        for stage in 0..self.config.num_stages() {
            let p = self.stage_prefix(stage);
            if params.contains(&format!("{p}.in.w")) {
                continue;
            }
            let sc = self.stage_config(stage);
            conv(params, format!("{p}.in"), w, sc.input_dim);
            for l in 0..sc.layer_count {
                if sc.dual_dilated {
                    conv(params, format!("{p}.layer{l}.dil_a"), w, w * k);
                    conv(params, format!("{p}.layer{l}.dil_b"), w, w * k);
                    conv(params, format!("{p}.layer{l}.fuse"), w, 2 * w);
                } else {
                    conv(params, format!("{p}.layer{l}.dil"), w, w * k);
                }
                conv(params, format!("{p}.layer{l}.pw"), w, w);
            }
            conv(params, format!("{p}.out"), sc.num_classes, w);
        }
    }

    fn bind<F: Scalar>(
        g: &mut Graph<F>,
        params: &ParamSet<F>,
        name: &str,
    ) -> Result<(NodeId, NodeId)> {
        Ok((
            g.param(params, &format!("{name}.w"))?,
            g.param(params, &format!("{name}.b"))?,
        ))
    }

    /// Features of one stage: adapter, residual layers.
    pub fn stage_features<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        params: &ParamSet<F>,
        stage: usize,
        input: NodeId,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        let sc = self.stage_config(stage);
        if g.value(input).nrows() != sc.input_dim {
            return Err(Error::Dimension(format!(
                "stage {stage} expects {} input channels, got {}",
                sc.input_dim,
                g.value(input).nrows()
            )));
        }
        let p = self.stage_prefix(stage);
        let k = self.config.kernel;
        let (w, b) = Self::bind(g, params, &format!("{p}.in"))?;
        let mut x = g.pointwise_conv(input, w, b)?;
        for l in 0..sc.layer_count {
            let (d_a, d_b) = self.dilations(stage, l);
            let h = if sc.dual_dilated {
                let (wa, ba) = Self::bind(g, params, &format!("{p}.layer{l}.dil_a"))?;
                let (wb, bb) = Self::bind(g, params, &format!("{p}.layer{l}.dil_b"))?;
                let (wf, bf) = Self::bind(g, params, &format!("{p}.layer{l}.fuse"))?;
                let a = g.dilated_conv1d(x, wa, ba, k, d_a)?;
                let b = g.dilated_conv1d(x, wb, bb, k, d_b)?;
                let ab = g.concat(a, b)?;
                g.pointwise_conv(ab, wf, bf)?
            } else {
                let (wd, bd) = Self::bind(g, params, &format!("{p}.layer{l}.dil"))?;
                g.dilated_conv1d(x, wd, bd, k, d_b)?
            };
            let h = g.relu(h);
            let (wp, bp) = Self::bind(g, params, &format!("{p}.layer{l}.pw"))?;
            let mut h = g.pointwise_conv(h, wp, bp)?;
            if let Some(r) = rng.as_deref_mut() {
                h = g.dropout(h, self.config.dropout, r)?;
            }
            x = g.add(x, h)?;
        }
        Ok(x)
    }

    /// Classifier head followed by softmax over classes.
    pub fn stage_head<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        params: &ParamSet<F>,
        stage: usize,
        features: NodeId,
    ) -> Result<NodeId> {
        let (w, b) = Self::bind(g, params, &format!("{}.out", self.stage_prefix(stage)))?;
        let logits = g.pointwise_conv(features, w, b)?;
        Ok(g.softmax(logits))
    }

    /// Runs every stage; stage `s > 0` consumes stage `s - 1`'s probabilities.
    /// Pass `rng` to enable dropout (training).
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        params: &ParamSet<F>,
        input: NodeId,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Vec<StageOutput>> {
        let mut outs = Vec::with_capacity(self.config.num_stages());
        let mut x = input;
        for stage in 0..self.config.num_stages() {
            let features = self.stage_features(g, params, stage, x, rng.as_deref_mut())?;
            let probs = self.stage_head(g, params, stage, features)?;
            outs.push(StageOutput { features, probs });
            x = probs;
        }
        Ok(outs)
    }
}

/// A single-branch network with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SegModel<F> {
    pub net: SegNet,
    pub params: ParamSet<F>,
}

impl<F: Scalar> SegModel<F> {
    pub fn new(net: SegNet, rng: &mut impl Rng) -> Self {
        let mut params = ParamSet::new();
        net.init_params(rng, &mut params);
        Self { net, params }
    }

    pub fn cast<G: Scalar>(&self) -> SegModel<G> {
        SegModel {
            net: self.net.clone(),
            params: self.params.cast(),
        }
    }

    /// Records a forward pass on `feats` (`input_dim × M`).
    pub fn forward_graph(
        &self,
        g: &mut Graph<F>,
        feats: Array2<F>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Vec<StageOutput>> {
        if feats.nrows() != self.net.input_dim {
            return Err(Error::Dimension(format!(
                "model expects {}-dimensional features, got {}",
                self.net.input_dim,
                feats.nrows()
            )));
        }
        let x = g.constant(feats);
        self.net.forward(g, &self.params, x, rng)
    }

    /// Inference: probability tracks of every stage.
    pub fn forward_single(&self, feats: Array2<F>) -> Result<Vec<Array2<F>>> {
        let mut g = Graph::new();
        let outs = self.forward_graph(&mut g, feats, None)?;
        Ok(outs.iter().map(|o| g.value(o.probs).clone()).collect())
    }

    pub fn predict(&self, feats: Array2<F>) -> Result<Vec<usize>> {
        let probs = self.forward_single(feats)?;
        Ok(argmax_frames(
            probs.last().expect("at least one stage").view(),
        ))
    }
}

/// Per-frame argmax; ties go to the lower class id.
pub fn argmax_frames<F: Scalar>(probs: ArrayView2<F>) -> Vec<usize> {
    probs
        .columns()
        .into_iter()
        .map(|col| {
            let mut best = 0;
            for (k, &v) in col.iter().enumerate() {
                if v > col[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Each stage's fused prediction is the input of both branches' next stage.
    #[default]
    Recurrent,
    /// Branches refine their own predictions; fusion only produces supervised outputs.
    SupervisionOnly,
}

pub const HEAT_PREFIX: &str = "heat.";
pub const AUX_PREFIX: &str = "aux.";

/// Outputs of a fused forward pass, one node per stage.
#[derive(Debug, Clone)]
pub struct FusedOutput {
    pub fused: Vec<NodeId>,
    pub heat: Vec<NodeId>,
    pub aux: Vec<NodeId>,
}

/// Two branches whose per-stage features are concatenated and reduced back
/// to `feature_width` channels by a pointwise convolution, with a fused
/// classifier per stage.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel<F> {
    pub heat: SegNet,
    pub aux: SegNet,
    pub mode: FusionMode,
    pub params: ParamSet<F>,
}

impl<F: Scalar> FusionModel<F> {
    /// Builds the fusion model from two trained branches. Fusion convolutions
    /// start as averaging maps `0.5·[I | I]` and each fused head starts as a
    /// copy of the heatmap branch's head for that stage.
    pub fn from_branches(heat: &SegModel<F>, aux: &SegModel<F>, mode: FusionMode) -> Result<Self> {
        let (hc, ac) = (&heat.net.config, &aux.net.config);
        if hc.feature_width != ac.feature_width || hc.num_stages() != ac.num_stages() {
            return Err(Error::Dimension(
                "fusion branches must share feature width and stage count".into(),
            ));
        }
        if heat.net.num_classes != aux.net.num_classes {
            return Err(Error::Dimension(
                "fusion branches disagree on class count".into(),
            ));
        }
        let heat_net = SegNet {
            prefix: HEAT_PREFIX.into(),
            ..heat.net.clone()
        };
        let aux_net = SegNet {
            prefix: AUX_PREFIX.into(),
            ..aux.net.clone()
        };
        let mut params = ParamSet::new();
        params.extend_prefixed(HEAT_PREFIX, &heat.params);
        params.extend_prefixed(AUX_PREFIX, &aux.params);
        let w = hc.feature_width;
        let half = F::of(0.5);
        for stage in 0..hc.num_stages() {
            let avg = Array2::from_shape_fn(
                (w, 2 * w),
                |(o, i)| if i % w == o { half } else { F::zero() },
            );
            params.insert(format!("fuse{stage}.w"), avg);
            params.insert(format!("fuse{stage}.b"), Array2::zeros((w, 1)));
            let head = heat_net.stage_prefix(stage);
            params.insert(
                format!("fhead{stage}.w"),
                params.get(&format!("{head}.out.w"))?.clone(),
            );
            params.insert(
                format!("fhead{stage}.b"),
                params.get(&format!("{head}.out.b"))?.clone(),
            );
        }
        Ok(Self {
            heat: heat_net,
            aux: aux_net,
            mode,
            params,
        })
    }

    pub fn cast<G: Scalar>(&self) -> FusionModel<G> {
        FusionModel {
            heat: self.heat.clone(),
            aux: self.aux.clone(),
            mode: self.mode,
            params: self.params.cast(),
        }
    }

    pub fn num_stages(&self) -> usize {
        self.heat.config.num_stages()
    }

    pub fn forward_graph(
        &self,
        g: &mut Graph<F>,
        heat_feats: Array2<F>,
        aux_feats: Array2<F>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<FusedOutput> {
        if heat_feats.ncols() != aux_feats.ncols() {
            return Err(Error::Dimension(format!(
                "heatmap track has {} frames, auxiliary track {}",
                heat_feats.ncols(),
                aux_feats.ncols()
            )));
        }
        let mut xh = g.constant(heat_feats);
        let mut xa = g.constant(aux_feats);
        let mut out = FusedOutput {
            fused: Vec::new(),
            heat: Vec::new(),
            aux: Vec::new(),
        };
        for stage in 0..self.num_stages() {
            let fh = self
                .heat
                .stage_features(g, &self.params, stage, xh, rng.as_deref_mut())?;
            let fa = self
                .aux
                .stage_features(g, &self.params, stage, xa, rng.as_deref_mut())?;
            let ph = self.heat.stage_head(g, &self.params, stage, fh)?;
            let pa = self.aux.stage_head(g, &self.params, stage, fa)?;
            let fused = self.fuse(g, stage, fh, fa)?;
            let (w, b) = SegNet::bind(g, &self.params, &format!("fhead{stage}"))?;
            let logits = g.pointwise_conv(fused, w, b)?;
            let pf = g.softmax(logits);
            out.fused.push(pf);
            out.heat.push(ph);
            out.aux.push(pa);
            (xh, xa) = match self.mode {
                FusionMode::Recurrent => (pf, pf),
                FusionMode::SupervisionOnly => (ph, pa),
            };
        }
        Ok(out)
    }

    /// The fusion module: concatenate, then reduce with a pointwise convolution.
    pub fn fuse(
        &self,
        g: &mut Graph<F>,
        stage: usize,
        heat: NodeId,
        aux: NodeId,
    ) -> Result<NodeId> {
        let cat = g.concat(heat, aux)?;
        let (w, b) = SegNet::bind(g, &self.params, &format!("fuse{stage}"))?;
        g.pointwise_conv(cat, w, b)
    }

    /// Fused probability tracks of every stage.
    pub fn forward_fused(
        &self,
        heat_feats: Array2<F>,
        aux_feats: Array2<F>,
    ) -> Result<Vec<Array2<F>>> {
        let mut g = Graph::new();
        let out = self.forward_graph(&mut g, heat_feats, aux_feats, None)?;
        Ok(out.fused.iter().map(|&p| g.value(p).clone()).collect())
    }

    pub fn predict(&self, heat_feats: Array2<F>, aux_feats: Array2<F>) -> Result<Vec<usize>> {
        let probs = self.forward_fused(heat_feats, aux_feats)?;
        Ok(argmax_frames(
            probs.last().expect("at least one stage").view(),
        ))
    }

    /// The branch under `prefix` as a standalone model.
    pub fn branch(&self, prefix: &str) -> SegModel<F> {
        let net = if prefix == HEAT_PREFIX {
            &self.heat
        } else {
            &self.aux
        };
        SegModel {
            net: SegNet {
                prefix: String::new(),
                ..net.clone()
            },
            params: self.params.strip_prefix(prefix),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    fn small(width: usize, input_dim: usize, classes: usize) -> SegModel<f64> {
        let cfg = ModelConfig {
            feature_width: width,
            ..ModelConfig::default()
        };
        let net = SegNet::new(cfg, input_dim, classes).unwrap();
        SegModel::new(net, &mut ChaCha8Rng::seed_from_u64(3))
    }

    fn feats(d: usize, m: usize) -> Array2<f64> {
        Array2::from_shape_fn((d, m), |(i, t)| ((i * 31 + t * 17) % 13) as f64 / 13.0)
    }

    #[test]
    fn four_stages_full_length() {
        let model = small(8, 6, 5);
        for m in [1, 7, 50] {
            let outs = model.forward_single(feats(6, m)).unwrap();
            assert_eq!(outs.len(), 4);
            for p in &outs {
                assert_eq!(p.dim(), (5, m));
                assert!(p.iter().all(|v| v.is_finite()));
                for col in p.columns() {
                    assert!((col.sum() - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn dimension_mismatch() {
        let model = small(4, 6, 3);
        assert!(matches!(
            model.forward_single(feats(5, 10)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax_frames(array![[0.2], [0.5], [0.3]].view()), vec![1]);
        assert_eq!(argmax_frames(array![[0.5], [0.5]].view()), vec![0]);
        assert_eq!(argmax_frames(array![[1.0, 1.0]].view()), vec![0, 0]);
    }

    #[test]
    fn single_class_predicts_zero() {
        let model = small(4, 3, 1);
        assert_eq!(model.predict(feats(3, 9)).unwrap(), vec![0; 9]);
    }

    #[test]
    fn shared_refinement_weights() {
        let cfg = ModelConfig {
            feature_width: 4,
            shared_weights: true,
            ..ModelConfig::default()
        };
        let net = SegNet::new(cfg, 3, 2).unwrap();
        let shared: SegModel<f64> = SegModel::new(net, &mut ChaCha8Rng::seed_from_u64(1));
        let separate = small(4, 3, 2);
        assert!(shared.params.len() < separate.params.len());
        assert!(shared.params.contains("refine.layer9.pw.w"));
        assert_eq!(shared.forward_single(feats(3, 12)).unwrap().len(), 4);
    }

    // Frames whose prediction-stage features change after perturbing frame `t`.
    fn reach(layers: usize, m: usize, t: usize) -> usize {
        let cfg = ModelConfig {
            feature_width: 6,
            prediction_layers: layers,
            refinement_stages: 0,
            ..ModelConfig::default()
        };
        let net = SegNet::new(cfg, 2, 3).unwrap();
        let model: SegModel<f64> = SegModel::new(net, &mut ChaCha8Rng::seed_from_u64(9));
        let base = feats(2, m);
        let mut bumped = base.clone();
        bumped[[0, t]] += 1.0;
        let run = |x: Array2<f64>| {
            let mut g = Graph::new();
            let outs = model.forward_graph(&mut g, x, None).unwrap();
            g.value(outs[0].features).clone()
        };
        let (a, b) = (run(base), run(bumped));
        let changed: Vec<usize> = (0..m)
            .filter(|&s| a.column(s).iter().zip(b.column(s)).any(|(x, y)| x != y))
            .collect();
        assert!(changed.contains(&t));
        changed.len()
    }

    #[test]
    fn receptive_field_grows_with_depth() {
        let one = reach(1, 200, 100);
        let eleven = reach(11, 200, 100);
        assert!(one <= 3, "{one}");
        assert!(eleven > 50, "{eleven}");
    }

    #[test]
    fn fusion_averaging_identity() {
        let branch = small(6, 4, 3);
        let fused = FusionModel::from_branches(&branch, &branch, FusionMode::Recurrent).unwrap();
        let x = feats(4, 15);
        let branch_probs = branch.forward_single(x.clone()).unwrap();
        let fused_probs = fused.forward_fused(x.clone(), x.clone()).unwrap();
        assert_eq!(branch_probs, fused_probs);

        let mut g = Graph::new();
        let out = fused.forward_graph(&mut g, x.clone(), x, None).unwrap();
        assert_eq!(out.fused.len(), 4);
        assert_eq!(g.value(out.fused[3]).dim(), (3, 15));
    }

    #[test]
    fn fusion_with_one_branch_zeroed() {
        let branch = small(5, 4, 3);
        let fused = FusionModel::from_branches(&branch, &branch, FusionMode::Recurrent).unwrap();
        let mut g = Graph::new();
        let h = g.constant(feats(5, 7));
        let z = g.constant(Array2::zeros((5, 7)));
        let out = fused.fuse(&mut g, 0, h, z).unwrap();
        // averaging init: the zeroed half drops out, leaving half the other branch
        assert_eq!(g.value(out), &(feats(5, 7) * 0.5));
    }

    #[test]
    fn fusion_rejects_length_mismatch() {
        let branch = small(4, 4, 2);
        let fused =
            FusionModel::from_branches(&branch, &branch, FusionMode::SupervisionOnly).unwrap();
        assert!(fused.forward_fused(feats(4, 5), feats(4, 6)).is_err());
        let probs = fused
            .forward_fused(feats(4, 5), Array2::zeros((4, 5)))
            .unwrap();
        for p in probs {
            for col in p.columns() {
                assert!((col.sum() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn branch_extraction_round_trips() {
        let branch = small(4, 3, 2);
        let fused = FusionModel::from_branches(&branch, &branch, FusionMode::Recurrent).unwrap();
        assert_eq!(fused.branch(HEAT_PREFIX), branch);
    }
}
