//! Training objective: framewise cross-entropy plus a truncated smoothness
//! penalty on adjacent log-probabilities, summed over every stage.

use serde::{Deserialize, Serialize};

use crate::engine::{Graph, NodeId, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Truncation threshold on absolute log-probability differences.
    pub tau: f64,
    /// Weight of the smoothness term.
    pub alpha: f64,
    /// Probabilities are floored here before taking logs.
    pub log_floor: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 16.0,
            alpha: 0.15,
            log_floor: 1e-12,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau.is_nan() || self.tau <= 0.0 {
            return Err(Error::Validation(format!(
                "tau must be > 0, got {}",
                self.tau
            )));
        }
        if self.alpha.is_nan() || self.alpha < 0.0 {
            return Err(Error::Validation(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if self.log_floor.is_nan() || self.log_floor <= 0.0 {
            return Err(Error::Validation(format!(
                "log_floor must be > 0, got {}",
                self.log_floor
            )));
        }
        Ok(())
    }
}

pub fn classification_loss<F: Scalar>(
    g: &mut Graph<F>,
    probs: NodeId,
    truth: &[usize],
    cfg: &LossConfig,
) -> Result<NodeId> {
    g.cross_entropy(probs, truth, cfg.log_floor)
}

pub fn smoothness_loss<F: Scalar>(g: &mut Graph<F>, probs: NodeId, cfg: &LossConfig) -> NodeId {
    g.smoothness(probs, cfg.tau, cfg.log_floor)
}

/// `Σ_s classification_s + alpha · smoothness_s` over all stage outputs.
pub fn total_loss<F: Scalar>(
    g: &mut Graph<F>,
    stages: &[NodeId],
    truth: &[usize],
    cfg: &LossConfig,
) -> Result<NodeId> {
    if stages.is_empty() {
        return Err(Error::Validation(
            "total loss needs at least one stage output".into(),
        ));
    }
    let mut terms = Vec::with_capacity(stages.len() * 2);
    for &probs in stages {
        terms.push((classification_loss(g, probs, truth, cfg)?, 1.0));
        if cfg.alpha != 0.0 {
            terms.push((smoothness_loss(g, probs, cfg), cfg.alpha));
        }
    }
    g.combine(&terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn eval(probs: Array2<f64>, f: impl FnOnce(&mut Graph<f64>, NodeId) -> NodeId) -> f64 {
        let mut g = Graph::new();
        let p = g.constant(probs);
        let out = f(&mut g, p);
        g.scalar(out)
    }

    #[test]
    fn classification_values() {
        let cfg = LossConfig::default();
        let one_hot = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(
            eval(one_hot, |g, p| classification_loss(g, p, &[0, 1], &cfg)
                .unwrap()),
            0.0
        );
        let half = array![[0.5, 0.5], [0.5, 0.5]];
        let v = eval(half, |g, p| {
            classification_loss(g, p, &[0, 1], &cfg).unwrap()
        });
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        let zero = array![[0.0], [1.0]];
        let v = eval(zero, |g, p| classification_loss(g, p, &[0], &cfg).unwrap());
        assert!(v.is_finite());
        assert!((v - -(1e-12f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn classification_length_mismatch() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(array![[1.0, 1.0]]);
        assert!(classification_loss(&mut g, p, &[0], &LossConfig::default()).is_err());
    }

    #[test]
    fn smoothness_values() {
        let cfg = LossConfig::default();
        let constant = array![[0.3, 0.3, 0.3], [0.7, 0.7, 0.7]];
        assert_eq!(eval(constant, |g, p| smoothness_loss(g, p, &cfg)), 0.0);

        let two = array![[(-1.0f64).exp(), (-2.0f64).exp()]];
        assert!((eval(two, |g, p| smoothness_loss(g, p, &cfg)) - 0.5).abs() < 1e-12);

        // Δ = 20 truncates to τ: 256 / (M·C) with M = 2, C = 1
        let far = array![[1.0, (-20.0f64).exp()]];
        assert!((eval(far, |g, p| smoothness_loss(g, p, &cfg)) - 128.0).abs() < 1e-9);
    }

    #[test]
    fn smoothness_is_reversal_invariant() {
        let cfg = LossConfig::default();
        let p = array![[0.2, 0.5, 0.9, 0.1], [0.8, 0.5, 0.1, 0.9]];
        let rev = p.slice(ndarray::s![.., ..;-1]).to_owned();
        let a = eval(p, |g, x| smoothness_loss(g, x, &cfg));
        let b = eval(rev, |g, x| smoothness_loss(g, x, &cfg));
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn total_is_additive_over_stages() {
        let cfg = LossConfig::default();
        let p = array![[0.6, 0.3, 0.2], [0.4, 0.7, 0.8]];
        let single: f64 = {
            let mut g = Graph::new();
            let x = g.constant(p.clone());
            let l = total_loss(&mut g, &[x], &[0, 1, 1], &cfg).unwrap();
            g.scalar(l)
        };
        let mut g = Graph::new();
        let xs: Vec<_> = (0..4).map(|_| g.constant(p.clone())).collect();
        let l = total_loss(&mut g, &xs, &[0, 1, 1], &cfg).unwrap();
        assert!((g.scalar(l) - 4.0 * single).abs() < 1e-12);

        let no_smooth = LossConfig { alpha: 0.0, ..cfg };
        let mut g = Graph::new();
        let x = g.constant(p.clone());
        let l = total_loss(&mut g, &[x], &[0, 1, 1], &no_smooth).unwrap();
        let ce = classification_loss(&mut g, x, &[0, 1, 1], &cfg).unwrap();
        assert_eq!(g.scalar(l), g.scalar(ce));
    }

    #[test]
    fn perfect_constant_output_has_zero_loss() {
        let mut g = Graph::new();
        let x = g.constant(array![[1.0, 1.0, 1.0], [0.0, 0.0, 0.0]]);
        let l = total_loss(&mut g, &[x], &[0, 0, 0], &LossConfig::default()).unwrap();
        assert_eq!(g.scalar(l), 0.0);
    }
}
