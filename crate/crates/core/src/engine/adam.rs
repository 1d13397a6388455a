use indexmap::IndexMap;
use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::{ParamSet, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected ADAM moments, keyed by parameter name.
#[derive(Debug, Clone)]
pub struct AdamState<F> {
    pub config: AdamConfig,
    step: u64,
    first: IndexMap<String, Array2<F>>,
    second: IndexMap<String, Array2<F>>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: IndexMap::new(),
            second: IndexMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without an entry in `grads` are treated
    /// as having zero gradient. Nothing is modified if any gradient is
    /// non-finite.
    pub fn step(
        &mut self,
        params: &mut ParamSet<F>,
        grads: &IndexMap<String, Array2<F>>,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = params.get(name)?;
            if p.dim() != g.dim() {
                return Err(Error::shape(
                    "adam_step",
                    format!(
                        "parameter '{name}' is {:?}, gradient {:?}",
                        p.dim(),
                        g.dim()
                    ),
                ));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of parameter '{name}'")));
            }
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let correct1 = F::of(1.0 - c.beta1.powi(t));
        let correct2 = F::of(1.0 - c.beta2.powi(t));
        let (lr, eps) = (F::of(c.lr), F::of(c.eps));
        let one = F::one();
        for (name, p) in params.iter_mut() {
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(p.dim()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(p.dim()));
            match grads.get(name) {
                Some(g) => {
                    Zip::from(&mut *m)
                        .and(g)
                        .for_each(|m, &g| *m = b1 * *m + (one - b1) * g);
                    Zip::from(&mut *v)
                        .and(g)
                        .for_each(|v, &g| *v = b2 * *v + (one - b2) * g * g);
                }
                None => {
                    m.mapv_inplace(|x| b1 * x);
                    v.mapv_inplace(|x| b2 * x);
                }
            }
            Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let mhat = m / correct1;
                let vhat = v / correct2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn grads(name: &str, g: Array2<f64>) -> IndexMap<String, Array2<f64>> {
        [(name.to_string(), g)].into_iter().collect()
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = ParamSet::new();
        p.insert("w", array![[0.3, -1.2]]);
        let before = p.clone();
        let mut adam = AdamState::new(AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut p, &grads("w", array![[0.0, 0.0]])).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = ParamSet::new();
        p.insert("w", array![[2.0]]);
        let mut adam = AdamState::new(AdamConfig::with_lr(0.001));
        adam.step(&mut p, &grads("w", array![[1.0]])).unwrap();
        // m̂ = v̂ = 1, so the step is lr / (1 + eps)
        let expected = 2.0 - 0.001 / (1.0 + 1e-8);
        assert!((p.get("w").unwrap()[[0, 0]] - expected).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = ParamSet::new();
        p.insert("stage0.w", array![[1.0]]);
        let mut adam = AdamState::new(AdamConfig::default());
        let err = adam
            .step(&mut p, &grads("stage0.w", array![[f64::NAN]]))
            .unwrap_err();
        assert!(err.to_string().contains("stage0.w"));
        assert_eq!(adam.steps(), 0);
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let run = || {
            let mut p = ParamSet::new();
            p.insert("w", array![[0.5f32, -0.25, 1.0]]);
            let mut adam = AdamState::new(AdamConfig::default());
            for k in 0..10 {
                let g = array![[k as f32 * 0.1, -0.3, 1.0 / (k as f32 + 1.0)]];
                let g = [("w".to_string(), g)].into_iter().collect();
                adam.step(&mut p, &g).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }
}
