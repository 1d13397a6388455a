use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Fault, Graph, NodeId, ParamSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates probed per parameter (all of them if the parameter is smaller).
    pub coords_per_param: usize,
    pub seed: u64,
    /// Optional corruption of the analytic backward pass.
    pub fault: Option<Fault>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            coords_per_param: 32,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
    /// Coordinates whose probe interval straddles a non-smooth point (a ReLU
    /// input or truncation changing side), where central differences are
    /// meaningless.
    pub coords_skipped: usize,
}

/// Compares analytic gradients of the scalar built by `f` against central
/// differences. Relative error is `|a - n| / max(|a|, |n|, 1e-8)`.
/// Coordinates where the perturbation moves any element across a kink are
/// skipped and counted.
pub fn grad_check<B>(params: &ParamSet<f64>, cfg: &GradCheckConfig, f: B) -> Result<GradCheckReport>
where
    B: Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<NodeId>,
{
    let mut g = match cfg.fault {
        Some(fault) => Graph::with_fault(fault),
        None => Graph::new(),
    };
    let out = f(&mut g, params)?;
    let pattern = g.branch_pattern();
    g.backward(out)?;
    let analytic = g.param_grads();

    let eval = |p: &ParamSet<f64>| -> Result<(f64, bool)> {
        let mut g = Graph::new();
        let out = f(&mut g, p)?;
        Ok((g.scalar(out), g.branch_pattern() == pattern))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
        coords_skipped: 0,
    };
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let Some(grad) = analytic.get(&name) else {
            continue;
        };
        let n = params.get(&name)?.len();
        let coords: Vec<usize> = if n <= cfg.coords_per_param {
            (0..n).collect()
        } else {
            sample(&mut rng, n, cfg.coords_per_param).into_vec()
        };
        for idx in coords {
            let original = params.get(&name)?.as_slice().expect("standard layout")[idx];
            let set = |p: &mut ParamSet<f64>, v: f64| -> Result<()> {
                p.get_mut(&name)?.as_slice_mut().ok_or_else(|| {
                    Error::Validation(format!("parameter '{name}' is not contiguous"))
                })?[idx] = v;
                Ok(())
            };
            set(&mut probe, original + cfg.step)?;
            let (plus, smooth_plus) = eval(&probe)?;
            set(&mut probe, original - cfg.step)?;
            let (minus, smooth_minus) = eval(&probe)?;
            set(&mut probe, original)?;
            if !(smooth_plus && smooth_minus) {
                report.coords_skipped += 1;
                continue;
            }

            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = grad.as_slice().expect("standard layout")[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.coords_checked += 1;
            if rel > report.max_rel_error || !rel.is_finite() {
                report.max_rel_error = rel;
                report.worst_param = name.clone();
                report.worst_index = idx;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
