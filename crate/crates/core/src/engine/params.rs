use indexmap::IndexMap;
use ndarray::Array2;
use rand::Rng;

use super::Scalar;
use crate::error::{Error, Result};

/// Named parameter matrices in a stable insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<F> {
    values: IndexMap<String, Array2<F>>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        Self {
            values: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<F>) {
        self.values.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Array2<F>> {
        self.values
            .get(name)
            .ok_or_else(|| Error::Validation(format!("unknown parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array2<F>> {
        self.values
            .get_mut(name)
            .ok_or_else(|| Error::Validation(format!("unknown parameter '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<F>)> {
        self.values.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2<F>)> {
        self.values.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.values.keys()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.values().map(|v| v.len()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamSet<G> {
        ParamSet {
            values: self
                .values
                .iter()
                .map(|(k, v)| (k.clone(), v.mapv(|x| G::of(x.to_f64()))))
                .collect(),
        }
    }

    /// Copies every parameter of `other` under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamSet<F>) {
        for (k, v) in other.iter() {
            self.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    /// Parameters whose names start with `prefix`, with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> ParamSet<F> {
        ParamSet {
            values: self
                .values
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }
}

/// Uniform weights in `±1/sqrt(fan_in)`: Kaiming-uniform with the
/// leaky-ReLU slope `sqrt(5)` that PyTorch uses for its convolution default.
pub fn kaiming_uniform<F: Scalar>(
    rng: &mut impl Rng,
    rows: usize,
    cols: usize,
    fan_in: usize,
) -> Array2<F> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || F::of(rng.random_range(-bound..bound)))
}
