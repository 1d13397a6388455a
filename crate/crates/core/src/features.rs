//! Per-frame feature vectors, the network input.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::engine::Scalar;
use crate::error::{Error, Result};

/// `M` frames of `D`-dimensional features, stored frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTrack {
    dim: usize,
    data: Vec<f32>,
}

impl FeatureTrack {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) || data.is_empty() {
            return Err(Error::shape(
                "feature track",
                format!(
                    "{} values do not form frames of dimension {dim}",
                    data.len()
                ),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "feature track frame {} component {}",
                i / dim,
                i % dim
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn frame(&self, m: usize) -> &[f32] {
        &self.data[m * self.dim..(m + 1) * self.dim]
    }

    pub fn values(&self) -> &[f32] {
        &self.data
    }

    /// Channels × time matrix in the engine's precision.
    pub fn to_matrix<F: Scalar>(&self) -> Array2<F> {
        let m = self.len();
        Array2::from_shape_fn((self.dim, m), |(d, t)| {
            F::of(self.data[t * self.dim + d] as f64)
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            dim: self.dim,
            data: vec![0.0; self.data.len()],
        }
    }
}

const FEAT_MAGIC: &str = "FEAT v1";

/// `FEAT v1 <M> <D> f32le` header followed by frame-major values.
pub fn write_features(mut out: impl Write, track: &FeatureTrack) -> std::io::Result<()> {
    writeln!(out, "{FEAT_MAGIC} {} {} f32le", track.len(), track.dim)?;
    let bytes: Vec<u8> = track.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    out.write_all(&bytes)
}

pub fn read_features(input: impl Read, context: &str) -> Result<FeatureTrack> {
    let mut reader = BufReader::new(input);
    let mut header = String::new();
    reader
        .read_line(&mut header)
        .map_err(|e| Error::parse(context, e))?;
    let fields: Vec<&str> = header.trim_end_matches('\n').split(' ').collect();
    if fields.len() != 5 || fields[0] != "FEAT" || fields[1] != "v1" || fields[4] != "f32le" {
        return Err(Error::parse(
            context,
            format!("bad FEAT header '{}'", header.trim_end()),
        ));
    }
    let m: usize = fields[2].parse().map_err(|e| Error::parse(context, e))?;
    let d: usize = fields[3].parse().map_err(|e| Error::parse(context, e))?;
    let mut bytes = Vec::new();
    reader
        .read_to_end(&mut bytes)
        .map_err(|e| Error::parse(context, e))?;
    if bytes.len() != m * d * 4 {
        return Err(Error::parse(
            context,
            format!(
                "expected {} payload bytes, found {}",
                m * d * 4,
                bytes.len()
            ),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FeatureTrack::new(d, data)
}

pub fn save_features(path: impl AsRef<Path>, track: &FeatureTrack) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_features(&mut buf, track).expect("writing to memory");
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureTrack> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_features(file, &path.display().to_string())
}
