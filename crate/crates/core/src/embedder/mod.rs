//! Differentiable toy face embedders.
//!
//! A model maps a 3-channel image to a unit-norm feature vector through a
//! bilinear resize to its input size, a small stack of stride-2 tanh
//! convolutions, global average pooling, a linear projection and L2
//! normalization. Every stage has an exact input-gradient pass, so the
//! attack can differentiate cosine losses with respect to pixels.

mod io;
pub mod layers;

pub use io::{load_model, save_model, MODEL_FORMAT_VERSION};
pub use layers::{Conv2d, Layer, Linear, Tensor};

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{resize_grid, resize_grid_adjoint, Grid, Image};
use crate::rng::RngStream;

pub const DEFAULT_INPUT_SIZE: usize = 64;
pub const DEFAULT_EMBED_DIM: usize = 32;

/// A unit-norm embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    /// Normalizes `values` to unit length.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::NonFinite(format!("cannot normalize vector of norm {norm}")));
        }
        Ok(Self(values.into_iter().map(|v| v / norm).collect()))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn negated(&self) -> FeatureVector {
        FeatureVector(self.0.iter().map(|v| -v).collect())
    }
}

/// Dot product of unit vectors, clamped to `[-1, 1]`.
pub fn cosine(a: &FeatureVector, b: &FeatureVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "feature dims differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    Ok(dot.clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    A,
    B,
    C,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::A, Variant::B, Variant::C];

    /// Conv widths per stride-2 block.
    fn widths(self) -> &'static [usize] {
        match self {
            Variant::A => &[8, 16, 32],
            Variant::B => &[12, 24, 48],
            Variant::C => &[8, 16, 16, 24],
        }
    }

    fn tag(self) -> u8 {
        match self {
            Variant::A => b'A',
            Variant::B => b'B',
            Variant::C => b'C',
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            b'A' => Some(Variant::A),
            b'B' => Some(Variant::B),
            b'C' => Some(Variant::C),
            _ => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.tag() as char)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(Variant::A),
            "B" | "b" => Ok(Variant::B),
            "C" | "c" => Ok(Variant::C),
            other => Err(Error::InvalidArgument(format!("unknown model variant {other:?}"))),
        }
    }
}

/// An immutable embedding network.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    pub variant: Variant,
    pub seed: u64,
    pub input_size: usize,
    pub in_channels: usize,
    pub layers: Vec<Layer>,
}

/// `scale * (1 - cos(f(x), target))`.
#[derive(Debug, Clone)]
pub struct CosineLoss {
    pub target: FeatureVector,
    pub scale: f64,
}

impl CosineLoss {
    pub fn new(target: FeatureVector) -> Self {
        Self { target, scale: 1.0 }
    }
}

/// A scalar loss together with its gradient over the input pixels.
#[derive(Debug, Clone)]
pub struct InputGradient {
    pub loss: f64,
    pub similarity: f64,
    pub grad: Grid,
}

/// Builds one of the seeded reference embedders.
pub fn build_reference_model(seed: u64, variant: Variant) -> EmbeddingModel {
    build_model(seed, variant, DEFAULT_INPUT_SIZE, DEFAULT_EMBED_DIM)
}

pub fn build_model(seed: u64, variant: Variant, input_size: usize, embed_dim: usize) -> EmbeddingModel {
    let mut rng = RngStream::new(seed).fork(variant.tag() as u64);
    let mut layers = vec![Layer::Shift(-0.5)];
    let mut in_c = 3;
    for &out_c in variant.widths() {
        let fan_in = (in_c * 9) as f64;
        let std = 1.6 / fan_in.sqrt();
        let weight = if layers.len() == 1 {
            // First block sees luminance only: one kernel shared by R, G and B.
            (0..out_c)
                .flat_map(|_| {
                    let kernel: Vec<f64> = (0..9).map(|_| rng.normal(std)).collect();
                    std::iter::repeat_n(kernel, in_c).flatten()
                })
                .collect()
        } else {
            (0..out_c * in_c * 9).map(|_| rng.normal(std)).collect()
        };
        layers.push(Layer::Conv(Conv2d {
            in_c,
            out_c,
            kernel: 3,
            stride: 2,
            weight,
            bias: (0..out_c).map(|_| rng.normal(0.1)).collect(),
        }));
        layers.push(Layer::Tanh);
        in_c = out_c;
    }
    layers.push(Layer::GlobalAvgPool);
    let std = 1.0 / (in_c as f64).sqrt();
    layers.push(Layer::Linear(Linear {
        in_dim: in_c,
        out_dim: embed_dim,
        weight: (0..embed_dim * in_c).map(|_| rng.normal(std)).collect(),
        bias: (0..embed_dim).map(|_| rng.normal(0.02)).collect(),
    }));
    layers.push(Layer::L2Normalize);
    EmbeddingModel {
        variant,
        seed,
        input_size,
        in_channels: 3,
        layers,
    }
}

impl EmbeddingModel {
    pub fn embed_dim(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                Layer::Linear(lin) => Some(lin.out_dim),
                _ => None,
            })
            .unwrap_or(0)
    }

    pub fn embed(&self, img: &Image) -> Result<FeatureVector> {
        self.embed_grid(img.grid())
    }

    /// Embeds an unbounded grid; used on intermediate attack composites.
    pub fn embed_grid(&self, g: &Grid) -> Result<FeatureVector> {
        let acts = self.forward(g)?;
        Ok(FeatureVector(acts.last().unwrap().data.clone()))
    }

    /// Gradient of `loss` with respect to every input pixel of `g`.
    pub fn input_gradient(&self, g: &Grid, loss: &CosineLoss) -> Result<InputGradient> {
        if loss.target.dim() != self.embed_dim() {
            return Err(Error::Shape(format!(
                "target dim {} != model dim {}",
                loss.target.dim(),
                self.embed_dim()
            )));
        }
        let acts = self.forward(g)?;
        let out = acts.last().unwrap();
        let dot: f64 = out.data.iter().zip(loss.target.values()).map(|(a, b)| a * b).sum();
        let mut grad = Tensor::vector(loss.target.values().iter().map(|t| -loss.scale * t).collect());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            grad = layer.backward(&acts[i], &acts[i + 1], &grad);
        }
        let hwc = chw_to_grid(&grad);
        Ok(InputGradient {
            loss: loss.scale * (1.0 - dot),
            similarity: dot.clamp(-1.0, 1.0),
            grad: resize_grid_adjoint(&hwc, g.height, g.width),
        })
    }

    /// Pooled features feeding the final projection.
    pub fn features(&self, img: &Image) -> Result<Vec<f64>> {
        let head = self.head_index()?;
        let acts = self.forward_until(img.grid(), head)?;
        Ok(acts.last().unwrap().data.clone())
    }

    /// Replaces the final projection by a whitening one fitted on
    /// `calibration`: features are centered, decorrelated with a ridge of
    /// `reg` times their mean variance, then rotated by a seeded random
    /// orthonormal map to the embedding dimension.
    pub fn fit_whitening_head(&mut self, calibration: &[Image], reg: f64, seed: u64) -> Result<()> {
        let head = self.head_index()?;
        let out_dim = self.embed_dim();
        let feats = calibration
            .par_iter()
            .map(|img| self.features(img))
            .collect::<Result<Vec<_>>>()?;
        let n = feats.len();
        let d = feats.first().map_or(0, Vec::len);
        if n <= d {
            return Err(Error::InvalidArgument(format!(
                "whitening {d} features needs more than {d} calibration images, got {n}"
            )));
        }
        let data = DMatrix::from_fn(n, d, |i, k| feats[i][k]);
        let mean = data.row_mean();
        let centered = DMatrix::from_fn(n, d, |i, k| data[(i, k)] - mean[k]);
        let mut cov = centered.transpose() * &centered / (n - 1) as f64;
        let ridge = reg * cov.trace() / d as f64;
        for k in 0..d {
            cov[(k, k)] += ridge;
        }
        let chol = cov
            .cholesky()
            .ok_or_else(|| Error::InvalidArgument("feature covariance is not positive definite".into()))?;
        let whiten = chol
            .l()
            .try_inverse()
            .ok_or_else(|| Error::InvalidArgument("singular whitening factor".into()))?;
        let rotation = random_orthonormal_rows(out_dim, d, &mut RngStream::new(seed));
        let weight = rotation * whiten;
        let bias = -(&weight * mean.transpose());
        self.layers[head] = Layer::Linear(Linear {
            in_dim: d,
            out_dim,
            weight: (0..out_dim).flat_map(|o| (0..d).map(move |k| (o, k))).map(|(o, k)| weight[(o, k)]).collect(),
            bias: bias.iter().copied().collect(),
        });
        Ok(())
    }

    fn head_index(&self) -> Result<usize> {
        self.layers
            .iter()
            .rposition(|l| matches!(l, Layer::Linear(_)))
            .ok_or_else(|| Error::InvalidArgument("model has no linear head".into()))
    }

    fn forward(&self, g: &Grid) -> Result<Vec<Tensor>> {
        self.forward_until(g, self.layers.len())
    }

    /// Activations of the first `count` layers, starting with the resized input.
    fn forward_until(&self, g: &Grid, count: usize) -> Result<Vec<Tensor>> {
        if g.channels != self.in_channels {
            return Err(Error::Channels {
                expected: self.in_channels,
                actual: g.channels,
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFinite("embedder input contains NaN or Inf".into()));
        }
        let resized = resize_grid(g, self.input_size, self.input_size)?;
        let mut acts = Vec::with_capacity(count + 1);
        acts.push(grid_to_chw(&resized));
        for layer in &self.layers[..count] {
            let next = layer.forward(acts.last().unwrap());
            acts.push(next);
        }
        Ok(acts)
    }
}

/// `rows × cols` matrix with Gaussian entries whose rows are orthonormal
/// (Gram-Schmidt); rows beyond `cols` are only normalized.
fn random_orthonormal_rows(rows: usize, cols: usize, rng: &mut RngStream) -> DMatrix<f64> {
    let mut m = DMatrix::from_fn(rows, cols, |_, _| rng.normal(1.0));
    for o in 0..rows {
        if o < cols {
            for p in 0..o {
                let dot = m.row(o).dot(&m.row(p));
                let prev = m.row(p).clone_owned();
                m.row_mut(o).zip_apply(&prev, |v, q| *v -= dot * q);
            }
        }
        let norm = m.row(o).norm();
        m.row_mut(o).unscale_mut(norm);
    }
    m
}

fn grid_to_chw(g: &Grid) -> Tensor {
    let mut t = Tensor::zeros(g.channels, g.height, g.width);
    for y in 0..g.height {
        for x in 0..g.width {
            for c in 0..g.channels {
                t.data[(c * g.height + y) * g.width + x] = g.get(y, x, c);
            }
        }
    }
    t
}

fn chw_to_grid(t: &Tensor) -> Grid {
    let mut g = Grid::zeros(t.h, t.w, t.c);
    for c in 0..t.c {
        for y in 0..t.h {
            for x in 0..t.w {
                g.set(y, x, c, t.data[(c * t.h + y) * t.w + x]);
            }
        }
    }
    g
}

/// Largest elementwise relative error between an analytic gradient and a
/// numeric one. The denominator is floored at `1e-3` of the largest numeric
/// magnitude so that near-zero entries are compared on the gradient's scale.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
