//! Stochastic input transformations used during mask optimization: intensity
//! scaling copies (SIM), random resize-and-pad (DIM), Gaussian smoothing of
//! the gradient (TIM), brightness jitter and synthetic moiré fringes.
//!
//! Every random quantity is drawn from an explicit [`RngStream`], so a cloned
//! stream replays the same transforms bit for bit.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{resize_grid, resize_grid_adjoint, Grid, Image};
pub use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformConfig {
    pub dim_probability: f64,
    pub dim_min_scale: f64,
    /// Number of SIM copies `m`.
    pub sim_copies: usize,
    pub tim_kernel_size: usize,
    pub tim_sigma: f64,
    /// Brightness range; a single number `g` in a config file means `[-g, g]`.
    #[serde(alias = "gamma", deserialize_with = "symmetric_range")]
    pub gamma_range: [f64; 2],
    /// Moiré transparency θ.
    pub theta: f64,
    pub moire: MoireConfig,
}

fn symmetric_range<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<[f64; 2], D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Half(f64),
        Pair([f64; 2]),
    }
    Ok(match Raw::deserialize(d)? {
        Raw::Half(g) => [-g, g],
        Raw::Pair(p) => p,
    })
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            dim_probability: 0.5,
            dim_min_scale: 0.875,
            sim_copies: 5,
            tim_kernel_size: 7,
            tim_sigma: 1.0,
            gamma_range: [-0.3, 0.3],
            theta: 0.4,
            moire: MoireConfig::default(),
        }
    }
}

impl TransformConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("transform: {m}")));
        if !(0.0..=1.0).contains(&self.dim_probability) {
            return bad("dim_probability must lie in [0, 1]");
        }
        if !(self.dim_min_scale > 0.0 && self.dim_min_scale <= 1.0) {
            return bad("dim_min_scale must lie in (0, 1]");
        }
        if self.sim_copies == 0 {
            return bad("sim_copies must be positive");
        }
        if self.tim_kernel_size % 2 == 0 {
            return bad("tim_kernel_size must be odd");
        }
        if self.tim_sigma <= 0.0 {
            return bad("tim_sigma must be positive");
        }
        if self.gamma_range[0] > self.gamma_range[1] {
            return bad("gamma_range must be ordered");
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return bad("theta must lie in [0, 1]");
        }
        self.moire.validate()
    }
}

/// Parameter ranges of the two-grating fringe generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MoireConfig {
    /// Grating frequency in cycles per image side.
    pub frequency: [f64; 2],
    /// Grating orientation in radians.
    pub orientation: [f64; 2],
    /// Peak-to-peak amplitude, at most 1.
    pub amplitude: [f64; 2],
}

impl Default for MoireConfig {
    fn default() -> Self {
        Self {
            frequency: [6.0, 20.0],
            orientation: [0.0, PI],
            amplitude: [0.5, 1.0],
        }
    }
}

impl MoireConfig {
    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0] <= r[1];
        if !ordered(self.frequency) || !ordered(self.orientation) || !ordered(self.amplitude) {
            return Err(Error::Config("moire ranges must be ordered".into()));
        }
        if self.amplitude[0] < 0.0 || self.amplitude[1] > 1.0 {
            return Err(Error::Config("moire amplitude must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Scales every value by `2^-j`.
pub fn sim_scale(img: &Image, j: u32) -> Image {
    Image::from_grid(sim_scale_grid(img.grid(), j)).expect("scaling down keeps the range")
}

pub fn sim_scale_grid(g: &Grid, j: u32) -> Grid {
    g.scale(sim_factor(j))
}

pub fn sim_factor(j: u32) -> f64 {
    (0.5f64).powi(j as i32)
}

/// One draw of the random resize-and-pad transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DimParams {
    pub apply: bool,
    pub inner_h: usize,
    pub inner_w: usize,
    pub off_y: usize,
    pub off_x: usize,
}

impl DimParams {
    pub fn identity(h: usize, w: usize) -> Self {
        Self {
            apply: false,
            inner_h: h,
            inner_w: w,
            off_y: 0,
            off_x: 0,
        }
    }

    /// Always consumes four draws so the stream position does not depend on
    /// the outcome.
    pub fn sample(rng: &mut RngStream, h: usize, w: usize, cfg: &TransformConfig) -> Self {
        let apply = rng.bernoulli(cfg.dim_probability);
        let scale = rng.uniform(cfg.dim_min_scale, 1.0);
        let inner_h = ((h as f64 * scale).round() as usize).clamp(1, h);
        let inner_w = ((w as f64 * scale).round() as usize).clamp(1, w);
        let off_y = (rng.next_f64() * (h - inner_h + 1) as f64) as usize;
        let off_x = (rng.next_f64() * (w - inner_w + 1) as f64) as usize;
        if !apply {
            return Self::identity(h, w);
        }
        Self {
            apply,
            inner_h,
            inner_w,
            off_y: off_y.min(h - inner_h),
            off_x: off_x.min(w - inner_w),
        }
    }

    pub fn is_identity(&self, h: usize, w: usize) -> bool {
        !self.apply || (self.inner_h == h && self.inner_w == w && self.off_y == 0 && self.off_x == 0)
    }

    /// Resizes `g` to the inner size and zero-pads it back at the offset.
    pub fn apply(&self, g: &Grid) -> Grid {
        if self.is_identity(g.height, g.width) {
            return g.clone();
        }
        let inner = resize_grid(g, self.inner_h, self.inner_w).expect("inner size is positive");
        let mut out = Grid::zeros(g.height, g.width, g.channels);
        for y in 0..self.inner_h {
            let src = &inner.data[y * self.inner_w * g.channels..(y + 1) * self.inner_w * g.channels];
            let start = out.index(y + self.off_y, self.off_x, 0);
            out.data[start..start + src.len()].copy_from_slice(src);
        }
        out
    }

    /// Transpose of [`DimParams::apply`].
    pub fn adjoint(&self, grad: &Grid) -> Grid {
        if self.is_identity(grad.height, grad.width) {
            return grad.clone();
        }
        let c = grad.channels;
        let mut inner = Grid::zeros(self.inner_h, self.inner_w, c);
        for y in 0..self.inner_h {
            let start = grad.index(y + self.off_y, self.off_x, 0);
            inner.data[y * self.inner_w * c..(y + 1) * self.inner_w * c]
                .copy_from_slice(&grad.data[start..start + self.inner_w * c]);
        }
        resize_grid_adjoint(&inner, grad.height, grad.width)
    }
}

/// Diverse-input transform: with probability `dim_probability`, shrink to a
/// random scale in `[dim_min_scale, 1]` and zero-pad at a random offset.
pub fn dim_transform(img: &Image, rng: &mut RngStream, cfg: &TransformConfig) -> Image {
    let p = DimParams::sample(rng, img.height(), img.width(), cfg);
    p.apply(img.grid()).clamp_to_image()
}

/// Normalized `size × size` Gaussian kernel, row-major.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let mut k: Vec<f64> = (0..size * size)
        .map(|i| {
            let dy = (i / size) as f64 - r;
            let dx = (i % size) as f64 - r;
            (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Translation-invariant smoothing: per-channel same-size convolution with
/// the Gaussian kernel, zero padding at the borders.
pub fn tim_smooth(grad: &Grid, cfg: &TransformConfig) -> Grid {
    let size = cfg.tim_kernel_size;
    if size <= 1 {
        return grad.clone();
    }
    let kernel = gaussian_kernel(size, cfg.tim_sigma);
    let r = (size / 2) as isize;
    let (h, w, c) = (grad.height as isize, grad.width as isize, grad.channels);
    let mut out = Grid::zeros(grad.height, grad.width, c);
    for y in 0..h {
        for x in 0..w {
            for ky in -r..=r {
                let sy = y + ky;
                if sy < 0 || sy >= h {
                    continue;
                }
                for kx in -r..=r {
                    let sx = x + kx;
                    if sx < 0 || sx >= w {
                        continue;
                    }
                    let kv = kernel[((ky + r) * size as isize + kx + r) as usize];
                    let src = grad.index(sy as usize, sx as usize, 0);
                    let dst = out.index(y as usize, x as usize, 0);
                    for ch in 0..c {
                        out.data[dst + ch] += kv * grad.data[src + ch];
                    }
                }
            }
        }
    }
    out
}

/// Uniform draw from `gamma_range`.
pub fn sample_brightness(rng: &mut RngStream, cfg: &TransformConfig) -> f64 {
    rng.uniform(cfg.gamma_range[0], cfg.gamma_range[1])
}

/// Multiplies by `1 + gamma` and clamps to `[0, 1]`.
pub fn apply_brightness(img: &Image, gamma: f64) -> Image {
    img.grid().scale(1.0 + gamma).clamp_to_image()
}

/// Parameters of one grating.
#[derive(Debug, Clone, Copy)]
struct Grating {
    frequency: f64,
    orientation: f64,
    phase: f64,
}

impl Grating {
    fn sample(rng: &mut RngStream, cfg: &MoireConfig) -> Self {
        Self {
            frequency: rng.uniform(cfg.frequency[0], cfg.frequency[1]),
            orientation: rng.uniform(cfg.orientation[0], cfg.orientation[1]),
            phase: rng.uniform(0.0, 2.0 * PI),
        }
    }

    fn at(&self, y: f64, x: f64, side: f64) -> f64 {
        let u = (x * self.orientation.cos() + y * self.orientation.sin()) / side;
        (2.0 * PI * self.frequency * u + self.phase).cos()
    }
}

/// Random moiré image: per channel, two superposed sinusoidal gratings with
/// random frequency, orientation and phase, mapped into
/// `[0.5 - a/2, 0.5 + a/2]` for a random amplitude `a`. The random phases
/// place the fringe bands at random locations.
pub fn moire_generate(rng: &mut RngStream, h: usize, w: usize, cfg: &TransformConfig) -> Image {
    let m = &cfg.moire;
    let amplitude = rng.uniform(m.amplitude[0], m.amplitude[1]);
    let gratings: Vec<[Grating; 2]> = (0..3)
        .map(|_| [Grating::sample(rng, m), Grating::sample(rng, m)])
        .collect();
    let side = h.max(w) as f64;
    Image::from_fn(h, w, 3, |y, x, c| {
        let [g1, g2] = &gratings[c];
        let (yf, xf) = (y as f64, x as f64);
        0.5 + 0.25 * amplitude * (g1.at(yf, xf, side) + g2.at(yf, xf, side))
    })
}

/// `x * (1 - theta) + psi * theta`.
pub fn blend_moire(x: &Image, psi: &Image, theta: f64) -> Result<Image> {
    if !x.same_shape(psi) {
        return Err(Error::Shape(format!(
            "blend {}x{}x{} with moire {}x{}x{}",
            x.height(),
            x.width(),
            x.channels(),
            psi.height(),
            psi.width(),
            psi.channels()
        )));
    }
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::InvalidArgument(format!("theta {theta} outside [0, 1]")));
    }
    let data = x
        .data()
        .iter()
        .zip(psi.data())
        .map(|(a, p)| a * (1.0 - theta) + p * theta)
        .collect();
    Ok(Grid::from_vec(x.height(), x.width(), x.channels(), data)?.clamp_to_image())
}
