//! Software projector-camera channel. A captured projection goes through
//! five stages, applied only to pixels inside the projected region:
//!
//! 1. `r × r` block averaging with nearest-neighbor upsampling (the projector
//!    has fewer pixels than the input signal),
//! 2. per-channel response saturation outside the linear interval,
//! 3. an additive moiré fringe field,
//! 4. a global brightness gain,
//! 5. Gaussian capture noise, then a clamp to `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::colormap::ChannelProfile;
use crate::embedder::{cosine, EmbeddingModel, FeatureVector};
use crate::error::{Error, Result};
use crate::imaging::{composite_grid, BinaryMask, Grid, Image};
use crate::losses::lift;
use crate::rng::RngStream;
use crate::transforms::{moire_generate, MoireConfig, TransformConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelSimConfig {
    /// Input pixels per projector pixel along each axis.
    pub resolution_ratio: usize,
    pub profile: ChannelProfile,
    /// Slope of the response outside the linear interval; 0 is a hard clamp.
    pub saturation_slope: f64,
    pub moire_strength: f64,
    pub moire: MoireConfig,
    pub capture_noise_sigma: f64,
    pub brightness_jitter: [f64; 2],
    pub seed: u64,
}

impl Default for ChannelSimConfig {
    fn default() -> Self {
        Self {
            resolution_ratio: 8,
            profile: ChannelProfile::default(),
            saturation_slope: 0.1,
            moire_strength: 0.08,
            moire: MoireConfig::default(),
            capture_noise_sigma: 0.01,
            brightness_jitter: [-0.05, 0.05],
            seed: 0,
        }
    }
}

impl ChannelSimConfig {
    /// Every stage degenerate: the channel returns its input unchanged.
    pub fn identity() -> Self {
        Self {
            resolution_ratio: 1,
            profile: ChannelProfile::identity(),
            saturation_slope: 1.0,
            moire_strength: 0.0,
            moire: MoireConfig::default(),
            capture_noise_sigma: 0.0,
            brightness_jitter: [0.0, 0.0],
            seed: 0,
        }
    }

    /// Only the block-averaging stage, at ratio `r`.
    pub fn pooling_only(r: usize) -> Self {
        Self {
            resolution_ratio: r,
            ..Self::identity()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("channel: {m}")));
        if self.resolution_ratio == 0 {
            return bad("resolution_ratio must be at least 1");
        }
        if self.saturation_slope < 0.0 || self.moire_strength < 0.0 || self.capture_noise_sigma < 0.0 {
            return bad("slope, moire_strength and capture_noise_sigma must be nonnegative");
        }
        if self.brightness_jitter[0] > self.brightness_jitter[1] || self.brightness_jitter[0] <= -1.0 {
            return bad("brightness_jitter must be ordered and above -1");
        }
        self.profile.validate()?;
        self.moire.validate()
    }
}

fn in_region(mask: Option<&BinaryMask>, p: usize) -> bool {
    mask.is_none_or(|m| m.at_index(p))
}

/// Block-averages region pixels within each `r × r` tile (tiles anchored at
/// the origin, edge tiles truncated) and writes the mean back to them.
/// Constant tiles are returned bit-for-bit.
pub fn pool_region(g: &Grid, mask: Option<&BinaryMask>, r: usize) -> Grid {
    let mut out = g.clone();
    if r <= 1 {
        return out;
    }
    let (h, w, c) = (g.height, g.width, g.channels);
    for by in (0..h).step_by(r) {
        for bx in (0..w).step_by(r) {
            let pixels: Vec<usize> = (by..(by + r).min(h))
                .flat_map(|y| (bx..(bx + r).min(w)).map(move |x| y * w + x))
                .filter(|&p| in_region(mask, p))
                .collect();
            if pixels.is_empty() {
                continue;
            }
            for ch in 0..c {
                let first = g.data[pixels[0] * c + ch];
                if pixels.iter().all(|&p| g.data[p * c + ch] == first) {
                    continue;
                }
                let mean = pixels.iter().map(|&p| g.data[p * c + ch]).sum::<f64>() / pixels.len() as f64;
                for &p in &pixels {
                    out.data[p * c + ch] = mean;
                }
            }
        }
    }
    out
}

/// Simulates projecting `composite` and capturing it. With a mask, only the
/// masked pixels are affected; without one, the whole image is.
///
/// Draw order: moiré field (if `moire_strength > 0`), brightness gain, then
/// one normal draw per affected value (if `capture_noise_sigma > 0`).
pub fn project_capture(
    composite: &Image,
    mask: Option<&BinaryMask>,
    cfg: &ChannelSimConfig,
    rng: &mut RngStream,
) -> Result<Image> {
    if composite.channels() != 3 {
        return Err(Error::Channels {
            expected: 3,
            actual: composite.channels(),
        });
    }
    let (h, w) = (composite.height(), composite.width());
    if let Some(m) = mask {
        if !m.matches(h, w) {
            return Err(Error::Shape(format!("mask {}x{} vs image {h}x{w}", m.height(), m.width())));
        }
    }
    let mut g = pool_region(composite.grid(), mask, cfg.resolution_ratio);

    let bounds = cfg.profile.normalized();
    let psi = (cfg.moire_strength > 0.0).then(|| {
        let tcfg = TransformConfig {
            moire: cfg.moire.clone(),
            ..TransformConfig::default()
        };
        moire_generate(rng, h, w, &tcfg)
    });
    let gain = 1.0 + rng.uniform(cfg.brightness_jitter[0], cfg.brightness_jitter[1]);

    for p in 0..h * w {
        if !in_region(mask, p) {
            continue;
        }
        for ch in 0..3 {
            let i = p * 3 + ch;
            let v = g.data[i];
            let [lo, hi] = bounds[ch];
            let clipped = v.clamp(lo, hi);
            let mut v = clipped + cfg.saturation_slope * (v - clipped);
            if let Some(psi) = &psi {
                v += (psi.data()[i] - 0.5) * 2.0 * cfg.moire_strength;
            }
            v *= gain;
            if cfg.capture_noise_sigma > 0.0 {
                v += rng.normal(cfg.capture_noise_sigma);
            }
            g.data[i] = v.clamp(0.0, 1.0);
        }
    }
    Ok(Image::from_grid(g).expect("clamped"))
}

/// Top cosine similarity to `target` over `n_capture` simulated captures of
/// `adv` (1 or 3 channels) composited onto `view`.
#[allow(clippy::too_many_arguments)]
pub fn physical_score(
    adv: &Image,
    view: &Image,
    mask: &BinaryMask,
    target: &FeatureVector,
    model: &EmbeddingModel,
    cfg: &ChannelSimConfig,
    n_capture: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    if n_capture == 0 {
        return Err(Error::InvalidArgument("n_capture must be positive".into()));
    }
    let comp = Image::from_grid(composite_grid(view.grid(), mask, &lift(adv.grid()))?)?;
    let mut best = f64::NEG_INFINITY;
    for _ in 0..n_capture {
        let captured = project_capture(&comp, Some(mask), cfg, rng)?;
        best = best.max(cosine(&model.embed(&captured)?, target)?);
    }
    Ok(best)
}

/// Cosine similarity of the noiseless digital composite.
pub fn digital_score(
    adv: &Image,
    view: &Image,
    mask: &BinaryMask,
    target: &FeatureVector,
    model: &EmbeddingModel,
) -> Result<f64> {
    let comp = Image::from_grid(composite_grid(view.grid(), mask, &lift(adv.grid()))?)?;
    cosine(&model.embed(&comp)?, target)
}
