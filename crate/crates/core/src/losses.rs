//! Loss terms of the mask objective and their gradients with respect to the
//! mask pixels:
//!
//! * `Σᵢ (1 − cos(f(xᵢ′), f(y)))` over views and substitute models,
//! * a squared-difference smoothness term over 4-neighbor pairs in the mask,
//! * the patch term: mean absolute difference between consecutive entries of
//!   each patch's row-major flattened pixel vector.
//!
//! The cosine term is differentiated through the full composite pipeline:
//! gray-to-color lift, moiré blend, brightness, mask compositing, random
//! resize-and-pad and the embedder.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedder::{cosine, CosineLoss, EmbeddingModel, FeatureVector};
use crate::error::{Error, Result};
use crate::imaging::{composite_grid, g2c_adjoint, g2c_grid, BinaryMask, Grid, Image};
use crate::transforms::DimParams;

/// `1 − cos(a, b)`, in `[0, 2]`.
pub fn cos_loss(f_adv: &FeatureVector, f_target: &FeatureVector) -> Result<f64> {
    Ok(1.0 - cosine(f_adv, f_target)?)
}

/// Partition of the masked pixels into `patch_h × patch_w` blocks aligned to
/// the image origin. Each patch lists its masked pixels in row-major order;
/// patches with fewer than two masked pixels carry no differences and are
/// dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub patch_h: usize,
    pub patch_w: usize,
    height: usize,
    width: usize,
    patches: Vec<Vec<usize>>,
    pairs: usize,
}

impl PatchGrid {
    pub fn new(mask: &BinaryMask, patch_h: usize, patch_w: usize) -> Result<Self> {
        if patch_h == 0 || patch_w == 0 || patch_h * patch_w < 2 {
            return Err(Error::InvalidArgument(format!(
                "patch {patch_h}x{patch_w} must contain at least two pixels"
            )));
        }
        let (h, w) = (mask.height(), mask.width());
        let mut patches = Vec::new();
        for by in (0..h).step_by(patch_h) {
            for bx in (0..w).step_by(patch_w) {
                let mut members = Vec::new();
                for y in by..(by + patch_h).min(h) {
                    for x in bx..(bx + patch_w).min(w) {
                        if mask.at(y, x) {
                            members.push(y * w + x);
                        }
                    }
                }
                if members.len() >= 2 {
                    patches.push(members);
                }
            }
        }
        let pairs = patches.iter().map(|p| p.len() - 1).sum();
        Ok(Self {
            patch_h,
            patch_w,
            height: h,
            width: w,
            patches,
            pairs,
        })
    }

    /// Number of patches `P`.
    pub fn patch_count(&self) -> usize {
        self.patches.len()
    }

    /// Flattened pixel indices of patch `b`.
    pub fn patch(&self, b: usize) -> &[usize] {
        &self.patches[b]
    }

    fn check(&self, g: &Grid) -> Result<()> {
        if g.height == self.height && g.width == self.width {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "patch grid {}x{} vs image {}x{}",
                self.height, self.width, g.height, g.width
            )))
        }
    }
}

/// Patch loss on a single-channel image.
pub fn patch_loss(adv: &Image, grid: &PatchGrid) -> Result<f64> {
    if adv.channels() != 1 {
        return Err(Error::Channels {
            expected: 1,
            actual: adv.channels(),
        });
    }
    Ok(patch_loss_grad(adv.grid(), grid)?.0)
}

/// Patch loss averaged over channels, with its gradient. The subgradient of
/// `|0|` is taken as 0.
pub fn patch_loss_grad(adv: &Grid, grid: &PatchGrid) -> Result<(f64, Grid)> {
    grid.check(adv)?;
    let c = adv.channels;
    let mut grad = Grid::zeros(adv.height, adv.width, c);
    if grid.pairs == 0 {
        return Ok((0.0, grad));
    }
    let norm = 1.0 / (grid.pairs * c) as f64;
    let mut total = 0.0;
    for patch in &grid.patches {
        for ch in 0..c {
            for pair in patch.windows(2) {
                let (prev, cur) = (pair[0] * c + ch, pair[1] * c + ch);
                let d = adv.data[cur] - adv.data[prev];
                total += d.abs();
                let s = if d > 0.0 {
                    norm
                } else if d < 0.0 {
                    -norm
                } else {
                    0.0
                };
                grad.data[cur] += s;
                grad.data[prev] -= s;
            }
        }
    }
    Ok((total * norm, grad))
}

/// Smoothness loss on a single-channel image.
pub fn smooth_loss(adv: &Image, mask: &BinaryMask) -> Result<f64> {
    if adv.channels() != 1 {
        return Err(Error::Channels {
            expected: 1,
            actual: adv.channels(),
        });
    }
    Ok(smooth_loss_grad(adv.grid(), mask)?.0)
}

/// Mean squared difference over horizontal and vertical neighbor pairs with
/// both pixels in the mask, averaged over channels. An empty set of pairs
/// gives 0.
pub fn smooth_loss_grad(adv: &Grid, mask: &BinaryMask) -> Result<(f64, Grid)> {
    if !mask.matches(adv.height, adv.width) {
        return Err(Error::Shape(format!(
            "mask {}x{} vs image {}x{}",
            mask.height(),
            mask.width(),
            adv.height,
            adv.width
        )));
    }
    let (h, w, c) = (adv.height, adv.width, adv.channels);
    let mut pairs = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask.at(y, x) {
                continue;
            }
            if x + 1 < w && mask.at(y, x + 1) {
                pairs.push((y * w + x, y * w + x + 1));
            }
            if y + 1 < h && mask.at(y + 1, x) {
                pairs.push((y * w + x, (y + 1) * w + x));
            }
        }
    }
    let mut grad = Grid::zeros(h, w, c);
    if pairs.is_empty() {
        return Ok((0.0, grad));
    }
    let norm = 1.0 / (pairs.len() * c) as f64;
    let mut total = 0.0;
    for &(a, b) in &pairs {
        for ch in 0..c {
            let (ia, ib) = (a * c + ch, b * c + ch);
            let d = adv.data[ia] - adv.data[ib];
            total += d * d;
            grad.data[ia] += 2.0 * d * norm;
            grad.data[ib] -= 2.0 * d * norm;
        }
    }
    Ok((total * norm, grad))
}

/// Coefficients of the three loss terms. The patch term is a mean absolute
/// deviation of a few levels, so it needs a large coefficient to compete
/// with the summed cosine losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub cos: f64,
    pub smooth: f64,
    pub patch: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cos: 1.0,
            smooth: 1.0,
            patch: 300.0,
        }
    }
}

/// Fixed inputs of the objective for one attack.
pub struct LossContext<'a> {
    /// Adversary views, 3 channels each.
    pub views: &'a [Image],
    pub mask: &'a BinaryMask,
    /// Substitute models with the target embedding under each.
    pub models: Vec<(&'a EmbeddingModel, FeatureVector)>,
    /// `None` disables the patch term.
    pub patches: Option<&'a PatchGrid>,
    pub weights: LossWeights,
}

/// The random draws that shape one evaluation of the composite pipeline.
#[derive(Debug, Clone)]
pub struct PipelineDraw {
    /// Moiré image blended with transparency `theta`; `None` skips the blend.
    pub psi: Option<Image>,
    pub theta: f64,
    pub gamma: f64,
    /// One resize-and-pad draw per view.
    pub dims: Vec<DimParams>,
}

impl PipelineDraw {
    pub fn identity(views: usize, h: usize, w: usize) -> Self {
        Self {
            psi: None,
            theta: 0.0,
            gamma: 0.0,
            dims: vec![DimParams::identity(h, w); views],
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub cos_sum: f64,
    pub smooth: f64,
    pub patch: f64,
}

#[derive(Debug, Clone)]
pub struct LossEval {
    pub terms: LossTerms,
    /// Gradient of `terms.total` with respect to the mask pixels.
    pub grad: Grid,
}

/// The mask as projected light: gray masks are replicated to RGB.
pub fn lift(adv: &Grid) -> Grid {
    if adv.channels == 1 {
        g2c_grid(adv).expect("gray")
    } else {
        adv.clone()
    }
}

fn lift_adjoint(grad: &Grid, channels: usize) -> Grid {
    if channels == 1 {
        g2c_adjoint(grad)
    } else {
        grad.clone()
    }
}

/// The projected pattern after moiré blending and brightness:
/// `clamp((lift(adv) (1 − θ) + ψ θ)(1 + γ), 0, 1)`, and the pointwise
/// derivative of that map with respect to `lift(adv)`.
pub fn projected_pattern(adv: &Grid, draw: &PipelineDraw) -> (Grid, Vec<f64>) {
    let lifted = lift(adv);
    let gain = 1.0 + draw.gamma;
    let mut out = lifted.clone();
    let mut deriv = vec![0.0; lifted.data.len()];
    for (i, v) in out.data.iter_mut().enumerate() {
        let (blended, dblend) = match &draw.psi {
            Some(psi) => (
                lifted.data[i] * (1.0 - draw.theta) + psi.data()[i] * draw.theta,
                1.0 - draw.theta,
            ),
            None => (lifted.data[i], 1.0),
        };
        let b = blended * gain;
        *v = b.clamp(0.0, 1.0);
        deriv[i] = if b > 0.0 && b < 1.0 { gain * dblend } else { 0.0 };
    }
    (out, deriv)
}

/// Total loss at mask `adv` (1 or 3 channels) under the pipeline `draw`.
///
/// Per-view gradients are computed in parallel and summed in ascending view
/// order.
pub fn total_loss(ctx: &LossContext<'_>, adv: &Grid, draw: &PipelineDraw) -> Result<LossEval> {
    let (h, w) = (ctx.mask.height(), ctx.mask.width());
    if adv.height != h || adv.width != w {
        return Err(Error::Shape(format!("mask {h}x{w} vs adversarial image {}x{}", adv.height, adv.width)));
    }
    if draw.dims.len() != ctx.views.len() {
        return Err(Error::Shape(format!(
            "{} resize draws for {} views",
            draw.dims.len(),
            ctx.views.len()
        )));
    }
    if let Some(psi) = &draw.psi {
        if psi.height() != h || psi.width() != w || psi.channels() != 3 {
            return Err(Error::Shape("moire image must be 3-channel at mask size".into()));
        }
    }

    let (pattern, deriv) = projected_pattern(adv, draw);
    let per_view: Vec<Result<(f64, Grid)>> = ctx
        .views
        .par_iter()
        .zip(draw.dims.par_iter())
        .map(|(view, dim)| {
            let comp = composite_grid(view.grid(), ctx.mask, &pattern)?;
            let input = dim.apply(&comp);
            let mut loss = 0.0;
            let mut g_input = Grid::zeros(h, w, 3);
            for (model, target) in &ctx.models {
                let out = model.input_gradient(
                    &input,
                    &CosineLoss {
                        target: target.clone(),
                        scale: ctx.weights.cos,
                    },
                )?;
                loss += out.loss;
                g_input.add_assign(&out.grad);
            }
            let mut g_pattern = dim.adjoint(&g_input);
            for p in 0..h * w {
                let masked = ctx.mask.at_index(p);
                for ch in 0..3 {
                    let i = p * 3 + ch;
                    g_pattern.data[i] = if masked { g_pattern.data[i] * deriv[i] } else { 0.0 };
                }
            }
            Ok((loss, lift_adjoint(&g_pattern, adv.channels)))
        })
        .collect();

    let mut grad = Grid::zeros(h, w, adv.channels);
    let mut cos_sum = 0.0;
    for item in per_view {
        let (loss, g) = item?;
        cos_sum += loss;
        grad.add_assign(&g);
    }

    let (smooth, g_smooth) = smooth_loss_grad(adv, ctx.mask)?;
    grad.add_assign(&g_smooth.scale(ctx.weights.smooth));
    let patch = match ctx.patches {
        Some(grid) => {
            let (p, g) = patch_loss_grad(adv, grid)?;
            grad.add_assign(&g.scale(ctx.weights.patch));
            p
        }
        None => 0.0,
    };
    let total = cos_sum + ctx.weights.smooth * smooth + ctx.weights.patch * patch;
    Ok(LossEval {
        terms: LossTerms {
            total,
            cos_sum,
            smooth,
            patch,
        },
        grad,
    })
}
