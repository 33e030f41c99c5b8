//! Universal mask generation over a set of adversary views.
//!
//! Each iteration accumulates loss gradients over `m` scaled copies of the
//! mask (each with its own moiré field, brightness and per-view resize
//! draws), smooths the sum with a Gaussian kernel, updates the momentum,
//! takes a descent step and projects back into the ε-ball around every view.
//! Modes with the color step then clip the mask into the projector's
//! randomized linear response intervals.
//!
//! Draw order per iteration: for `j = 0..m`, the moiré field (color modes
//! only), γ, then one resize draw per view in view order; after the loop,
//! the three color offsets (color modes only).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::colormap::{color_project, ChannelProfile, ColorProjection};
use crate::embedder::{cosine, EmbeddingModel, FeatureVector};
use crate::error::{Error, Result};
use crate::imaging::{apply_mask, c2g, composite_grid, BinaryMask, Grid, Image, ViewSet};
use crate::losses::{lift, total_loss, LossContext, LossTerms, LossWeights, PatchGrid, PipelineDraw};
use crate::rng::RngStream;
use crate::transforms::{
    moire_generate, sample_brightness, sim_factor, sim_scale_grid, tim_smooth, DimParams, TransformConfig,
};

/// Smoothed gradients with a smaller ℓ1 norm are rounding residue of an
/// exact zero (for example at the target embedding) and give no update.
pub const ZERO_GRADIENT_L1: f64 = 1e-10;

/// Which adaptations are enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Cosine and smoothness terms only.
    Baseline,
    /// Adds the patch term.
    ResAware,
    /// Adds moiré blending and color projection.
    ColorAware,
    Full,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Baseline, Mode::ResAware, Mode::ColorAware, Mode::Full];

    pub fn uses_patch_loss(self) -> bool {
        matches!(self, Mode::ResAware | Mode::Full)
    }

    pub fn uses_color_step(self) -> bool {
        matches!(self, Mode::ColorAware | Mode::Full)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::ResAware => "res_aware",
            Mode::ColorAware => "color_aware",
            Mode::Full => "full",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown mode {s:?}")))
    }
}

/// Whether the mask is optimized as one gray channel or as RGB.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Gray,
    Color,
}

impl Scale {
    pub fn channels(self) -> usize {
        match self {
            Scale::Gray => 1,
            Scale::Color => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Scale::Gray => "gray",
            Scale::Color => "color",
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How the momentum is turned into a step direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepNorm {
    /// Divide by the mean absolute momentum over the masked values, so the
    /// average per-pixel step is α.
    MeanAbs,
    /// Elementwise sign.
    Sign,
    /// Use the momentum as is. Its ℓ1 norm is at most `1/(1 − μ)` times
    /// larger than one normalized gradient, so steps are tiny per pixel.
    L1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// Iterations `N`.
    pub n: usize,
    /// Perturbation bound in 0–255 units.
    pub epsilon: f64,
    /// Step size in 0–255 units; `1.5 ε / N` when unset.
    pub alpha: Option<f64>,
    pub mu: f64,
    pub step_norm: StepNorm,
    /// Patch height and width of the patch term.
    pub patch: [usize; 2],
    pub mode: Mode,
    pub scale: Scale,
    pub weights: LossWeights,
    pub transform: TransformConfig,
    pub profile: ChannelProfile,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            n: 50,
            epsilon: 16.0,
            alpha: None,
            mu: 1.0,
            step_norm: StepNorm::MeanAbs,
            patch: [8, 8],
            mode: Mode::Full,
            scale: Scale::Gray,
            weights: LossWeights::default(),
            transform: TransformConfig::default(),
            profile: ChannelProfile::default(),
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn epsilon_normalized(&self) -> f64 {
        self.epsilon / 255.0
    }

    pub fn alpha_normalized(&self) -> f64 {
        self.alpha.unwrap_or(1.5 * self.epsilon / self.n as f64) / 255.0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("attack: {m}")));
        if self.n == 0 {
            return bad("n must be at least 1");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if self.alpha.is_some_and(|a| !(a > 0.0)) {
            return bad("alpha must be positive");
        }
        if !(self.mu >= 0.0) {
            return bad("mu must be nonnegative");
        }
        if self.patch[0] * self.patch[1] < 2 {
            return bad("patch must contain at least two pixels");
        }
        self.transform.validate()?;
        self.profile.validate()
    }
}

#[derive(Debug, Clone)]
pub struct AttackState {
    pub t: usize,
    pub x: Image,
    pub momentum: Grid,
    pub rng: RngStream,
    pub loss_trace: Vec<LossTerms>,
}

/// Initial mask: the target (grayscaled for gray scale) with everything
/// outside the mask set to 0, and zero momentum.
pub fn initialize(target: &Image, mask: &BinaryMask, scale: Scale, seed: u64) -> Result<AttackState> {
    if !mask.matches(target.height(), target.width()) {
        return Err(Error::Shape(format!(
            "mask {}x{} vs target {}x{}",
            mask.height(),
            mask.width(),
            target.height(),
            target.width()
        )));
    }
    let base = match (scale, target.channels()) {
        (Scale::Gray, 3) => c2g(target)?,
        (Scale::Color, 1) => {
            return Err(Error::Channels {
                expected: 3,
                actual: 1,
            })
        }
        _ => target.clone(),
    };
    let x = Image::from_grid(apply_mask(base.grid(), mask))?;
    let momentum = Grid::zeros(x.height(), x.width(), x.channels());
    Ok(AttackState {
        t: 0,
        x,
        momentum,
        rng: RngStream::new(seed),
        loss_trace: Vec::new(),
    })
}

/// Per-value bounds `[max_i(x_i) − ε, min_i(x_i) + ε] ∩ [0, 1]`. Where the
/// interval is empty both bounds are its midpoint.
pub fn epsilon_bounds(views: &ViewSet, eps: f64) -> (Grid, Grid) {
    let first = views[0].grid();
    let mut lo = first.clone();
    let mut hi = first.clone();
    for v in views.iter().skip(1) {
        for (i, &p) in v.data().iter().enumerate() {
            lo.data[i] = lo.data[i].max(p);
            hi.data[i] = hi.data[i].min(p);
        }
    }
    for i in 0..lo.data.len() {
        let (a, b) = (lo.data[i] - eps, hi.data[i] + eps);
        if a > b {
            let mid = 0.5 * (a + b);
            lo.data[i] = mid.clamp(0.0, 1.0);
            hi.data[i] = lo.data[i];
        } else {
            lo.data[i] = a.clamp(0.0, 1.0);
            hi.data[i] = b.clamp(0.0, 1.0);
        }
    }
    (lo, hi)
}

/// Clips masked values into the intersection of every view's ε-interval and
/// zeroes the rest. `views` must have the candidate's channel count.
pub fn epsilon_project(candidate: &Grid, views: &ViewSet, mask: &BinaryMask, eps: f64) -> Result<Image> {
    if views.channels() != candidate.channels
        || views.height() != candidate.height
        || views.width() != candidate.width
    {
        return Err(Error::Shape("candidate and views differ in shape".into()));
    }
    let (lo, hi) = epsilon_bounds(views, eps);
    Ok(project_into(candidate, &lo, &hi, mask))
}

fn project_into(candidate: &Grid, lo: &Grid, hi: &Grid, mask: &BinaryMask) -> Image {
    let c = candidate.channels;
    let mut out = candidate.clone();
    for (i, v) in out.data.iter_mut().enumerate() {
        *v = if mask.at_index(i / c) {
            v.clamp(lo.data[i], hi.data[i])
        } else {
            0.0
        };
    }
    Image::from_grid(out).expect("projected into [0, 1]")
}

/// State after one completed iteration, passed to the observer.
pub struct IterationRecord<'a> {
    pub t: usize,
    pub terms: LossTerms,
    /// Mask after the ε-projection.
    pub projected: &'a Image,
    /// Color projection output, when the mode has the color step.
    pub color: Option<&'a ColorProjection>,
    /// Mask entering the next iteration.
    pub x: &'a Image,
    pub momentum: &'a Grid,
    pub previous_momentum: &'a Grid,
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub mask: Image,
    pub loss_trace: Vec<LossTerms>,
    /// Similarity per unmodified view under the first substitute.
    pub initial_scores: Vec<f64>,
    /// Similarity per view under the first substitute with the final mask.
    pub final_scores: Vec<f64>,
    pub config: AttackConfig,
    pub seed: u64,
}

impl AttackResult {
    pub fn initial_top(&self) -> f64 {
        top(&self.initial_scores)
    }

    pub fn final_top(&self) -> f64 {
        top(&self.final_scores)
    }

    /// Loss trace as CSV.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iteration,total,cos_sum,smooth,patch\n");
        for (i, t) in self.loss_trace.iter().enumerate() {
            out.push_str(&format!("{i},{},{},{},{}\n", t.total, t.cos_sum, t.smooth, t.patch));
        }
        out
    }
}

pub fn top(scores: &[f64]) -> f64 {
    scores.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Similarity of each view composited with `adv` to `target` under `model`.
pub fn digital_scores(
    views: &ViewSet,
    mask: &BinaryMask,
    adv: &Image,
    model: &EmbeddingModel,
    target: &FeatureVector,
) -> Result<Vec<f64>> {
    let pattern = lift(adv.grid());
    views
        .iter()
        .map(|v| cosine(&model.embed_grid(&composite_grid(v.grid(), mask, &pattern)?)?, target))
        .collect()
}

pub fn run_attack(
    views: &ViewSet,
    target: &Image,
    mask: &BinaryMask,
    models: &[EmbeddingModel],
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    run_attack_observed(views, target, mask, models, cfg, |_| {})
}

/// [`run_attack`] with a callback after every iteration.
pub fn run_attack_observed(
    views: &ViewSet,
    target: &Image,
    mask: &BinaryMask,
    models: &[EmbeddingModel],
    cfg: &AttackConfig,
    mut observer: impl FnMut(&IterationRecord<'_>),
) -> Result<AttackResult> {
    cfg.validate()?;
    if models.is_empty() {
        return Err(Error::InvalidArgument("at least one substitute model is required".into()));
    }
    if views.channels() != 3 || target.channels() != 3 {
        return Err(Error::InvalidArgument("views and target must be RGB".into()));
    }
    let (h, w) = (views.height(), views.width());
    if target.height() != h || target.width() != w || !mask.matches(h, w) {
        return Err(Error::Shape("views, target and mask must share a size".into()));
    }

    let mut state = initialize(target, mask, cfg.scale, cfg.seed)?;
    let reference = match cfg.scale {
        Scale::Gray => views.to_gray(),
        Scale::Color => views.clone(),
    };
    let eps = cfg.epsilon_normalized();
    let alpha = cfg.alpha_normalized();
    let (lo, hi) = epsilon_bounds(&reference, eps);

    let targets = models
        .iter()
        .map(|m| m.embed(target))
        .collect::<Result<Vec<_>>>()?;
    let grid = PatchGrid::new(mask, cfg.patch[0], cfg.patch[1])?;
    let ctx = LossContext {
        views: views.as_slice(),
        mask,
        models: models.iter().zip(targets.iter().cloned()).collect(),
        patches: cfg.mode.uses_patch_loss().then_some(&grid),
        weights: cfg.weights.clone(),
    };
    let tcfg = &cfg.transform;
    let color_step = cfg.mode.uses_color_step();
    let masked_values = (mask.count() * state.x.channels()).max(1) as f64;
    let initial_scores = views
        .iter()
        .map(|v| cosine(&models[0].embed(v)?, &targets[0]))
        .collect::<Result<Vec<_>>>()?;

    for t in 0..cfg.n {
        let mut acc = Grid::zeros(h, w, state.x.channels());
        let mut terms = LossTerms::default();
        for j in 0..tcfg.sim_copies as u32 {
            let scaled = sim_scale_grid(state.x.grid(), j);
            let psi = color_step.then(|| moire_generate(&mut state.rng, h, w, tcfg));
            let gamma = sample_brightness(&mut state.rng, tcfg);
            let dims = (0..views.len())
                .map(|_| DimParams::sample(&mut state.rng, h, w, tcfg))
                .collect();
            let draw = PipelineDraw {
                psi,
                theta: if color_step { tcfg.theta } else { 0.0 },
                gamma,
                dims,
            };
            let eval = total_loss(&ctx, &scaled, &draw)?;
            if !eval.terms.total.is_finite() || !eval.grad.is_finite() {
                return Err(Error::Diverged {
                    iteration: t,
                    detail: format!(
                        "copy {j}: loss {:?}, gamma {gamma}, mask range [{}, {}], momentum l1 {}",
                        eval.terms,
                        state.x.data().iter().copied().fold(f64::INFINITY, f64::min),
                        state.x.data().iter().copied().fold(f64::NEG_INFINITY, f64::max),
                        state.momentum.l1_norm()
                    ),
                });
            }
            acc.add_assign(&eval.grad.scale(sim_factor(j)));
            if j == 0 {
                terms = eval.terms;
            }
        }

        let smoothed = tim_smooth(&acc, tcfg);
        let l1 = smoothed.l1_norm();
        let normalized = if l1 > ZERO_GRADIENT_L1 {
            smoothed.scale(1.0 / l1)
        } else {
            Grid::zeros(h, w, smoothed.channels)
        };
        let previous = state.momentum.clone();
        let mut momentum = previous.scale(cfg.mu);
        momentum.add_assign(&normalized);

        let direction = step_direction(&momentum, mask, cfg.step_norm, masked_values);
        let mut candidate = state.x.grid().clone();
        for (v, d) in candidate.data.iter_mut().zip(&direction.data) {
            *v -= alpha * d;
        }
        let projected = project_into(&candidate, &lo, &hi, mask);
        let color = color_step.then(|| color_project(&projected, &cfg.profile, &mut state.rng));
        let next = match &color {
            Some(cp) => Image::from_grid(apply_mask(cp.image.grid(), mask))?,
            None => projected.clone(),
        };

        state.loss_trace.push(terms);
        state.momentum = momentum;
        state.x = next;
        state.t = t + 1;
        observer(&IterationRecord {
            t,
            terms,
            projected: &projected,
            color: color.as_ref(),
            x: &state.x,
            momentum: &state.momentum,
            previous_momentum: &previous,
        });
    }

    let final_scores = digital_scores(views, mask, &state.x, &models[0], &targets[0])?;
    Ok(AttackResult {
        mask: state.x,
        loss_trace: state.loss_trace,
        initial_scores,
        final_scores,
        config: cfg.clone(),
        seed: cfg.seed,
    })
}

fn step_direction(momentum: &Grid, mask: &BinaryMask, norm: StepNorm, masked_values: f64) -> Grid {
    let c = momentum.channels;
    let inside = |i: usize| mask.at_index(i / c);
    match norm {
        StepNorm::L1 => momentum.clone(),
        StepNorm::Sign => momentum.map(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 }),
        StepNorm::MeanAbs => {
            let mean = momentum
                .data
                .iter()
                .enumerate()
                .filter(|&(i, _)| inside(i))
                .map(|(_, v)| v.abs())
                .sum::<f64>()
                / masked_values;
            if mean > 0.0 {
                momentum.scale(1.0 / mean)
            } else {
                Grid::zeros(momentum.height, momentum.width, c)
            }
        }
    }
}
