//! Image containers and the pixel-level operations shared by every stage of
//! the attack: grayscale conversion, mask compositing and bilinear resizing.
//!
//! Intensities are stored as `f64` in `[0, 1]`, row-major with interleaved
//! channels (`data[(y * width + x) * channels + c]`).

mod io;

pub use io::{load_image, load_mask, save_image, save_mask};

use crate::error::{Error, Result};

/// Luma weights used by [`c2g`] and by the grayscale reconversion in the
/// color projection step.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// An unbounded real-valued grid with the same layout as [`Image`].
///
/// Used for gradients and for intermediate values that may leave `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "data length {} != {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn scale(&self, s: f64) -> Grid {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Grid) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn l1_norm(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Clamps every value into `[0, 1]` and wraps the result as an [`Image`].
    pub fn clamp_to_image(&self) -> Image {
        Image(self.map(|v| v.clamp(0.0, 1.0)))
    }
}

/// An intensity image with every value in `[0, 1]` and 1 or 3 channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image(Grid);

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_grid(Grid::from_vec(height, width, channels, data)?)
    }

    pub fn from_grid(grid: Grid) -> Result<Self> {
        if grid.channels != 1 && grid.channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "images have 1 or 3 channels, got {}",
                grid.channels
            )));
        }
        if let Some(v) = grid.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "intensity {v} outside [0, 1]"
            )));
        }
        Ok(Image(grid))
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!(channels == 1 || channels == 3);
        Image(Grid {
            height,
            width,
            channels,
            data: vec![value.clamp(0.0, 1.0); height * width * channels],
        })
    }

    /// Builds an image from a per-pixel function; values are clamped to `[0, 1]`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        f: impl Fn(usize, usize, usize) -> f64,
    ) -> Self {
        assert!(channels == 1 || channels == 3);
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c).clamp(0.0, 1.0));
                }
            }
        }
        Image(Grid {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn channels(&self) -> usize {
        self.0.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.0.get(y, x, c)
    }

    pub fn grid(&self) -> &Grid {
        &self.0
    }

    pub fn into_grid(self) -> Grid {
        self.0
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.0.same_shape(&other.0)
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.0
            .data
            .iter()
            .zip(&other.0.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Binary region mask. Values are exactly 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask length {} != {height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    /// Thresholds a single-channel image at 0.5.
    pub fn from_image(img: &Image) -> Result<Self> {
        if img.channels() != 1 {
            return Err(Error::Channels {
                expected: 1,
                actual: img.channels(),
            });
        }
        Ok(Self {
            height: img.height(),
            width: img.width(),
            data: img.data().iter().map(|&v| v >= 0.5).collect(),
        })
    }

    pub fn to_image(&self) -> Image {
        Image::from_fn(self.height, self.width, 1, |y, x, _| {
            if self.at(y, x) {
                1.0
            } else {
                0.0
            }
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn at_index(&self, pixel: usize) -> bool {
        self.data[pixel]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }

    pub fn matches(&self, height: usize, width: usize) -> bool {
        self.height == height && self.width == width
    }

    fn check(&self, height: usize, width: usize) -> Result<()> {
        if self.matches(height, width) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "mask {}x{} does not match image {height}x{width}",
                self.height, self.width
            )))
        }
    }
}

/// The k aligned captures of one adversary. All views share dimensions and
/// channel count.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    views: Vec<Image>,
}

impl ViewSet {
    pub fn new(views: Vec<Image>) -> Result<Self> {
        let first = views
            .first()
            .ok_or_else(|| Error::InvalidArgument("a view set needs at least one view".into()))?;
        if let Some(bad) = views.iter().find(|v| !v.same_shape(first)) {
            return Err(Error::Shape(format!(
                "view {}x{}x{} differs from {}x{}x{}",
                bad.height(),
                bad.width(),
                bad.channels(),
                first.height(),
                first.width(),
                first.channels()
            )));
        }
        Ok(Self { views })
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Image> {
        self.views.iter()
    }

    pub fn as_slice(&self) -> &[Image] {
        &self.views
    }

    pub fn height(&self) -> usize {
        self.views[0].height()
    }

    pub fn width(&self) -> usize {
        self.views[0].width()
    }

    pub fn channels(&self) -> usize {
        self.views[0].channels()
    }

    /// Grayscale copies of every view (single-channel views pass through).
    pub fn to_gray(&self) -> ViewSet {
        ViewSet {
            views: self
                .views
                .iter()
                .map(|v| if v.channels() == 1 { v.clone() } else { c2g(v).unwrap() })
                .collect(),
        }
    }
}

impl std::ops::Index<usize> for ViewSet {
    type Output = Image;

    fn index(&self, i: usize) -> &Image {
        &self.views[i]
    }
}

/// Color to gray with the [`LUMA`] weights.
pub fn c2g(img: &Image) -> Result<Image> {
    // the weights sum to one only up to rounding
    Ok(c2g_grid(img.grid())?.clamp_to_image())
}

pub fn c2g_grid(g: &Grid) -> Result<Grid> {
    if g.channels != 3 {
        return Err(Error::Channels {
            expected: 3,
            actual: g.channels,
        });
    }
    let data = g
        .data
        .chunks_exact(3)
        .map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2])
        .collect();
    Ok(Grid {
        height: g.height,
        width: g.width,
        channels: 1,
        data,
    })
}

/// Gray to color by channel replication.
pub fn g2c(img: &Image) -> Result<Image> {
    Ok(Image(g2c_grid(img.grid())?))
}

pub fn g2c_grid(g: &Grid) -> Result<Grid> {
    if g.channels != 1 {
        return Err(Error::Channels {
            expected: 1,
            actual: g.channels,
        });
    }
    let data = g.data.iter().flat_map(|&v| [v, v, v]).collect();
    Ok(Grid {
        height: g.height,
        width: g.width,
        channels: 3,
        data,
    })
}

/// Adjoint of [`g2c_grid`]: sums the three channels of a gradient.
pub fn g2c_adjoint(g: &Grid) -> Grid {
    debug_assert_eq!(g.channels, 3);
    Grid {
        height: g.height,
        width: g.width,
        channels: 1,
        data: g.data.chunks_exact(3).map(|p| p[0] + p[1] + p[2]).collect(),
    }
}

/// `base ⊙ (1 − M) + adv ⊙ M`.
pub fn composite(base: &Image, mask: &BinaryMask, adv: &Image) -> Result<Image> {
    Ok(Image(composite_grid(base.grid(), mask, adv.grid())?))
}

pub fn composite_grid(base: &Grid, mask: &BinaryMask, adv: &Grid) -> Result<Grid> {
    mask.check(base.height, base.width)?;
    if !base.same_shape(adv) {
        return Err(Error::Shape(format!(
            "composite base {}x{}x{} vs adv {}x{}x{}",
            base.height, base.width, base.channels, adv.height, adv.width, adv.channels
        )));
    }
    let c = base.channels;
    let mut out = base.clone();
    for p in 0..base.height * base.width {
        if mask.at_index(p) {
            out.data[p * c..(p + 1) * c].copy_from_slice(&adv.data[p * c..(p + 1) * c]);
        }
    }
    Ok(out)
}

/// Zeroes every pixel outside the mask.
pub fn apply_mask(g: &Grid, mask: &BinaryMask) -> Grid {
    debug_assert!(mask.matches(g.height, g.width));
    let c = g.channels;
    let mut out = g.clone();
    for p in 0..g.height * g.width {
        if !mask.at_index(p) {
            out.data[p * c..(p + 1) * c].fill(0.0);
        }
    }
    out
}

/// One axis of a corner-aligned bilinear resampling: output index `i`
/// reads `(1 - w) * src[lo] + w * src[hi]`.
#[derive(Debug, Clone)]
struct Taps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    w: Vec<f64>,
}

impl Taps {
    fn new(n_in: usize, n_out: usize) -> Self {
        let mut lo = Vec::with_capacity(n_out);
        let mut hi = Vec::with_capacity(n_out);
        let mut w = Vec::with_capacity(n_out);
        for i in 0..n_out {
            let src = if n_out == 1 || n_in == 1 {
                0.0
            } else if n_in == n_out {
                i as f64
            } else {
                i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
            };
            let l = (src.floor() as usize).min(n_in - 1);
            let h = (l + 1).min(n_in - 1);
            lo.push(l);
            hi.push(h);
            w.push(if h == l { 0.0 } else { src - l as f64 });
        }
        Self { lo, hi, w }
    }
}

/// Bilinear resize with corner-aligned sampling.
pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    let g = resize_grid(img.grid(), out_h, out_w)?;
    // convex weights keep the range; clamp absorbs rounding only
    Ok(g.clamp_to_image())
}

pub fn resize_grid(g: &Grid, out_h: usize, out_w: usize) -> Result<Grid> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "resize target {out_h}x{out_w} has a zero dimension"
        )));
    }
    if g.height == out_h && g.width == out_w {
        return Ok(g.clone());
    }
    let ty = Taps::new(g.height, out_h);
    let tx = Taps::new(g.width, out_w);
    let c = g.channels;
    let mut out = Grid::zeros(out_h, out_w, c);
    for oy in 0..out_h {
        let (y0, y1, wy) = (ty.lo[oy], ty.hi[oy], ty.w[oy]);
        for ox in 0..out_w {
            let (x0, x1, wx) = (tx.lo[ox], tx.hi[ox], tx.w[ox]);
            for ch in 0..c {
                let top = (1.0 - wx) * g.get(y0, x0, ch) + wx * g.get(y0, x1, ch);
                let bot = (1.0 - wx) * g.get(y1, x0, ch) + wx * g.get(y1, x1, ch);
                out.set(oy, ox, ch, (1.0 - wy) * top + wy * bot);
            }
        }
    }
    Ok(out)
}

/// Adjoint (transpose) of [`resize_grid`] from `in_h × in_w`: scatters an
/// output-space gradient back onto the source grid.
pub fn resize_grid_adjoint(grad_out: &Grid, in_h: usize, in_w: usize) -> Grid {
    if grad_out.height == in_h && grad_out.width == in_w {
        return grad_out.clone();
    }
    let ty = Taps::new(in_h, grad_out.height);
    let tx = Taps::new(in_w, grad_out.width);
    let c = grad_out.channels;
    let mut g = Grid::zeros(in_h, in_w, c);
    for oy in 0..grad_out.height {
        let (y0, y1, wy) = (ty.lo[oy], ty.hi[oy], ty.w[oy]);
        for ox in 0..grad_out.width {
            let (x0, x1, wx) = (tx.lo[ox], tx.hi[ox], tx.w[ox]);
            for ch in 0..c {
                let d = grad_out.get(oy, ox, ch);
                let i00 = g.index(y0, x0, ch);
                let i01 = g.index(y0, x1, ch);
                let i10 = g.index(y1, x0, ch);
                let i11 = g.index(y1, x1, ch);
                g.data[i00] += (1.0 - wy) * (1.0 - wx) * d;
                g.data[i01] += (1.0 - wy) * wx * d;
                g.data[i10] += wy * (1.0 - wx) * d;
                g.data[i11] += wy * wx * d;
            }
        }
    }
    g
}
