//! Projector radiometric response handling: the per-channel linear interval
//! profile, its coarse estimation from calibration captures, and the
//! randomized interval clipping applied to the mask after each step.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{c2g_grid, g2c_grid, Grid, Image};
use crate::rng::RngStream;

pub const CHANNEL_NAMES: [&str; 3] = ["r", "g", "b"];

/// Linear response intervals per RGB channel and the dynamic half-width τ,
/// all in 0–255 units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelProfile {
    #[serde(deserialize_with = "interval")]
    pub r: [f64; 2],
    #[serde(deserialize_with = "interval")]
    pub g: [f64; 2],
    #[serde(deserialize_with = "interval")]
    pub b: [f64; 2],
    pub tau: f64,
}

/// Accepts `[lo, hi]` or the string `"lo,hi"`.
fn interval<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<[f64; 2], D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Pair([f64; 2]),
        Text(String),
    }
    match Raw::deserialize(d)? {
        Raw::Pair(p) => Ok(p),
        Raw::Text(t) => {
            let parts: Vec<&str> = t.split(',').map(str::trim).collect();
            match parts.as_slice() {
                [lo, hi] => match (lo.parse(), hi.parse()) {
                    (Ok(lo), Ok(hi)) => Ok([lo, hi]),
                    _ => Err(serde::de::Error::custom(format!("bad interval {t:?}"))),
                },
                _ => Err(serde::de::Error::custom(format!("interval {t:?} must read \"lo,hi\""))),
            }
        }
    }
}

impl Default for ChannelProfile {
    fn default() -> Self {
        Self {
            r: [63.0, 242.0],
            g: [25.0, 216.0],
            b: [25.0, 204.0],
            tau: 5.0,
        }
    }
}

impl ChannelProfile {
    /// The full range `[0, 255]` on every channel with τ = 0.
    pub fn identity() -> Self {
        Self {
            r: [0.0, 255.0],
            g: [0.0, 255.0],
            b: [0.0, 255.0],
            tau: 0.0,
        }
    }

    pub fn intervals(&self) -> [[f64; 2]; 3] {
        [self.r, self.g, self.b]
    }

    /// Intervals divided by 255.
    pub fn normalized(&self) -> [[f64; 2]; 3] {
        self.intervals().map(|[lo, hi]| [lo / 255.0, hi / 255.0])
    }

    pub fn tau_normalized(&self) -> f64 {
        self.tau / 255.0
    }

    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in CHANNEL_NAMES.iter().zip(self.intervals()) {
            if !(0.0 <= lo && lo < hi && hi <= 255.0) {
                return Err(Error::Config(format!(
                    "channel {name}: interval [{lo}, {hi}] must satisfy 0 <= low < high <= 255"
                )));
            }
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau {} must be nonnegative", self.tau)));
        }
        Ok(())
    }

    /// `key=value` lines: r_low, r_high, g_low, g_high, b_low, b_high, tau.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (name, [lo, hi]) in CHANNEL_NAMES.iter().zip(self.intervals()) {
            let _ = writeln!(s, "{name}_low={lo}");
            let _ = writeln!(s, "{name}_high={hi}");
        }
        let _ = writeln!(s, "tau={}", self.tau);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("profile line {}: expected key=value", n + 1)))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("profile line {}: bad number {v:?}", n + 1)))?;
            values.insert(k.trim().to_string(), v);
        }
        let get = |k: &str| {
            values
                .get(k)
                .copied()
                .ok_or_else(|| Error::Config(format!("profile is missing {k}")))
        };
        let p = Self {
            r: [get("r_low")?, get("r_high")?],
            g: [get("g_low")?, get("g_high")?],
            b: [get("b_low")?, get("b_high")?],
            tau: get("tau")?,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Result of one color projection step.
#[derive(Debug, Clone)]
pub struct ColorProjection {
    /// Projected image with the input's channel count.
    pub image: Image,
    /// The clipped RGB values before grayscale reconversion.
    pub rgb: Grid,
    /// Per-channel offsets `v` in normalized units.
    pub offsets: [f64; 3],
    /// Per-channel clip bounds `[c_L - v, c_H + v]`, normalized.
    pub bounds: [[f64; 2]; 3],
}

/// Draws `v_c ~ U[-τ, τ]` for R, G, B (in that order) and clips channel `c`
/// to `[c_L - v_c, c_H + v_c]`. Gray inputs are expanded with `g2c` first and
/// reconverted with `c2g` afterwards; color inputs are clipped in place.
pub fn color_project(adv: &Image, profile: &ChannelProfile, rng: &mut RngStream) -> ColorProjection {
    let tau = profile.tau_normalized();
    let offsets = [0, 1, 2].map(|_| rng.uniform(-tau, tau));
    let norm = profile.normalized();
    let bounds = [0, 1, 2].map(|c| {
        [
            (norm[c][0] - offsets[c]).clamp(0.0, 1.0),
            (norm[c][1] + offsets[c]).clamp(0.0, 1.0),
        ]
    });
    let rgb_in = if adv.channels() == 1 {
        g2c_grid(adv.grid()).expect("gray input")
    } else {
        adv.grid().clone()
    };
    let mut rgb = rgb_in;
    for px in rgb.data.chunks_exact_mut(3) {
        for c in 0..3 {
            px[c] = px[c].clamp(bounds[c][0], bounds[c][1]);
        }
    }
    let image = if adv.channels() == 1 {
        c2g_grid(&rgb).expect("rgb").clamp_to_image()
    } else {
        rgb.clamp_to_image()
    };
    ColorProjection {
        image,
        rgb,
        offsets,
        bounds,
    }
}

/// One calibration measurement: projector input level and captured level,
/// both on the 0–255 scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResponseSample {
    pub input_level: f64,
    pub measured_level: f64,
}

/// Settings of the linear-interval search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntervalFit {
    /// Largest allowed absolute residual (0–255 units) of the robust line fit.
    pub tolerance: f64,
    /// Slopes below this are treated as saturation.
    pub min_slope: f64,
    /// Fewest distinct input levels an interval may span.
    pub min_levels: usize,
}

impl Default for IntervalFit {
    fn default() -> Self {
        Self {
            tolerance: 4.0,
            min_slope: 0.25,
            min_levels: 8,
        }
    }
}

/// Finds the widest contiguous input range on which the per-level medians
/// follow a line within `fit.tolerance`.
///
/// The search starts from the full range, fits a least-absolute-deviation
/// line, and drops whichever endpoint has the larger residual until the fit
/// is within tolerance. Ranges whose slope falls below `fit.min_slope` are
/// saturated and rejected.
pub fn estimate_linear_interval(samples: &[ResponseSample], fit: &IntervalFit) -> Result<[f64; 2]> {
    let (levels, medians) = level_medians(samples);
    if levels.len() < 16 {
        return Err(Error::Calibration(format!(
            "need at least 16 distinct input levels, got {}",
            levels.len()
        )));
    }
    let (mut lo, mut hi) = (0, levels.len() - 1);
    loop {
        if hi + 1 - lo < fit.min_levels.max(2) {
            return Err(Error::Calibration(
                "no linear segment within tolerance".into(),
            ));
        }
        let (a, b) = lad_line(&levels[lo..=hi], &medians[lo..=hi]);
        let resid = |i: usize| (medians[i] - (a + b * levels[i])).abs();
        let worst = (lo..=hi).map(resid).fold(0.0, f64::max);
        if worst <= fit.tolerance {
            if b < fit.min_slope {
                return Err(Error::Calibration(format!(
                    "response is saturated (slope {b:.3} below {})",
                    fit.min_slope
                )));
            }
            return Ok([levels[lo], levels[hi]]);
        }
        if resid(lo) >= resid(hi) {
            lo += 1;
        } else {
            hi -= 1;
        }
    }
}

fn level_medians(samples: &[ResponseSample]) -> (Vec<f64>, Vec<f64>) {
    let mut groups: BTreeMap<u64, (f64, Vec<f64>)> = BTreeMap::new();
    for s in samples {
        // order-preserving key for nonnegative levels
        groups
            .entry(s.input_level.to_bits())
            .or_insert_with(|| (s.input_level, Vec::new()))
            .1
            .push(s.measured_level);
    }
    let mut pairs: Vec<(f64, f64)> = groups
        .into_values()
        .map(|(level, mut vs)| {
            vs.sort_by(f64::total_cmp);
            let n = vs.len();
            let med = if n % 2 == 1 {
                vs[n / 2]
            } else {
                0.5 * (vs[n / 2 - 1] + vs[n / 2])
            };
            (level, med)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Least-absolute-deviation line `y ≈ a + b x` by iteratively reweighted
/// least squares.
fn lad_line(x: &[f64], y: &[f64]) -> (f64, f64) {
    let mut w = vec![1.0; x.len()];
    let (mut a, mut b) = (0.0, 0.0);
    for _ in 0..60 {
        let sw: f64 = w.iter().sum();
        let mx = w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() / sw;
        let my = w.iter().zip(y).map(|(w, y)| w * y).sum::<f64>() / sw;
        let sxx: f64 = w.iter().zip(x).map(|(w, x)| w * (x - mx) * (x - mx)).sum();
        let sxy: f64 = w
            .iter()
            .zip(x.iter().zip(y))
            .map(|(w, (x, y))| w * (x - mx) * (y - my))
            .sum();
        let nb = if sxx > 0.0 { sxy / sxx } else { 0.0 };
        let na = my - nb * mx;
        let converged = (na - a).abs() < 1e-10 && (nb - b).abs() < 1e-12;
        a = na;
        b = nb;
        if converged {
            break;
        }
        for ((wi, xi), yi) in w.iter_mut().zip(x).zip(y) {
            *wi = 1.0 / (yi - a - b * xi).abs().max(1e-6);
        }
    }
    (a, b)
}

/// Calibration measurements for all three channels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CalibrationSamples {
    pub channels: [Vec<ResponseSample>; 3],
}

impl CalibrationSamples {
    /// Parses `channel,input_level,measured_level` rows; channel is one of
    /// `r`, `g`, `b` (case-insensitive). A header row is optional.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut out = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if n == 0 && cols.first().is_some_and(|c| c.eq_ignore_ascii_case("channel")) {
                continue;
            }
            let bad = || Error::Calibration(format!("row {}: expected channel,input_level,measured_level", n + 1));
            if cols.len() != 3 {
                return Err(bad());
            }
            let ch = CHANNEL_NAMES
                .iter()
                .position(|c| c.eq_ignore_ascii_case(cols[0]))
                .ok_or_else(bad)?;
            let input_level: f64 = cols[1].parse().map_err(|_| bad())?;
            let measured_level: f64 = cols[2].parse().map_err(|_| bad())?;
            if !(0.0..=255.0).contains(&input_level) || !(0.0..=255.0).contains(&measured_level) {
                return Err(Error::Calibration(format!("row {}: levels must lie in [0, 255]", n + 1)));
            }
            out.channels[ch].push(ResponseSample {
                input_level,
                measured_level,
            });
        }
        Ok(out)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("channel,input_level,measured_level\n");
        for (name, samples) in CHANNEL_NAMES.iter().zip(&self.channels) {
            for smp in samples {
                let _ = writeln!(s, "{name},{},{}", smp.input_level, smp.measured_level);
            }
        }
        s
    }

    /// Fits all three channels and attaches `tau`.
    pub fn estimate_profile(&self, tau: f64, fit: &IntervalFit) -> Result<ChannelProfile> {
        let mut iv = [[0.0; 2]; 3];
        for (c, samples) in self.channels.iter().enumerate() {
            iv[c] = estimate_linear_interval(samples, fit)
                .map_err(|e| Error::Calibration(format!("channel {}: {e}", CHANNEL_NAMES[c])))?;
        }
        let p = ChannelProfile {
            r: iv[0],
            g: iv[1],
            b: iv[2],
            tau,
        };
        p.validate()?;
        Ok(p)
    }
}

/// Synthetic saturating response: flat at `floor` below `knees[0]`, linear
/// up to `ceil` at `knees[1]`, flat above, with uniform noise of half-width
/// `noise`, `repeats` measurements per integer input level.
pub fn synthetic_response(
    knees: [f64; 2],
    floor: f64,
    ceil: f64,
    noise: f64,
    repeats: usize,
    rng: &mut RngStream,
) -> Vec<ResponseSample> {
    let slope = (ceil - floor) / (knees[1] - knees[0]);
    let mut out = Vec::with_capacity(256 * repeats);
    for level in 0..=255 {
        let u = level as f64;
        let clean = if u <= knees[0] {
            floor
        } else if u >= knees[1] {
            ceil
        } else {
            floor + slope * (u - knees[0])
        };
        for _ in 0..repeats {
            out.push(ResponseSample {
                input_level: u,
                measured_level: (clean + rng.uniform(-noise, noise)).clamp(0.0, 255.0),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::g2c;
    use proptest::prelude::*;

    #[test]
    fn clips_blue_to_upper_bound() {
        let p = ChannelProfile {
            tau: 0.0,
            ..Default::default()
        };
        let white = Image::filled(2, 2, 3, 1.0);
        let out = color_project(&white, &p, &mut RngStream::new(1));
        assert!(out.rgb.data.chunks_exact(3).all(|px| px[2] == 204.0 / 255.0));
        let b_only = ChannelProfile {
            b: [63.0, 242.0],
            tau: 0.0,
            ..Default::default()
        };
        let out = color_project(&white, &b_only, &mut RngStream::new(1));
        assert!(out.rgb.data.chunks_exact(3).all(|px| px[2] == 242.0 / 255.0));
    }

    #[test]
    fn interior_pixels_are_untouched() {
        let p = ChannelProfile::default();
        // [63+5, 204-5] / 255 is inside every channel's shrunk interval
        let img = Image::from_fn(6, 6, 1, |y, x, _| (70.0 + 20.0 * ((y + x) % 7) as f64) / 255.0);
        for seed in 0..20 {
            let out = color_project(&img, &p, &mut RngStream::new(seed));
            assert!(out.image.max_abs_diff(&img) < 1e-12);
        }
    }

    #[test]
    fn same_seed_same_projection() {
        let img = Image::from_fn(5, 5, 1, |y, x, _| (y * 5 + x) as f64 / 24.0);
        let p = ChannelProfile::default();
        let a = color_project(&img, &p, &mut RngStream::new(3));
        let b = color_project(&img, &p, &mut RngStream::new(3));
        assert_eq!(a.image, b.image);
        assert_eq!(a.offsets, b.offsets);
    }

    #[test]
    fn profile_text_round_trip_and_validation() {
        let p = ChannelProfile::default();
        assert_eq!(ChannelProfile::from_text(&p.to_text()).unwrap(), p);
        assert!(ChannelProfile::from_text("r_low=10\n").is_err());
        let bad = ChannelProfile {
            r: [200.0, 100.0],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn linear_noiseless_spans_everything() {
        let samples: Vec<_> = (0..=255)
            .map(|l| ResponseSample {
                input_level: l as f64,
                measured_level: l as f64,
            })
            .collect();
        assert_eq!(
            estimate_linear_interval(&samples, &IntervalFit::default()).unwrap(),
            [0.0, 255.0]
        );
    }

    #[test]
    fn recovers_knees() {
        let mut rng = RngStream::new(60);
        let samples = synthetic_response([60.0, 240.0], 40.0, 225.0, 2.0, 3, &mut rng);
        let [lo, hi] = estimate_linear_interval(&samples, &IntervalFit::default()).unwrap();
        assert!((lo - 60.0).abs() <= 8.0 && (hi - 240.0).abs() <= 8.0, "{lo} {hi}");
    }

    #[test]
    fn degenerate_data_errors() {
        let flat: Vec<_> = (0..=255)
            .map(|l| ResponseSample {
                input_level: l as f64,
                measured_level: 100.0,
            })
            .collect();
        assert!(estimate_linear_interval(&flat, &IntervalFit::default()).is_err());
        let few: Vec<_> = (0..10)
            .map(|l| ResponseSample {
                input_level: l as f64,
                measured_level: l as f64,
            })
            .collect();
        assert!(estimate_linear_interval(&few, &IntervalFit::default()).is_err());
    }

    #[test]
    fn duplicated_samples_give_same_interval() {
        let mut rng = RngStream::new(8);
        let samples = synthetic_response([45.0, 210.0], 30.0, 200.0, 2.0, 2, &mut rng);
        let mut doubled = samples.clone();
        doubled.extend_from_slice(&samples);
        let fit = IntervalFit::default();
        assert_eq!(
            estimate_linear_interval(&samples, &fit).unwrap(),
            estimate_linear_interval(&doubled, &fit).unwrap()
        );
    }

    #[test]
    fn calibration_csv_round_trip() {
        let mut rng = RngStream::new(1);
        let cal = CalibrationSamples {
            channels: [0, 1, 2].map(|_| synthetic_response([50.0, 230.0], 30.0, 220.0, 1.0, 1, &mut rng)),
        };
        let parsed = CalibrationSamples::from_csv(&cal.to_csv()).unwrap();
        assert_eq!(parsed, cal);
        assert!(CalibrationSamples::from_csv("channel,input_level,measured_level\nx,1,2\n").is_err());
        assert!(CalibrationSamples::from_csv("r,1\n").is_err());
    }

    proptest! {
        #[test]
        fn intermediate_channels_within_widened_intervals(seed in 0u64..2000, v in 0.0f64..=1.0) {
            let p = ChannelProfile::default();
            let img = Image::from_fn(3, 3, 1, |y, x, _| (v + (y * 3 + x) as f64 * 0.13) % 1.0);
            let out = color_project(&img, &p, &mut RngStream::new(seed));
            let tau = p.tau_normalized();
            for px in out.rgb.data.chunks_exact(3) {
                for (c, [lo, hi]) in p.normalized().iter().enumerate() {
                    prop_assert!(px[c] >= lo - tau - 1e-12 && px[c] <= hi + tau + 1e-12);
                }
            }
        }

        #[test]
        fn idempotent_without_jitter(v in 0.0f64..=1.0) {
            let p = ChannelProfile { tau: 0.0, ..Default::default() };
            let img = Image::from_fn(2, 2, 3, |y, x, c| (v + 0.3 * (y + x + c) as f64) % 1.0);
            let once = color_project(&img, &p, &mut RngStream::new(0)).image;
            let twice = color_project(&once, &p, &mut RngStream::new(1)).image;
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn clipping_is_monotone(v in 0.0f64..=1.0, seed in 0u64..100) {
            let p = ChannelProfile::default();
            let img = Image::filled(1, 1, 3, v);
            let out = color_project(&img, &p, &mut RngStream::new(seed));
            for c in 0..3 {
                let [lo, hi] = out.bounds[c];
                let got = out.rgb.data[c];
                let want = if v < lo { lo } else if v > hi { hi } else { v };
                prop_assert_eq!(got, want);
            }
        }
    }

    #[test]
    fn gray_projection_is_inside_interval_intersection_for_midrange() {
        let p = ChannelProfile::default();
        let tau = p.tau_normalized();
        let img = Image::from_fn(8, 8, 1, |y, x, _| 0.26 + 0.5 * (y * 8 + x) as f64 / 63.0);
        for seed in 0..50 {
            let out = color_project(&img, &p, &mut RngStream::new(seed));
            let expanded = g2c(&out.image).unwrap();
            for px in expanded.data().chunks_exact(3) {
                for (c, [lo, hi]) in p.normalized().iter().enumerate() {
                    assert!(px[c] >= lo - tau - 1e-12 && px[c] <= hi + tau + 1e-12);
                }
            }
        }
    }
}
