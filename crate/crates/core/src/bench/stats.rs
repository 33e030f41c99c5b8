use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Fraction of scores strictly above `threshold`.
pub fn compute_asr(scores: &[f64], threshold: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("no scores".into()));
    }
    Ok(scores.iter().filter(|&&s| s > threshold).count() as f64 / scores.len() as f64)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Percentile bootstrap interval of the mean, `[lower, upper]` at the given
/// two-sided coverage.
pub fn bootstrap_mean_ci(xs: &[f64], resamples: usize, coverage: f64, seed: u64) -> Result<[f64; 2]> {
    if xs.is_empty() || resamples == 0 {
        return Err(Error::InvalidArgument("bootstrap needs data and resamples".into()));
    }
    let mut rng = RngStream::new(seed);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..xs.len()).map(|_| xs[rng.below(xs.len())]).sum::<f64>() / xs.len() as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - coverage) / 2.0;
    let at = |q: f64| means[((q * resamples as f64) as usize).min(resamples - 1)];
    Ok([at(tail), at(1.0 - tail)])
}

/// One-sided bootstrap test that the mean of paired differences is
/// positive: the `1 − confidence` quantile of resampled means exceeds 0.
pub fn bootstrap_positive(diffs: &[f64], resamples: usize, confidence: f64, seed: u64) -> Result<(bool, f64)> {
    let [lower, _] = bootstrap_mean_ci(diffs, resamples, 2.0 * confidence - 1.0, seed)?;
    Ok((lower > 0.0, lower))
}
