//! Statistical descriptors of a series and their fixed-template English rendering.

use serde::{Deserialize, Serialize};

use crate::dataset::TimeSeriesInstance;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
    pub kurtosis: f64,
}

/// Population moments. Skewness is `m3 / m2^1.5`, kurtosis is the excess
/// `m4 / m2^2 - 3`; both are 0 when the variance is 0.
pub fn distributional_stats(x: &[f64]) -> Result<Moments> {
    if x.is_empty() {
        return Err(Error::invalid("moments need at least one value"));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &v in x {
        let d = v - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    let (skewness, kurtosis) = if m2 > 0.0 {
        (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0)
    } else {
        (0.0, 0.0)
    };
    Ok(Moments {
        mean,
        variance: m2,
        skewness,
        kurtosis,
    })
}

fn check_entropy_args(x: &[f64], m: usize, r: f64) -> Result<()> {
    if !(r > 0.0) {
        return Err(Error::invalid("tolerance r must be positive"));
    }
    if m == 0 {
        return Err(Error::invalid("embedding dimension must be at least 1"));
    }
    if x.len() <= m + 1 {
        return Err(Error::invalid(format!(
            "series of length {} is too short for m={m}",
            x.len()
        )));
    }
    Ok(())
}

/// Sample entropy `-ln(A/B)`: `B` counts pairs of length-`m` templates
/// within Chebyshev distance `r` (self-matches excluded) and `A` does the
/// same for length `m + 1`. Both use the first `N - m` starting points.
/// `None` when either count is zero.
pub fn sample_entropy(x: &[f64], m: usize, r: f64) -> Result<Option<f64>> {
    check_entropy_args(x, m, r)?;
    let n_templates = x.len() - m;
    let (mut b, mut a) = (0u64, 0u64);
    for i in 0..n_templates {
        'pairs: for j in i + 1..n_templates {
            for k in 0..m {
                if (x[i + k] - x[j + k]).abs() > r {
                    continue 'pairs;
                }
            }
            b += 1;
            if (x[i + m] - x[j + m]).abs() <= r {
                a += 1;
            }
        }
    }
    if a == 0 || b == 0 {
        return Ok(None);
    }
    Ok(Some(-(a as f64 / b as f64).ln()))
}

/// Approximate entropy `Phi_m - Phi_{m+1}` where `Phi_m` averages
/// `ln C_i^m` and `C_i^m` is the fraction of length-`m` templates within
/// Chebyshev distance `r` of template `i`, self-match included.
pub fn approx_entropy(x: &[f64], m: usize, r: f64) -> Result<f64> {
    check_entropy_args(x, m, r)?;
    let n = x.len();
    let count_m = n - m + 1;
    let count_m1 = n - m;
    // c_m[i] and c_m1[i] are filled together: a length-(m+1) match implies a
    // length-m match on the same pair.
    let mut c_m = vec![0u64; count_m];
    let mut c_m1 = vec![0u64; count_m1];
    for i in 0..count_m {
        'pairs: for j in 0..count_m {
            for k in 0..m {
                if (x[i + k] - x[j + k]).abs() > r {
                    continue 'pairs;
                }
            }
            c_m[i] += 1;
            if i < count_m1 && j < count_m1 && (x[i + m] - x[j + m]).abs() <= r {
                c_m1[i] += 1;
            }
        }
    }
    let phi = |counts: &[u64], total: usize| {
        counts.iter().map(|&c| (c as f64 / total as f64).ln()).sum::<f64>() / total as f64
    };
    Ok(phi(&c_m, count_m) - phi(&c_m1, count_m1))
}

/// Ordinary least squares line `a t + b` over `t = 0..L-1`.
pub fn linear_trend(x: &[f64]) -> Result<(f64, f64)> {
    if x.len() < 2 {
        return Err(Error::invalid("trend needs at least two points"));
    }
    let n = x.len() as f64;
    let t_mean = (n - 1.0) / 2.0;
    let x_mean = x.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (t, &v) in x.iter().enumerate() {
        let dt = t as f64 - t_mean;
        sxy += dt * (v - x_mean);
        sxx += dt * dt;
    }
    let slope = sxy / sxx;
    Ok((slope, x_mean - slope * t_mean))
}

/// Biased autocorrelation of the mean-removed series at `lag`.
pub fn autocorrelation(x: &[f64], lag: usize) -> f64 {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let denom: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum();
    if denom == 0.0 || lag >= n {
        return 0.0;
    }
    let num: f64 = (0..n - lag).map(|t| (x[t] - mean) * (x[t + lag] - mean)).sum();
    num / denom
}

pub const DEFAULT_ACF_THRESHOLD: f64 = 0.3;

/// Lag in `2..=L/2` with the largest autocorrelation, if that value exceeds
/// `threshold`; ties resolve to the smallest lag.
pub fn dominant_period_with(x: &[f64], threshold: f64) -> Result<Option<usize>> {
    if x.len() < 8 {
        return Err(Error::invalid("period detection needs at least 8 points"));
    }
    let mut best: Option<(usize, f64)> = None;
    for lag in 2..=x.len() / 2 {
        let r = autocorrelation(x, lag);
        if best.is_none_or(|(_, b)| r > b) {
            best = Some((lag, r));
        }
    }
    Ok(best.filter(|&(_, r)| r > threshold).map(|(lag, _)| lag))
}

pub fn dominant_period(x: &[f64]) -> Result<Option<usize>> {
    dominant_period_with(x, DEFAULT_ACF_THRESHOLD)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub entropy_m: usize,
    /// Entropy tolerance as a multiple of the series' standard deviation.
    pub entropy_r_factor: f64,
    pub acf_threshold: f64,
    /// One feature block per channel instead of one for the channel mean.
    pub per_channel: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            entropy_m: 2,
            entropy_r_factor: 0.2,
            acf_threshold: DEFAULT_ACF_THRESHOLD,
            per_channel: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatFeatureSet {
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
    pub kurtosis: f64,
    /// `None` when no template pairs matched.
    pub sample_entropy: Option<f64>,
    pub approx_entropy: f64,
    pub trend_slope: f64,
    pub trend_intercept: f64,
    pub dominant_period: Option<usize>,
}

/// Smallest tolerance used when the series is constant.
const MIN_TOLERANCE: f64 = 1e-12;

pub fn extract_stats(x: &[f64], cfg: &FeatureConfig) -> Result<StatFeatureSet> {
    let mo = distributional_stats(x)?;
    let r = (cfg.entropy_r_factor * mo.variance.sqrt()).max(MIN_TOLERANCE);
    let (slope, intercept) = linear_trend(x)?;
    Ok(StatFeatureSet {
        mean: mo.mean,
        variance: mo.variance,
        skewness: mo.skewness,
        kurtosis: mo.kurtosis,
        sample_entropy: sample_entropy(x, cfg.entropy_m, r)?,
        approx_entropy: approx_entropy(x, cfg.entropy_m, r)?,
        trend_slope: slope,
        trend_intercept: intercept,
        dominant_period: dominant_period_with(x, cfg.acf_threshold)?,
    })
}

/// Feature blocks for an instance: the channel-mean series, or one block
/// per channel when `per_channel` is set.
pub fn extract_instance(inst: &TimeSeriesInstance, cfg: &FeatureConfig) -> Result<Vec<StatFeatureSet>> {
    if cfg.per_channel && inst.channels() > 1 {
        inst.values
            .outer_iter()
            .map(|row| extract_stats(&row.to_vec(), cfg))
            .collect()
    } else {
        Ok(vec![extract_stats(&inst.channel_mean(), cfg)?])
    }
}

/// Three significant figures; integers of up to six digits print without
/// an exponent, very small or large magnitudes use scientific notation.
pub fn sig3(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v.is_nan() {
            "NaN".into()
        } else if v == 0.0 {
            "0".into()
        } else {
            format!("{v}")
        };
    }
    let mut mag = v.abs().log10().floor() as i32;
    if !(-3..6).contains(&mag) {
        return format!("{v:.2e}");
    }
    let scale = 10f64.powi(mag - 2);
    let rounded = (v / scale).round() * scale;
    // Rounding can carry into a new digit (9.995 -> 10.0).
    if rounded.abs().log10().floor() as i32 > mag {
        mag += 1;
    }
    let decimals = (2 - mag).max(0) as usize;
    let s = format!("{rounded:.decimals$}");
    if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
        s[1..].to_string()
    } else {
        s
    }
}

/// Fixed-order rendering: distribution, complexity, trend, periodicity.
pub fn stats_to_text(f: &StatFeatureSet) -> String {
    let sampen = match f.sample_entropy {
        Some(v) => format!("sample entropy {}", sig3(v)),
        None => "sample entropy undefined (insufficient matches)".to_string(),
    };
    let period = match f.dominant_period {
        Some(p) => format!("a dominant period of {p} steps"),
        None => "no clear periodicity".to_string(),
    };
    format!(
        "The values have mean {} , variance {} , skewness {} and kurtosis {} . \
         Complexity shows {} and approximate entropy {} . \
         The linear trend has slope {} per step and intercept {} . \
         The series has {} .",
        sig3(f.mean),
        sig3(f.variance),
        sig3(f.skewness),
        sig3(f.kurtosis),
        sampen,
        sig3(f.approx_entropy),
        sig3(f.trend_slope),
        sig3(f.trend_intercept),
        period,
    )
}

/// Renders one or more feature blocks; multiple blocks are prefixed with
/// their channel number.
pub fn blocks_to_text(blocks: &[StatFeatureSet]) -> String {
    match blocks {
        [single] => stats_to_text(single),
        many => many
            .iter()
            .enumerate()
            .map(|(i, b)| format!("Channel {} : {}", i + 1, stats_to_text(b)))
            .collect::<Vec<_>>()
            .join(" "),
    }
}
