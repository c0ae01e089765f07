//! Rank correlation and bootstrap resampling.
//!
//! All resampling is seeded: trial `t` draws from a ChaCha8 stream keyed by
//! `(seed, t)`, so results do not depend on how trials are scheduled across
//! threads.

pub mod benchmark;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use benchmark::{
    compare_models, correlation_difference_test, rank_metrics, style_transfer_report, ComparisonGrid, CorrelationResult, HumanScoreSet,
    MetricRanking, ModelScores, StyleShift,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("correlation undefined: zero rank variance")]
    ZeroVariance,
    #[error("non-finite input value")]
    NonFinite,
    #[error("empty sample")]
    Empty,
    #[error("confidence level {0} outside (0, 1)")]
    InvalidLevel(f64),
    #[error("score {score} for {report_id} outside 1-5")]
    ScoreOutOfRange { report_id: String, score: u8 },
    #[error("human score refers to unknown case {0:?}")]
    UnknownCase(String),
    #[error("metric {metric:?} missing for {whom}")]
    MissingMetric { metric: String, whom: String },
    #[error("need at least {0} models")]
    NotEnoughModels(usize),
    #[error("no bootstrap trial produced a finite statistic")]
    NoValidTrials,
}

/// Average ranks (1-based); tied values share the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman's rho: Pearson correlation of average ranks.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(StatsError::TooFewSamples { needed: 3, got: x.len() });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub trials: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            trials: 10_000,
            level: 0.95,
            seed: 0,
        }
    }
}

impl BootstrapConfig {
    pub fn with_seed(seed: u64) -> Self {
        BootstrapConfig {
            seed,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub statistic: String,
    pub estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub level: f64,
    pub trials: usize,
    /// Trials whose statistic was finite; the interval is taken over these.
    pub valid_trials: usize,
}

pub(crate) fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

pub(crate) fn fill_indices(rng: &mut ChaCha8Rng, n: usize, out: &mut Vec<usize>) {
    out.clear();
    out.extend((0..n).map(|_| rng.random_range(0..n)));
}

/// Statistic of every resample, in trial order.
pub fn bootstrap_distribution<T, F>(samples: &[T], statistic: F, trials: usize, seed: u64) -> Vec<f64>
where
    T: Clone + Send + Sync,
    F: Fn(&[T]) -> f64 + Sync,
{
    let n = samples.len();
    (0..trials)
        .into_par_iter()
        .map_init(
            || (Vec::with_capacity(n), Vec::with_capacity(n)),
            |(idx, buf): &mut (Vec<usize>, Vec<T>), t| {
                let mut rng = trial_rng(seed, t);
                fill_indices(&mut rng, n, idx);
                buf.clear();
                buf.extend(idx.iter().map(|&i| samples[i].clone()));
                statistic(buf)
            },
        )
        .collect()
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Central percentile interval of sorted statistics.
pub fn percentile_interval(sorted: &[f64], level: f64) -> (f64, f64) {
    let alpha = (1.0 - level) / 2.0;
    (quantile_sorted(sorted, alpha), quantile_sorted(sorted, 1.0 - alpha))
}

/// Percentile bootstrap confidence interval.
pub fn bootstrap_ci<T, F>(samples: &[T], statistic: F, config: BootstrapConfig) -> Result<BootstrapSummary, StatsError>
where
    T: Clone + Send + Sync,
    F: Fn(&[T]) -> f64 + Sync,
{
    bootstrap_ci_named("statistic", samples, statistic, config)
}

pub fn bootstrap_ci_named<T, F>(name: &str, samples: &[T], statistic: F, config: BootstrapConfig) -> Result<BootstrapSummary, StatsError>
where
    T: Clone + Send + Sync,
    F: Fn(&[T]) -> f64 + Sync,
{
    if samples.is_empty() {
        return Err(StatsError::Empty);
    }
    if !(config.level > 0.0 && config.level < 1.0) {
        return Err(StatsError::InvalidLevel(config.level));
    }
    let estimate = statistic(samples);
    let mut dist: Vec<f64> = bootstrap_distribution(samples, &statistic, config.trials, config.seed)
        .into_iter()
        .filter(|v| v.is_finite())
        .collect();
    if dist.is_empty() {
        return Err(StatsError::NoValidTrials);
    }
    dist.sort_by(f64::total_cmp);
    let (ci_low, ci_high) = percentile_interval(&dist, config.level);
    Ok(BootstrapSummary {
        statistic: name.to_string(),
        estimate,
        ci_low,
        ci_high,
        level: config.level,
        trials: config.trials,
        valid_trials: dist.len(),
    })
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

pub fn bootstrap_mean(samples: &[f64], config: BootstrapConfig) -> Result<BootstrapSummary, StatsError> {
    bootstrap_ci_named("mean", samples, mean, config)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Significant,
    NotSignificant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExceedanceResult {
    /// Fraction of trials in which `a` exceeded `b` (ties count half).
    pub exceedance: f64,
    pub verdict: Verdict,
    pub mean_difference: f64,
    pub trials: usize,
    /// Two-sided: `2 * min(exceedance, 1 - exceedance)`.
    pub p_value: f64,
}

/// Significant when one group exceeds the other in at least this share of trials.
pub const EXCEEDANCE_THRESHOLD: f64 = 0.95;

pub(crate) fn exceedance_from_counts(greater: usize, ties: usize, trials: usize, mean_difference: f64) -> ExceedanceResult {
    let exceedance = (greater as f64 + 0.5 * ties as f64) / trials as f64;
    let significant = exceedance >= EXCEEDANCE_THRESHOLD || exceedance <= 1.0 - EXCEEDANCE_THRESHOLD;
    ExceedanceResult {
        exceedance,
        verdict: if significant {
            Verdict::Significant
        } else {
            Verdict::NotSignificant
        },
        mean_difference,
        trials,
        p_value: (2.0 * exceedance.min(1.0 - exceedance)).min(1.0),
    }
}

/// Paired bootstrap: resample case indices, compare the resampled means.
pub fn paired_exceedance_test(a: &[f64], b: &[f64], config: BootstrapConfig) -> Result<ExceedanceResult, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(StatsError::Empty);
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = diffs.len();
    let (greater, ties) = (0..config.trials)
        .into_par_iter()
        .map_init(
            || Vec::with_capacity(n),
            |idx, t| {
                let mut rng = trial_rng(config.seed, t);
                fill_indices(&mut rng, n, idx);
                let s: f64 = idx.iter().map(|&i| diffs[i]).sum();
                ((s > 0.0) as usize, (s == 0.0) as usize)
            },
        )
        .reduce(|| (0, 0), |x, y| (x.0 + y.0, x.1 + y.1));
    Ok(exceedance_from_counts(greater, ties, config.trials, mean(&diffs)))
}

/// Unpaired variant: both groups are resampled independently.
pub fn two_sample_exceedance_test(a: &[f64], b: &[f64], config: BootstrapConfig) -> Result<ExceedanceResult, StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::Empty);
    }
    let (greater, ties) = (0..config.trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(config.seed, t);
            let ma = (0..a.len()).map(|_| a[rng.random_range(0..a.len())]).sum::<f64>() / a.len() as f64;
            let mb = (0..b.len()).map(|_| b[rng.random_range(0..b.len())]).sum::<f64>() / b.len() as f64;
            ((ma > mb) as usize, (ma == mb) as usize)
        })
        .reduce(|| (0, 0), |x, y| (x.0 + y.0, x.1 + y.1));
    Ok(exceedance_from_counts(greater, ties, config.trials, mean(a) - mean(b)))
}
