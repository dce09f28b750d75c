//! Confidence intervals, the one-sided Wilcoxon signed-rank test and KL
//! divergence between sentiment-label histograms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use thiserror::Error;

use crate::labels::SentimentLabel;

#[derive(Debug, Error, PartialEq)]
pub enum StatError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("paired samples differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("all paired differences are zero")]
    DegenerateSample,
    #[error("confidence level must lie in (0, 1), got {0}")]
    BadLevel(f64),
    #[error("histogram is empty")]
    EmptyHistogram,
    #[error("label {0} has positive true mass but zero generated mass")]
    ZeroGeneratedBin(SentimentLabel),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiMethod {
    TDist,
    Bootstrap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub method: CiMethod,
}

impl ConfidenceInterval {
    pub fn half_width(&self) -> f64 {
        (self.upper - self.lower) / 2.0
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }
}

fn check_level(level: f64) -> Result<(), StatError> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(StatError::BadLevel(level))
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator).
pub fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m).powi(2)).sum();
    (ss / (xs.len() - 1) as f64).sqrt()
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    }
}

/// Student-t interval for the mean.
pub fn mean_ci_t(samples: &[f64], level: f64) -> Result<ConfidenceInterval, StatError> {
    check_level(level)?;
    if samples.len() < 2 {
        return Err(StatError::TooFewSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    let n = samples.len() as f64;
    let point = mean(samples);
    let t = StudentsT::new(0.0, 1.0, n - 1.0)
        .expect("degrees of freedom are positive")
        .inverse_cdf(0.5 + level / 2.0);
    let half = t * sample_sd(samples) / n.sqrt();
    Ok(ConfidenceInterval {
        point,
        lower: point - half,
        upper: point + half,
        level,
        method: CiMethod::TDist,
    })
}

/// Linear-interpolated quantile of sorted data (numpy's default rule).
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Percentile bootstrap interval for an arbitrary statistic.
///
/// The RNG is seeded per call. The bounds are widened to include the
/// plug-in estimate when the percentile interval would exclude it.
pub fn bootstrap_ci<F>(
    samples: &[f64],
    statistic: F,
    resamples: usize,
    level: f64,
    seed: u64,
) -> Result<ConfidenceInterval, StatError>
where
    F: Fn(&[f64]) -> f64,
{
    check_level(level)?;
    if samples.is_empty() {
        return Err(StatError::TooFewSamples { needed: 1, got: 0 });
    }
    if resamples == 0 {
        return Err(StatError::TooFewSamples { needed: 1, got: 0 });
    }
    let point = statistic(samples);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = vec![0.0; samples.len()];
    let mut stats: Vec<f64> = (0..resamples)
        .map(|_| {
            for slot in buf.iter_mut() {
                *slot = samples[rng.gen_range(0..samples.len())];
            }
            statistic(&buf)
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    let alpha = 1.0 - level;
    let lower = quantile_sorted(&stats, alpha / 2.0).min(point);
    let upper = quantile_sorted(&stats, 1.0 - alpha / 2.0).max(point);
    Ok(ConfidenceInterval {
        point,
        lower,
        upper,
        level,
        method: CiMethod::Bootstrap,
    })
}

/// Number of nonzero differences up to which [`wilcoxon_one_sided`] enumerates
/// the exact null distribution.
pub const WILCOXON_EXACT_MAX: usize = 12;

const RANK_EPS: f64 = 1e-9;

/// Signed ranks of the nonzero differences `a - b` (average ranks for ties).
/// Returns (ranks, positive-rank sum W+).
fn signed_ranks(a: &[f64], b: &[f64]) -> Result<(Vec<f64>, f64), StatError> {
    if a.len() != b.len() {
        return Err(StatError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(StatError::TooFewSamples { needed: 1, got: 0 });
    }
    let mut diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Err(StatError::DegenerateSample);
    }
    diffs.sort_by(|x, y| x.abs().total_cmp(&y.abs()));
    let mut ranks = vec![0.0; diffs.len()];
    let mut i = 0;
    while i < diffs.len() {
        let mut j = i;
        while j + 1 < diffs.len() && diffs[j + 1].abs() == diffs[i].abs() {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for r in ranks.iter_mut().take(j + 1).skip(i) {
            *r = avg;
        }
        i = j + 1;
    }
    let w_plus = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    Ok((ranks, w_plus))
}

/// Exact one-sided p-value P(W+ >= observed) by enumerating all sign
/// assignments of the (possibly tied) ranks.
pub fn wilcoxon_exact(a: &[f64], b: &[f64]) -> Result<f64, StatError> {
    let (ranks, w_plus) = signed_ranks(a, b)?;
    let n = ranks.len();
    assert!(n < 31, "exact enumeration is limited to small samples");
    let total = 1u64 << n;
    let mut hits = 0u64;
    for mask in 0..total {
        let w: f64 = ranks
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, r)| r)
            .sum();
        if w >= w_plus - RANK_EPS {
            hits += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}

/// Normal approximation with tie and continuity correction.
pub fn wilcoxon_normal(a: &[f64], b: &[f64]) -> Result<f64, StatError> {
    let (ranks, w_plus) = signed_ranks(a, b)?;
    let n = ranks.len() as f64;
    let mu = n * (n + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < ranks.len() {
        let mut j = i;
        while j + 1 < ranks.len() && ranks[j + 1] == ranks[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return Err(StatError::DegenerateSample);
    }
    let z = (w_plus - mu - 0.5) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(1.0 - normal.cdf(z))
}

/// One-sided signed-rank test of "`a` tends to exceed `b`". Zero differences
/// are dropped; exact for up to [`WILCOXON_EXACT_MAX`] nonzero differences.
pub fn wilcoxon_one_sided(a: &[f64], b: &[f64]) -> Result<f64, StatError> {
    let (ranks, _) = signed_ranks(a, b)?;
    if ranks.len() <= WILCOXON_EXACT_MAX {
        wilcoxon_exact(a, b)
    } else {
        wilcoxon_normal(a, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LabelHistogram {
    pub positive: u64,
    pub neutral: u64,
    pub negative: u64,
}

impl LabelHistogram {
    pub fn new(positive: u64, neutral: u64, negative: u64) -> Self {
        Self {
            positive,
            neutral,
            negative,
        }
    }

    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a SentimentLabel>) -> Self {
        let mut h = Self::default();
        for l in labels {
            h.add(*l);
        }
        h
    }

    pub fn add(&mut self, label: SentimentLabel) {
        match label {
            SentimentLabel::Positive => self.positive += 1,
            SentimentLabel::Neutral => self.neutral += 1,
            SentimentLabel::Negative => self.negative += 1,
        }
    }

    pub fn count(&self, label: SentimentLabel) -> u64 {
        match label {
            SentimentLabel::Positive => self.positive,
            SentimentLabel::Neutral => self.neutral,
            SentimentLabel::Negative => self.negative,
        }
    }

    pub fn total(&self) -> u64 {
        self.positive + self.neutral + self.negative
    }
}

/// D(p_true || q_gen) in nats over the three sentiment labels.
///
/// `smoothing` adds a pseudo-count to every bin of both histograms; with the
/// default of zero a generated bin that is empty while the true bin is not is
/// an error.
pub fn kl_divergence(
    p_true: &LabelHistogram,
    q_gen: &LabelHistogram,
    smoothing: f64,
) -> Result<f64, StatError> {
    if p_true.total() == 0 || q_gen.total() == 0 {
        return Err(StatError::EmptyHistogram);
    }
    let p_total = p_true.total() as f64 + 3.0 * smoothing;
    let q_total = q_gen.total() as f64 + 3.0 * smoothing;
    let mut kl = 0.0;
    for label in SentimentLabel::ALL {
        let p = (p_true.count(label) as f64 + smoothing) / p_total;
        let q = (q_gen.count(label) as f64 + smoothing) / q_total;
        if p == 0.0 {
            continue;
        }
        if q == 0.0 {
            return Err(StatError::ZeroGeneratedBin(label));
        }
        kl += p * (p / q).ln();
    }
    Ok(kl.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn t_interval_constant_samples() {
        let ci = mean_ci_t(&[2.5; 8], 0.95).unwrap();
        assert_eq!((ci.lower, ci.point, ci.upper), (2.5, 2.5, 2.5));
    }

    #[test]
    fn t_interval_one_to_five() {
        let ci = mean_ci_t(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.95).unwrap();
        assert_eq!(ci.point, 3.0);
        // t*(0.975, 4) = 2.7764, sd/sqrt(n) = 0.70711
        assert!((ci.lower - 1.0368).abs() < 1e-3, "{ci:?}");
        assert!((ci.upper - 4.9632).abs() < 1e-3, "{ci:?}");
    }

    #[test]
    fn t_interval_widens_with_level() {
        let xs = [0.3, 0.1, 0.7, 0.4, 0.2, 0.9];
        let a = mean_ci_t(&xs, 0.95).unwrap();
        let b = mean_ci_t(&xs, 0.99).unwrap();
        assert!(b.lower < a.lower && b.upper > a.upper);
    }

    #[test]
    fn t_interval_needs_two_samples() {
        assert_eq!(
            mean_ci_t(&[1.0], 0.95),
            Err(StatError::TooFewSamples { needed: 2, got: 1 })
        );
    }

    #[test]
    fn bootstrap_constant_and_deterministic() {
        let ci = bootstrap_ci(&[4.0; 10], mean, 200, 0.95, 3).unwrap();
        assert_eq!((ci.lower, ci.upper), (4.0, 4.0));
        let xs: Vec<f64> = (0..50).map(|i| (i % 7) as f64).collect();
        let a = bootstrap_ci(&xs, mean, 1000, 0.95, 11).unwrap();
        let b = bootstrap_ci(&xs, mean, 1000, 0.95, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bootstrap_bernoulli_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let xs: Vec<f64> = (0..400).map(|_| f64::from(rng.gen_bool(0.5) as u8)).collect();
        let ci = bootstrap_ci(&xs, mean, 1000, 0.95, 5).unwrap();
        assert!(ci.contains(mean(&xs)));
        assert!(ci.upper - ci.lower < 0.12, "{ci:?}");
    }

    #[test]
    fn wilcoxon_all_positive_six() {
        let a = [3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let b = [1.0, 1.5, 2.0, 2.5, 3.0, 3.5];
        assert_eq!(wilcoxon_one_sided(&a, &b).unwrap(), 0.015625);
        assert_eq!(wilcoxon_one_sided(&b, &a).unwrap(), 1.0);
    }

    #[test]
    fn wilcoxon_degenerate() {
        let a = [1.0, 2.0, 3.0];
        assert_eq!(wilcoxon_one_sided(&a, &a), Err(StatError::DegenerateSample));
        assert!(matches!(
            wilcoxon_one_sided(&a, &a[..2]),
            Err(StatError::LengthMismatch(3, 2))
        ));
    }

    #[test]
    fn wilcoxon_ties_use_average_ranks() {
        // |d| = 1, 1, 2 -> ranks 1.5, 1.5, 3; W+ = 1.5 + 3 = 4.5
        let a = [1.0, 0.0, 2.0];
        let b = [0.0, 1.0, 0.0];
        // sign assignments with sum >= 4.5: {3,1.5a}, {3,1.5b}, {all} = 3 of 8
        assert_eq!(wilcoxon_exact(&a, &b).unwrap(), 3.0 / 8.0);
    }

    #[test]
    fn kl_identity_and_zero_bin() {
        let p = LabelHistogram::new(5, 3, 2);
        assert_eq!(kl_divergence(&p, &p, 0.0).unwrap(), 0.0);
        let q = LabelHistogram::new(10, 0, 0);
        assert_eq!(
            kl_divergence(&p, &q, 0.0),
            Err(StatError::ZeroGeneratedBin(SentimentLabel::Neutral))
        );
        assert!(kl_divergence(&p, &q, 0.5).unwrap() > 0.0);
        assert_eq!(
            kl_divergence(&LabelHistogram::default(), &q, 0.0),
            Err(StatError::EmptyHistogram)
        );
    }

    #[test]
    fn kl_sentiment_table_values() {
        let truth = LabelHistogram::new(302, 29, 69);
        let baseline = LabelHistogram::new(393, 1, 6);
        let scp = LabelHistogram::new(386, 4, 10);
        assert!((kl_divergence(&truth, &baseline, 0.0).unwrap() - 0.467).abs() < 1e-3);
        assert!((kl_divergence(&truth, &scp, 0.0).unwrap() - 0.292).abs() < 1e-3);
    }

    #[test]
    fn median_and_sd() {
        assert_eq!(median(&[3.0, 5.0, 100.0]), 5.0);
        assert_eq!(mean(&[3.0, 5.0, 100.0]), 36.0);
        assert_eq!(median(&[1.0, 2.0, 3.0, 4.0]), 2.5);
        assert!((sample_sd(&[1.0, 2.0, 3.0, 4.0, 5.0]) - 1.5811).abs() < 1e-4);
    }
}
