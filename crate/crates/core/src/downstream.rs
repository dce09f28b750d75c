//! Task-oriented evaluation: user identity linkage by similarity ranking and
//! sentiment agreement at the group (label histogram) and user (F1) level.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ReferencePool, Review};
use crate::labels::SentimentLabel;
use crate::metrics::{tokenize, MetricError, SimilarityScorer};
use crate::stats::{kl_divergence, LabelHistogram, StatError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("reference pool is empty")]
    EmptyPool,
    #[error("label lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("label lists are empty")]
    Empty,
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Stat(#[from] StatError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub instance_id: String,
    /// 1-based position of the generated review.
    pub rank: usize,
    pub pool_size: usize,
    pub reciprocal_rank: f64,
    pub hit_at_5: bool,
}

impl RankingResult {
    pub fn new(instance_id: impl Into<String>, rank: usize, pool_size: usize) -> Self {
        Self {
            instance_id: instance_id.into(),
            rank,
            pool_size,
            reciprocal_rank: 1.0 / rank as f64,
            hit_at_5: rank <= 5,
        }
    }
}

/// Rank of a candidate score among pool scores; pool entries that tie with
/// the candidate are placed ahead of it.
fn pessimistic_rank(candidate: f64, pool: &[f64]) -> usize {
    1 + pool.iter().filter(|s| **s >= candidate).count()
}

/// Ranks `generated` among the other users' reviews by similarity to the
/// ground-truth review. The ground truth itself is not in the ranked set.
pub fn identity_linkage(
    instance_id: &str,
    generated: &str,
    truth: &Review,
    pool: &ReferencePool,
    scorer: &dyn SimilarityScorer,
) -> Result<RankingResult, EvalError> {
    if pool.is_empty() {
        return Err(EvalError::EmptyPool);
    }
    let mut pairs: Vec<(&str, &str)> = pool
        .reviews
        .iter()
        .map(|r| (r.text.as_str(), truth.text.as_str()))
        .collect();
    pairs.push((generated, truth.text.as_str()));
    let scores: Vec<f64> = scorer.score_batch(&pairs)?.iter().map(|s| s.f).collect();
    let (gen, others) = scores.split_last().expect("at least one pair");
    Ok(RankingResult::new(
        instance_id,
        pessimistic_rank(*gen, others),
        pool.len(),
    ))
}

/// The random-selection reference: a uniformly chosen pool review ranked
/// against the rest of the pool.
pub fn random_linkage<R: Rng>(
    instance_id: &str,
    truth: &Review,
    pool: &ReferencePool,
    scorer: &dyn SimilarityScorer,
    rng: &mut R,
) -> Result<RankingResult, EvalError> {
    if pool.is_empty() {
        return Err(EvalError::EmptyPool);
    }
    let pick = rng.gen_range(0..pool.len());
    let pairs: Vec<(&str, &str)> = pool
        .reviews
        .iter()
        .map(|r| (r.text.as_str(), truth.text.as_str()))
        .collect();
    let scores: Vec<f64> = scorer.score_batch(&pairs)?.iter().map(|s| s.f).collect();
    let others: Vec<f64> = scores
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != pick)
        .map(|(_, s)| *s)
        .collect();
    Ok(RankingResult::new(
        instance_id,
        pessimistic_rank(scores[pick], &others),
        pool.len() - 1,
    ))
}

/// Fraction of results ranked within the top `k` (NaN when empty).
pub fn hit_at_k(results: &[RankingResult], k: usize) -> f64 {
    if results.is_empty() {
        return f64::NAN;
    }
    results.iter().filter(|r| r.rank <= k).count() as f64 / results.len() as f64
}

/// Mean reciprocal rank (NaN when empty).
pub fn mrr(results: &[RankingResult]) -> f64 {
    if results.is_empty() {
        return f64::NAN;
    }
    results.iter().map(|r| 1.0 / r.rank as f64).sum::<f64>() / results.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SentimentPrediction {
    pub label: SentimentLabel,
    /// Positive, neutral, negative.
    pub scores: [f64; 3],
}

impl SentimentPrediction {
    /// Checks normalization and derives the label as the argmax (earliest
    /// label wins exact ties).
    pub fn from_scores(scores: [f64; 3]) -> Result<Self, String> {
        if scores.iter().any(|s| !(0.0..=1.0 + 1e-9).contains(s)) {
            return Err(format!("scores {scores:?} outside [0, 1]"));
        }
        let sum: f64 = scores.iter().sum();
        if (sum - 1.0).abs() > 1e-4 {
            return Err(format!("scores {scores:?} sum to {sum}"));
        }
        let mut best = 0;
        for i in 1..3 {
            if scores[i] > scores[best] {
                best = i;
            }
        }
        Ok(Self {
            label: SentimentLabel::ALL[best],
            scores,
        })
    }
}

pub trait SentimentClassifier: Send + Sync {
    fn classify_batch(&self, texts: &[&str]) -> Result<Vec<SentimentPrediction>, MetricError>;
}

const POSITIVE_WORDS: &[&str] = &[
    "good",
    "great",
    "excellent",
    "amazing",
    "love",
    "loved",
    "loves",
    "wonderful",
    "best",
    "awesome",
    "fantastic",
    "perfect",
    "recommend",
    "enjoy",
    "enjoyed",
    "beautiful",
    "nice",
    "happy",
    "favorite",
    "brilliant",
];
const NEGATIVE_WORDS: &[&str] = &[
    "bad",
    "terrible",
    "awful",
    "poor",
    "worst",
    "hate",
    "hated",
    "boring",
    "disappointing",
    "disappointed",
    "broken",
    "waste",
    "useless",
    "horrible",
    "refund",
    "cheap",
    "annoying",
    "mediocre",
    "worse",
    "fails",
];

/// Offline stand-in for the sentiment model: counts lexicon hits and takes
/// a softmax over logits (p - q, 0.5, q - p), so equal counts (including
/// none) are neutral. Not for reported results.
#[derive(Debug, Clone, Copy, Default)]
pub struct LexiconClassifier;

impl LexiconClassifier {
    pub fn classify(&self, text: &str) -> SentimentPrediction {
        let (mut pos, mut neg) = (0i64, 0i64);
        for t in tokenize(text) {
            if POSITIVE_WORDS.contains(&t.as_str()) {
                pos += 1;
            } else if NEGATIVE_WORDS.contains(&t.as_str()) {
                neg += 1;
            }
        }
        let d = (pos - neg) as f64;
        let logits = [d, 0.5, -d];
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exp.iter().sum();
        SentimentPrediction::from_scores([exp[0] / z, exp[1] / z, exp[2] / z])
            .expect("softmax output is normalized")
    }
}

impl SentimentClassifier for LexiconClassifier {
    fn classify_batch(&self, texts: &[&str]) -> Result<Vec<SentimentPrediction>, MetricError> {
        Ok(texts.iter().map(|t| self.classify(t)).collect())
    }
}

pub fn classify_sentiment(
    text: &str,
    classifier: &dyn SentimentClassifier,
) -> Result<SentimentPrediction, MetricError> {
    classifier
        .classify_batch(&[text])?
        .pop()
        .ok_or_else(|| MetricError::Protocol("classifier returned no result".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupEval {
    pub true_histogram: LabelHistogram,
    pub generated_histogram: LabelHistogram,
    pub kl: f64,
}

/// Label histograms of both lists and D(true || generated).
pub fn group_eval(
    true_labels: &[SentimentLabel],
    gen_labels: &[SentimentLabel],
    smoothing: f64,
) -> Result<GroupEval, EvalError> {
    if true_labels.len() != gen_labels.len() {
        return Err(EvalError::LengthMismatch(true_labels.len(), gen_labels.len()));
    }
    if true_labels.is_empty() {
        return Err(EvalError::Empty);
    }
    let t = LabelHistogram::from_labels(true_labels);
    let g = LabelHistogram::from_labels(gen_labels);
    Ok(GroupEval {
        kl: kl_divergence(&t, &g, smoothing)?,
        true_histogram: t,
        generated_histogram: g,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct F1Scores {
    pub weighted_f1: f64,
    pub macro_f1: f64,
    /// Positive, neutral, negative.
    pub per_class: [f64; 3],
}

/// Per-class F1 (0 where undefined), support-weighted over true labels and
/// unweighted over all three classes.
pub fn f1_scores(
    true_labels: &[SentimentLabel],
    pred_labels: &[SentimentLabel],
) -> Result<F1Scores, EvalError> {
    if true_labels.len() != pred_labels.len() {
        return Err(EvalError::LengthMismatch(true_labels.len(), pred_labels.len()));
    }
    if true_labels.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut tp = [0usize; 3];
    let mut predicted = [0usize; 3];
    let mut support = [0usize; 3];
    for (t, p) in true_labels.iter().zip(pred_labels) {
        support[t.index()] += 1;
        predicted[p.index()] += 1;
        if t == p {
            tp[t.index()] += 1;
        }
    }
    let mut per_class = [0.0; 3];
    for c in 0..3 {
        let precision = if predicted[c] == 0 {
            0.0
        } else {
            tp[c] as f64 / predicted[c] as f64
        };
        let recall = if support[c] == 0 {
            0.0
        } else {
            tp[c] as f64 / support[c] as f64
        };
        per_class[c] = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
    }
    let n = true_labels.len() as f64;
    Ok(F1Scores {
        weighted_f1: (0..3).map(|c| support[c] as f64 / n * per_class[c]).sum(),
        macro_f1: per_class.iter().sum::<f64>() / 3.0,
        per_class,
    })
}
