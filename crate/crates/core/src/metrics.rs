//! Lexical and semantic similarity scoring.
//!
//! [`rouge_l`] and [`lexical_fallback`] are computed in-process. Semantic
//! scores come from the scoring sidecar through [`crate::sidecar::SidecarScorer`];
//! every score carries its [`ScoreKind`] so that fallback numbers are never
//! reported as semantic ones.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("scoring sidecar unreachable at {endpoint}: {reason}")]
    Unreachable { endpoint: String, reason: String },
    #[error("scoring sidecar protocol violation: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    RougeL,
    SemanticExternal,
    LexicalFallback,
}

impl ScoreKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::RougeL => "rouge_l",
            ScoreKind::SemanticExternal => "semantic_external",
            ScoreKind::LexicalFallback => "lexical_fallback",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScore {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
    pub kind: ScoreKind,
}

impl SimilarityScore {
    /// Builds a score from precision and recall using the balanced F-measure.
    pub fn from_pr(precision: f64, recall: f64, kind: ScoreKind) -> Self {
        let f = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f,
            kind,
        }
    }
}

/// A similarity function over (candidate, reference) text pairs.
///
/// Implementations must be total over text pairs, including empty strings.
pub trait SimilarityScorer: Send + Sync {
    fn kind(&self) -> ScoreKind;

    /// Scores every pair, preserving input order.
    fn score_batch(&self, pairs: &[(&str, &str)]) -> Result<Vec<SimilarityScore>, MetricError>;

    fn score(&self, candidate: &str, reference: &str) -> Result<SimilarityScore, MetricError> {
        let mut out = self.score_batch(&[(candidate, reference)])?;
        out.pop()
            .ok_or_else(|| MetricError::Protocol("scorer returned no score".into()))
    }
}

/// NFKC-normalizes, lowercases and splits on runs of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    let normalized: String = text.nfkc().collect::<String>().to_lowercase();
    normalized
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Length of the longest common subsequence of two token sequences.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    // two rolling rows over the shorter sequence
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    let mut prev = vec![0usize; short.len() + 1];
    let mut cur = vec![0usize; short.len() + 1];
    for x in long {
        for (j, y) in short.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[short.len()]
}

/// ROUGE-L over pre-tokenized sequences (sentence-level LCS, beta = 1).
pub fn rouge_l_tokens<T: PartialEq>(candidate: &[T], reference: &[T]) -> SimilarityScore {
    let lcs = lcs_len(candidate, reference) as f64;
    let precision = if candidate.is_empty() {
        0.0
    } else {
        lcs / candidate.len() as f64
    };
    let recall = if reference.is_empty() {
        0.0
    } else {
        lcs / reference.len() as f64
    };
    SimilarityScore::from_pr(precision, recall, ScoreKind::RougeL)
}

pub fn rouge_l(candidate: &str, reference: &str) -> SimilarityScore {
    rouge_l_tokens(&tokenize(candidate), &tokenize(reference))
}

/// Unigram multiset-overlap F1, the offline stand-in for the semantic scorer.
pub fn lexical_fallback(candidate: &str, reference: &str) -> SimilarityScore {
    let cand = tokenize(candidate);
    let refr = tokenize(reference);
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &refr {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in &cand {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    let precision = if cand.is_empty() {
        0.0
    } else {
        overlap as f64 / cand.len() as f64
    };
    let recall = if refr.is_empty() {
        0.0
    } else {
        overlap as f64 / refr.len() as f64
    };
    SimilarityScore::from_pr(precision, recall, ScoreKind::LexicalFallback)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RougeLScorer;

impl SimilarityScorer for RougeLScorer {
    fn kind(&self) -> ScoreKind {
        ScoreKind::RougeL
    }

    fn score_batch(&self, pairs: &[(&str, &str)]) -> Result<Vec<SimilarityScore>, MetricError> {
        Ok(pairs.iter().map(|(c, r)| rouge_l(c, r)).collect())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalFallbackScorer;

impl SimilarityScorer for LexicalFallbackScorer {
    fn kind(&self) -> ScoreKind {
        ScoreKind::LexicalFallback
    }

    fn score_batch(&self, pairs: &[(&str, &str)]) -> Result<Vec<SimilarityScore>, MetricError> {
        Ok(pairs.iter().map(|(c, r)| lexical_fallback(c, r)).collect())
    }
}

/// Scores a pair against the sidecar. Callers that want the offline scorer must
/// select [`LexicalFallbackScorer`] themselves; nothing here substitutes it.
pub fn semantic_score(
    candidate: &str,
    reference: &str,
    scorer: &crate::sidecar::SidecarScorer,
) -> Result<SimilarityScore, MetricError> {
    scorer.score(candidate, reference)
}
