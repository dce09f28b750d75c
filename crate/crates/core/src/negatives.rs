//! Incorrect reviews for contrastive turns: other users' reviews picked by
//! similarity to the true review, or reviews generated by the model itself.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{EvalInstance, ReferencePool, Review};
use crate::forge::{conversation_until, first_negative_turn, Conversation, ForgeError, PromptTemplates};
use crate::gateway::{CacheMode, Gateway, GatewayError, Generation, ModelHandle};
use crate::metrics::{MetricError, SimilarityScorer};

#[derive(Debug, Error)]
pub enum NegativeError {
    #[error("no candidate left for turn {0} after excluding copies of the true review")]
    PoolExhausted(usize),
    #[error("no reference pool for item {0}")]
    MissingPool(String),
    #[error("turn count {turns} invalid for history length {n}")]
    BadTurns { turns: usize, n: usize },
    #[error("generated negative for turn {0} repeated the true review twice")]
    GeneratedCopiesTruth(usize),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Forge(#[from] ForgeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSource {
    OtherUserHigh,
    OtherUserLow,
    Generated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectMode {
    Highest,
    Lowest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativeAssignment {
    /// 1-based history position the negative precedes.
    pub turn: usize,
    pub text: String,
    pub source: NegativeSource,
    /// Similarity to the true review, for scored selections.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    /// Author of the chosen review, for other-user selections.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub author: Option<String>,
}

impl NegativeAssignment {
    /// An externally supplied negative text (tests, replays).
    pub fn fixed(turn: usize, text: impl Into<String>) -> Self {
        Self {
            turn,
            text: text.into(),
            source: NegativeSource::OtherUserHigh,
            score: None,
            author: None,
        }
    }
}

/// Picks the pool review scoring highest (or lowest) against the true
/// review, skipping exact copies of it. Ties go to the earliest candidate.
pub fn select_negative(
    turn: usize,
    pool: &ReferencePool,
    true_review: &Review,
    scorer: &dyn SimilarityScorer,
    mode: SelectMode,
) -> Result<NegativeAssignment, NegativeError> {
    let candidates: Vec<&Review> = pool
        .reviews
        .iter()
        .filter(|r| r.text != true_review.text)
        .collect();
    if candidates.is_empty() {
        return Err(NegativeError::PoolExhausted(turn));
    }
    let pairs: Vec<(&str, &str)> = candidates
        .iter()
        .map(|r| (r.text.as_str(), true_review.text.as_str()))
        .collect();
    let scores = scorer.score_batch(&pairs)?;
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        let better = match mode {
            SelectMode::Highest => s.f > scores[best].f,
            SelectMode::Lowest => s.f < scores[best].f,
        };
        if better {
            best = i;
        }
    }
    Ok(NegativeAssignment {
        turn,
        text: candidates[best].text.clone(),
        source: match mode {
            SelectMode::Highest => NegativeSource::OtherUserHigh,
            SelectMode::Lowest => NegativeSource::OtherUserLow,
        },
        score: Some(scores[best].f),
        author: Some(candidates[best].user_id.clone()),
    })
}

/// Scored negatives for the `negatives` most recent turns.
pub fn select_negatives<'p>(
    instance: &EvalInstance,
    negatives: usize,
    pools: impl Fn(&str) -> Option<&'p ReferencePool>,
    scorer: &dyn SimilarityScorer,
    mode: SelectMode,
) -> Result<BTreeMap<usize, NegativeAssignment>, NegativeError> {
    let n = instance.n();
    (first_negative_turn(n, negatives)..=n)
        .map(|k| {
            let entry = instance.entry(k);
            let pool = pools(&entry.item.item_id)
                .ok_or_else(|| NegativeError::MissingPool(entry.item.item_id.clone()))?;
            Ok((k, select_negative(k, pool, &entry.review, scorer, mode)?))
        })
        .collect()
}

/// One model call made while generating negatives.
#[derive(Debug, Clone)]
pub struct NegativeCall {
    pub turn: usize,
    pub conversation: Conversation,
    pub generation: Generation,
}

#[derive(Debug, Clone)]
pub struct GeneratedNegatives {
    pub assignments: BTreeMap<usize, NegativeAssignment>,
    pub calls: Vec<NegativeCall>,
}

/// Generates a negative for each of the last `turns` history reviews by
/// asking the model for that item, feeding back each negative with its
/// rejection and the true review before requesting the next one.
///
/// Makes `turns` model calls, plus one retry (bypassing the cache) for any
/// output that is empty or identical to the true review.
pub fn generate_negatives(
    templates: &PromptTemplates,
    instance: &EvalInstance,
    turns: usize,
    gateway: &Gateway,
    model: &ModelHandle,
) -> Result<GeneratedNegatives, NegativeError> {
    let n = instance.n();
    if turns == 0 || turns >= n {
        return Err(NegativeError::BadTurns { turns, n });
    }
    let mut assignments = BTreeMap::new();
    let mut calls = Vec::with_capacity(turns);
    for k in n - turns + 1..=n {
        let conv = conversation_until(templates, instance, turns, &assignments, k)?;
        let truth = &instance.entry(k).review.text;
        let mut generation = gateway.complete(model, &conv)?;
        let unusable = |g: &Generation| g.text.trim().is_empty() || g.text == *truth;
        if unusable(&generation) {
            calls.push(NegativeCall {
                turn: k,
                conversation: conv.clone(),
                generation,
            });
            generation = gateway.complete_with(model, &conv, CacheMode::Refresh)?;
            if unusable(&generation) {
                return Err(NegativeError::GeneratedCopiesTruth(k));
            }
        }
        assignments.insert(
            k,
            NegativeAssignment {
                turn: k,
                text: generation.text.clone(),
                source: NegativeSource::Generated,
                score: None,
                author: None,
            },
        );
        calls.push(NegativeCall {
            turn: k,
            conversation: conv,
            generation,
        });
    }
    Ok(GeneratedNegatives { assignments, calls })
}
