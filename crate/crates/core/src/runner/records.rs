use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::RunError;
use crate::downstream::{RankingResult, SentimentPrediction};
use crate::gateway::Usage;
use crate::metrics::SimilarityScore;
use crate::negatives::NegativeAssignment;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// CCP(G) pre-pass call.
    Negative,
    /// The method's own generation.
    Final,
    SelfRefineCritique,
    SelfRefineRewrite,
}

impl Stage {
    pub fn is_self_refine(self) -> bool {
        matches!(self, Stage::SelfRefineCritique | Stage::SelfRefineRewrite)
    }
}

/// One model call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub instance_id: String,
    pub method: String,
    pub model_name: String,
    pub stage: Stage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub turn: Option<usize>,
    pub conversation_hash: String,
    pub output_text: String,
    pub usage: Usage,
    pub cost_usd: f64,
    pub cached: bool,
    /// Unix seconds; 0 for mock providers.
    pub timestamp: i64,
}

/// Scores of a completed (model, instance, method) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellScores {
    pub rouge_l: SimilarityScore,
    pub semantic: SimilarityScore,
    pub ranking: RankingResult,
    pub sentiment_true: SentimentPrediction,
    pub sentiment_generated: SentimentPrediction,
}

/// Per (model, instance, method) outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRecord {
    pub instance_id: String,
    pub domain: String,
    pub model_name: String,
    pub method: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Hash of the conversation that produced `output_text`.
    #[serde(default)]
    pub conversation_hash: String,
    #[serde(default)]
    pub messages: usize,
    #[serde(default)]
    pub output_text: String,
    /// Output before self-refinement, when it was applied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_output: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub negatives: Vec<NegativeAssignment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<CellScores>,
    pub calls: usize,
    pub cost_usd: f64,
    pub refine_cost_usd: f64,
}

impl MethodRecord {
    pub fn is_complete(&self) -> bool {
        self.error.is_none() && self.scores.is_some()
    }
}

/// Random-selection reference ranking for one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomRecord {
    pub instance_id: String,
    pub ranking: RankingResult,
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), RunError> {
    let mut w = BufWriter::new(File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, RunError> {
    let reader = BufReader::new(File::open(path).map_err(|e| RunError::Io {
        path: path.to_owned(),
        source: e,
    })?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| RunError::Record(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}
