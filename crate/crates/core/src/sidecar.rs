//! Client for the scoring sidecar: `POST /v1/score`, `POST /v1/sentiment`
//! and `GET /v1/health`, JSON over HTTP/1.1.

use std::time::Duration;

use reqwest::blocking::Client;
use serde::{Deserialize, Serialize};

use crate::downstream::{SentimentClassifier, SentimentPrediction};
use crate::labels::SentimentLabel;
use crate::metrics::{MetricError, ScoreKind, SimilarityScore, SimilarityScorer};

pub const DEFAULT_SCORE_MODEL: &str = "roberta-large";
pub const DEFAULT_SENTIMENT_MODEL: &str = "cardiffnlp/twitter-roberta-base-sentiment-latest";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorePair {
    pub candidate: String,
    pub reference: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub pairs: Vec<ScorePair>,
    pub model_id: String,
    pub rescale: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreTriple {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub scores: Vec<ScoreTriple>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentimentRequest {
    pub texts: Vec<String>,
    pub model_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SentimentScores {
    pub positive: f64,
    pub neutral: f64,
    pub negative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentimentResult {
    pub label: SentimentLabel,
    pub scores: SentimentScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentimentResponse {
    pub results: Vec<SentimentResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    #[serde(default)]
    pub loaded_models: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SidecarConfig {
    pub base_url: String,
    pub score_model: String,
    pub sentiment_model: String,
    pub rescale: bool,
    pub batch_size: usize,
    pub timeout: Duration,
}

impl SidecarConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_owned(),
            score_model: DEFAULT_SCORE_MODEL.into(),
            sentiment_model: DEFAULT_SENTIMENT_MODEL.into(),
            rescale: false,
            batch_size: 32,
            timeout: Duration::from_secs(120),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SidecarClient {
    cfg: SidecarConfig,
    http: Client,
}

impl SidecarClient {
    pub fn new(cfg: SidecarConfig) -> Result<Self, MetricError> {
        let http = Client::builder()
            .timeout(cfg.timeout)
            .build()
            .map_err(|e| MetricError::Protocol(e.to_string()))?;
        Ok(Self { cfg, http })
    }

    pub fn config(&self) -> &SidecarConfig {
        &self.cfg
    }

    fn unreachable(&self, e: impl ToString) -> MetricError {
        MetricError::Unreachable {
            endpoint: self.cfg.base_url.clone(),
            reason: e.to_string(),
        }
    }

    fn post<Req: Serialize, Resp: for<'de> Deserialize<'de>>(
        &self,
        path: &str,
        body: &Req,
    ) -> Result<Resp, MetricError> {
        let resp = self
            .http
            .post(format!("{}{path}", self.cfg.base_url))
            .json(body)
            .send()
            .map_err(|e| self.unreachable(e))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| self.unreachable(e))?;
        if !status.is_success() {
            return Err(MetricError::Protocol(format!("{path} returned {status}: {text}")));
        }
        serde_json::from_str(&text).map_err(|e| MetricError::Protocol(format!("{path}: {e}")))
    }

    pub fn health(&self) -> Result<Health, MetricError> {
        let resp = self
            .http
            .get(format!("{}/v1/health", self.cfg.base_url))
            .send()
            .map_err(|e| self.unreachable(e))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(MetricError::Protocol(format!("/v1/health returned {status}")));
        }
        resp.json().map_err(|e| MetricError::Protocol(e.to_string()))
    }

    /// Scores pairs in batches of `batch_size`, preserving order.
    pub fn score(&self, pairs: &[(&str, &str)]) -> Result<Vec<ScoreTriple>, MetricError> {
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(self.cfg.batch_size.max(1)) {
            let req = ScoreRequest {
                pairs: chunk
                    .iter()
                    .map(|(c, r)| ScorePair {
                        candidate: (*c).to_owned(),
                        reference: (*r).to_owned(),
                    })
                    .collect(),
                model_id: self.cfg.score_model.clone(),
                rescale: self.cfg.rescale,
            };
            let resp: ScoreResponse = self.post("/v1/score", &req)?;
            if resp.scores.len() != chunk.len() {
                return Err(MetricError::Protocol(format!(
                    "/v1/score returned {} scores for {} pairs",
                    resp.scores.len(),
                    chunk.len()
                )));
            }
            out.extend(resp.scores);
        }
        Ok(out)
    }

    pub fn sentiment(&self, texts: &[&str]) -> Result<Vec<SentimentResult>, MetricError> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.cfg.batch_size.max(1)) {
            let req = SentimentRequest {
                texts: chunk.iter().map(|t| (*t).to_owned()).collect(),
                model_id: self.cfg.sentiment_model.clone(),
            };
            let resp: SentimentResponse = self.post("/v1/sentiment", &req)?;
            if resp.results.len() != chunk.len() {
                return Err(MetricError::Protocol(format!(
                    "/v1/sentiment returned {} results for {} texts",
                    resp.results.len(),
                    chunk.len()
                )));
            }
            out.extend(resp.results);
        }
        Ok(out)
    }
}

/// Semantic scorer backed by the sidecar's `/v1/score`.
#[derive(Debug, Clone)]
pub struct SidecarScorer {
    client: SidecarClient,
}

impl SidecarScorer {
    pub fn new(client: SidecarClient) -> Self {
        Self { client }
    }
}

impl SimilarityScorer for SidecarScorer {
    fn kind(&self) -> ScoreKind {
        ScoreKind::SemanticExternal
    }

    fn score_batch(&self, pairs: &[(&str, &str)]) -> Result<Vec<SimilarityScore>, MetricError> {
        Ok(self
            .client
            .score(pairs)?
            .into_iter()
            .map(|t| SimilarityScore {
                precision: t.precision,
                recall: t.recall,
                f: t.f1,
                kind: ScoreKind::SemanticExternal,
            })
            .collect())
    }
}

/// Sentiment classifier backed by the sidecar's `/v1/sentiment`.
#[derive(Debug, Clone)]
pub struct SidecarSentiment {
    client: SidecarClient,
}

impl SidecarSentiment {
    pub fn new(client: SidecarClient) -> Self {
        Self { client }
    }
}

impl SentimentClassifier for SidecarSentiment {
    fn classify_batch(&self, texts: &[&str]) -> Result<Vec<SentimentPrediction>, MetricError> {
        self.client
            .sentiment(texts)?
            .into_iter()
            .map(|r| {
                let s = r.scores;
                let pred = SentimentPrediction::from_scores([s.positive, s.neutral, s.negative])
                    .map_err(MetricError::Protocol)?;
                if pred.label != r.label {
                    return Err(MetricError::Protocol(format!(
                        "label {} is not the argmax of its scores",
                        r.label
                    )));
                }
                Ok(pred)
            })
            .collect()
    }
}
