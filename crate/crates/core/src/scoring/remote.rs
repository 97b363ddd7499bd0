//! Scorer backend that forwards every call to an HTTP service.
//!
//! Wire format: POST a JSON [`ScoreRequest`], receive a JSON
//! [`ScoreResponse`]. [`handle_request`] implements the server side on top
//! of any local [`ScorerBackend`], which is what the tests serve.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{ImageFeatures, Result, ScorerBackend, ScoringError};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteScorerOptions {
    pub url: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// Extra attempts after a transport failure.
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_tau")]
    pub tau: f64,
    pub dimension: usize,
}

fn default_timeout_ms() -> u64 {
    10_000
}

fn default_retries() -> u32 {
    2
}

fn default_tau() -> f64 {
    0.01
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreOp {
    EmbedText,
    EmbedImage,
    Reward,
    HpsSimilarity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub op: ScoreOp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<ImageFeatures>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vector: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub struct RemoteScorer {
    opts: RemoteScorerOptions,
    agent: ureq::Agent,
}

impl RemoteScorer {
    pub fn new(opts: RemoteScorerOptions) -> Result<Self> {
        if !(opts.tau > 0.0) {
            return Err(ScoringError::NonpositiveTau(opts.tau));
        }
        if opts.dimension == 0 {
            return Err(ScoringError::InvalidSpec("remote scorer dimension must be positive".into()));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(opts.timeout_ms)))
            .build()
            .into();
        Ok(RemoteScorer { opts, agent })
    }

    fn call(&self, req: &ScoreRequest) -> Result<ScoreResponse> {
        let mut last = String::new();
        for attempt in 0..=self.opts.retries {
            match self.agent.post(&self.opts.url).send_json(req).and_then(|mut r| r.body_mut().read_json::<ScoreResponse>()) {
                Ok(resp) => {
                    if let Some(e) = resp.error {
                        return Err(ScoringError::ScorerUnavailable(e));
                    }
                    return Ok(resp);
                }
                Err(e) => {
                    log::debug!("remote scorer attempt {attempt} failed: {e}");
                    last = e.to_string();
                }
            }
        }
        Err(ScoringError::ScorerUnavailable(last))
    }

    fn scalar(&self, req: ScoreRequest) -> Result<f64> {
        self.call(&req)?
            .value
            .ok_or_else(|| ScoringError::ScorerUnavailable("response without `value`".into()))
    }

    fn vector(&self, req: ScoreRequest) -> Result<Vec<f64>> {
        let v = self
            .call(&req)?
            .vector
            .ok_or_else(|| ScoringError::ScorerUnavailable("response without `vector`".into()))?;
        if v.len() != self.opts.dimension {
            return Err(ScoringError::DimensionMismatch { expected: self.opts.dimension, got: v.len() });
        }
        Ok(v)
    }
}

impl ScorerBackend for RemoteScorer {
    fn name(&self) -> &str {
        "remote"
    }

    fn dimension(&self) -> usize {
        self.opts.dimension
    }

    fn embed_text(&self, prompt: &str) -> Result<Vec<f64>> {
        self.vector(ScoreRequest { op: ScoreOp::EmbedText, prompt: Some(prompt.into()), features: None })
    }

    fn embed_image(&self, x: &ImageFeatures) -> Result<Vec<f64>> {
        self.vector(ScoreRequest { op: ScoreOp::EmbedImage, prompt: None, features: Some(x.clone()) })
    }

    fn reward_scalar(&self, prompt: &str, x: &ImageFeatures) -> Result<f64> {
        self.scalar(ScoreRequest { op: ScoreOp::Reward, prompt: Some(prompt.into()), features: Some(x.clone()) })
    }

    fn hps_similarity(&self, prompt: &str, x: &ImageFeatures) -> Result<f64> {
        self.scalar(ScoreRequest { op: ScoreOp::HpsSimilarity, prompt: Some(prompt.into()), features: Some(x.clone()) })
    }

    fn tau(&self) -> f64 {
        self.opts.tau
    }
}

/// Server side of the protocol, answering with `backend`.
pub fn handle_request(backend: &dyn ScorerBackend, req: &ScoreRequest) -> ScoreResponse {
    let missing = |what: &str| ScoringError::InvalidSpec(format!("request without `{what}`"));
    let prompt = || req.prompt.as_deref().ok_or_else(|| missing("prompt"));
    let features = || req.features.as_ref().ok_or_else(|| missing("features"));
    let out: Result<ScoreResponse> = (|| {
        Ok(match req.op {
            ScoreOp::EmbedText => vector_response(backend.embed_text(prompt()?)?),
            ScoreOp::EmbedImage => vector_response(backend.embed_image(features()?)?),
            ScoreOp::Reward => value_response(backend.reward_scalar(prompt()?, features()?)?),
            ScoreOp::HpsSimilarity => value_response(backend.hps_similarity(prompt()?, features()?)?),
        })
    })();
    out.unwrap_or_else(|e| ScoreResponse { value: None, vector: None, error: Some(e.to_string()) })
}

fn vector_response(v: Vec<f64>) -> ScoreResponse {
    ScoreResponse { value: None, vector: Some(v), error: None }
}

fn value_response(v: f64) -> ScoreResponse {
    ScoreResponse { value: Some(v), vector: None, error: None }
}
