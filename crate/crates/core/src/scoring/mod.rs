//! Image/text scores and the unified preference metric.
//!
//! Three raw scores are computed per generated image: a CLIP-style
//! similarity `2.5 * max(cos, 0)`, a reward-model scalar, and an HPS-style
//! `similarity / tau`. Each is min-max normalized over a comparison
//! population (a [`NormalizationContext`]), the three normalized values are
//! averaged per image, and the per-image values are averaged over seeds.
//!
//! The same number serves as evaluation metric and as alignment reward.
//! Images are represented by feature vectors produced by a
//! [`GenerationBackend`]; scorers are [`ScorerBackend`]s.

use std::collections::HashSet;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{Instruction, T2IApi};
use crate::strategy::{options, StrategyError, StrategyTable};
use crate::util::order_free_mean;

pub mod remote;
pub mod styleworld;

pub use styleworld::{StyleWorld, StyleWorldSpec};

/// CLIP score weight.
pub const CLIP_WEIGHT: f64 = 2.5;

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("scorer unavailable: {0}")]
    ScorerUnavailable(String),
    #[error("temperature must be positive, got {0}")]
    NonpositiveTau(f64),
    #[error("raw scores are not part of the normalization population")]
    PopulationMismatch,
    #[error("invalid backend spec: {0}")]
    InvalidSpec(String),
    #[error("generation backend has no model `{0}`")]
    UnknownModel(String),
    #[error("need at least one seed")]
    NoSeeds,
}

pub type Result<T> = std::result::Result<T, ScoringError>;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Provenance {
    pub api_id: String,
    pub prompt_hash: u64,
    pub seed: u64,
}

/// Feature representation of a generated image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageFeatures {
    pub vector: Vec<f64>,
    pub unit_norm: bool,
    pub provenance: Provenance,
}

pub trait GenerationBackend: Send + Sync {
    fn name(&self) -> &str;
    /// Length of every feature vector this backend produces.
    fn dimension(&self) -> usize;
    fn generate(&self, api: &T2IApi, instruction: &Instruction, seed: u64) -> Result<ImageFeatures>;
}

pub trait ScorerBackend: Send + Sync {
    fn name(&self) -> &str;
    /// Length of text and image embeddings.
    fn dimension(&self) -> usize;
    fn embed_text(&self, prompt: &str) -> Result<Vec<f64>>;
    fn embed_image(&self, x: &ImageFeatures) -> Result<Vec<f64>>;
    fn reward_scalar(&self, prompt: &str, x: &ImageFeatures) -> Result<f64>;
    /// Learned temperature of the HPS head.
    fn tau(&self) -> f64;

    /// Text/image similarity fed to the HPS head.
    fn hps_similarity(&self, prompt: &str, x: &ImageFeatures) -> Result<f64> {
        let t = self.embed_text(prompt)?;
        let i = self.embed_image(x)?;
        dot(&t, &i)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(ScoringError::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum())
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let d = dot(a, b)?;
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((d / (na * nb)).clamp(-1.0, 1.0))
}

/// `2.5 * max(cos(text, image), 0)`; the negative prompt is not used.
pub fn clip_score(t: &Instruction, x: &ImageFeatures, b: &dyn ScorerBackend) -> Result<f64> {
    let text = b.embed_text(&t.prompt)?;
    let image = b.embed_image(x)?;
    Ok(clip_from_cosine(cosine(&text, &image)?))
}

pub fn clip_from_cosine(cos: f64) -> f64 {
    CLIP_WEIGHT * cos.max(0.0)
}

/// Reward-model scalar, passed through unchanged (it may be negative).
pub fn image_reward_score(t: &Instruction, x: &ImageFeatures, b: &dyn ScorerBackend) -> Result<f64> {
    b.reward_scalar(&t.prompt, x)
}

/// `similarity / tau`.
pub fn hps_score(t: &Instruction, x: &ImageFeatures, b: &dyn ScorerBackend) -> Result<f64> {
    let tau = b.tau();
    if !(tau > 0.0) {
        return Err(ScoringError::NonpositiveTau(tau));
    }
    Ok(b.hps_similarity(&t.prompt, x)? / tau)
}

/// Raw scores of one image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreTriple {
    pub clip: f64,
    pub image_reward: f64,
    pub hps: f64,
}

impl ScoreTriple {
    pub fn as_array(&self) -> [f64; 3] {
        [self.clip, self.image_reward, self.hps]
    }

    fn key(&self) -> [u64; 3] {
        self.as_array().map(f64::to_bits)
    }
}

pub fn score_triple(t: &Instruction, x: &ImageFeatures, b: &dyn ScorerBackend) -> Result<ScoreTriple> {
    Ok(ScoreTriple {
        clip: clip_score(t, x, b)?,
        image_reward: image_reward_score(t, x, b)?,
        hps: hps_score(t, x, b)?,
    })
}

fn min_max(v: f64, lo: f64, hi: f64) -> f64 {
    if hi == lo {
        0.5
    } else {
        (v - lo) / (hi - lo)
    }
}

/// Min-max normalization to `[0, 1]`; a constant population maps to 0.5.
pub fn normalize_scores(raw: &[f64]) -> Vec<f64> {
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    raw.iter().map(|&v| min_max(v, lo, hi)).collect()
}

/// Per-metric raw-score population of one comparison batch.
#[derive(Debug, Clone)]
pub struct NormalizationContext {
    lo: [f64; 3],
    hi: [f64; 3],
    members: HashSet<[u64; 3]>,
}

impl NormalizationContext {
    pub fn from_triples<'a, I>(triples: I) -> Self
    where
        I: IntoIterator<Item = &'a ScoreTriple>,
    {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        let mut members = HashSet::new();
        for t in triples {
            for (m, v) in t.as_array().into_iter().enumerate() {
                lo[m] = lo[m].min(v);
                hi[m] = hi[m].max(v);
            }
            members.insert(t.key());
        }
        NormalizationContext { lo, hi, members }
    }

    pub fn contains(&self, t: &ScoreTriple) -> bool {
        self.members.contains(&t.key())
    }

    /// Normalized `[clip, image_reward, hps]`.
    pub fn normalize(&self, t: &ScoreTriple) -> Result<[f64; 3]> {
        if !self.contains(t) {
            return Err(ScoringError::PopulationMismatch);
        }
        let a = t.as_array();
        Ok([0, 1, 2].map(|m| min_max(a[m], self.lo[m], self.hi[m])))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnifiedScore {
    pub value: f64,
    pub per_image: Vec<f64>,
    pub k: usize,
}

/// Combines already-computed raw triples of one response.
pub fn unified_from_triples(triples: &[ScoreTriple], ctx: &NormalizationContext) -> Result<UnifiedScore> {
    if triples.is_empty() {
        return Err(ScoringError::NoSeeds);
    }
    let per_image = triples
        .iter()
        .map(|t| ctx.normalize(t).map(|[c, i, h]| (c + i + h) / 3.0))
        .collect::<Result<Vec<_>>>()?;
    Ok(UnifiedScore { value: order_free_mean(&per_image), per_image, k: triples.len() })
}

/// Raw triples of response `r` for each seed.
pub fn raw_triples(
    t: &Instruction,
    r: &T2IApi,
    seeds: &[u64],
    gen: &dyn GenerationBackend,
    b: &dyn ScorerBackend,
) -> Result<Vec<ScoreTriple>> {
    seeds
        .iter()
        .map(|&s| {
            let x = gen.generate(r, t, s)?;
            score_triple(t, &x, b)
        })
        .collect()
}

/// Unified score of `r` for prompt `t` over `seeds`, normalized within `ctx`.
pub fn unified_score(
    t: &Instruction,
    r: &T2IApi,
    seeds: &[u64],
    gen: &dyn GenerationBackend,
    b: &dyn ScorerBackend,
    ctx: &NormalizationContext,
) -> Result<UnifiedScore> {
    if seeds.is_empty() {
        return Err(ScoringError::NoSeeds);
    }
    unified_from_triples(&raw_triples(t, r, seeds, gen, b)?, ctx)
}

/// Scores of a set of responses compared against each other.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchScores {
    pub raw: Vec<Vec<ScoreTriple>>,
    pub unified: Vec<UnifiedScore>,
}

/// Scores every response of one comparison batch with a shared normalization
/// population. Raw scores are computed in parallel and merged in order.
pub fn score_batch(
    t: &Instruction,
    responses: &[T2IApi],
    seeds: &[u64],
    backends: &Backends,
) -> Result<BatchScores> {
    if seeds.is_empty() {
        return Err(ScoringError::NoSeeds);
    }
    let raw = responses
        .par_iter()
        .map(|r| raw_triples(t, r, seeds, backends.generation.as_ref(), backends.scorer.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let ctx = NormalizationContext::from_triples(raw.iter().flatten());
    let unified = raw.iter().map(|tr| unified_from_triples(tr, &ctx)).collect::<Result<Vec<_>>>()?;
    Ok(BatchScores { raw, unified })
}

/// A generation backend paired with a scorer.
#[derive(Clone)]
pub struct Backends {
    pub generation: Arc<dyn GenerationBackend>,
    pub scorer: Arc<dyn ScorerBackend>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct StyleWorldOptions {
    world: std::path::PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RemoteOptions {
    /// World used for feature generation.
    world: std::path::PathBuf,
    #[serde(flatten)]
    scorer: remote::RemoteScorerOptions,
}

fn load_world(name: &str, path: &std::path::Path) -> std::result::Result<StyleWorld, StrategyError> {
    let err = |reason: String| StrategyError::Options { name: name.to_string(), reason };
    let text = std::fs::read_to_string(path).map_err(|e| err(format!("{}: {e}", path.display())))?;
    let spec: StyleWorldSpec = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
    StyleWorld::new(spec).map_err(|e| err(e.to_string()))
}

/// Backend strategies: `styleworld` (local generation and scoring) and
/// `remote` (local generation, scoring over HTTP).
pub fn backends() -> StrategyTable<Backends> {
    let mut t = StrategyTable::new("scoring backend");
    t.register("styleworld", |v| {
        let opts: StyleWorldOptions = options("styleworld", v)?;
        let world = Arc::new(load_world("styleworld", &opts.world)?);
        Ok(Backends { generation: world.clone(), scorer: world })
    })
    .register("remote", |v| {
        let opts: RemoteOptions = options("remote", v)?;
        let world = Arc::new(load_world("remote", &opts.world)?);
        let scorer = remote::RemoteScorer::new(opts.scorer)
            .map_err(|e| StrategyError::Options { name: "remote".into(), reason: e.to_string() })?;
        Ok(Backends { generation: world, scorer: Arc::new(scorer) })
    });
    t
}
