//! Ranking alignment of the policy against the unified preference score.
//!
//! For each prompt a [`CandidateSet`] is built from sampled and beam-decoded
//! responses (reconstructed against the registry, hallucinations dropped)
//! plus the registry's default response. Candidates are scored with the
//! unified metric, and the policy is updated with a pairwise hinge on
//! length-normalized log-probabilities plus cross-entropy on the best
//! candidate.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Hallucination, Registry};
use crate::policy::{
    render_snapped, sft_loss_and_grad, Decoder, DiverseBeamOptions, Example, MultinomialOptions, Policy, PolicyError,
    PolicyParams, DEFAULT_MAX_LEN,
};
use crate::schema::{Instruction, T2IApi, TokenSequence};
use crate::scoring::{score_batch, Backends, ScoringError};
use crate::util::{derive_seed, rng};

#[derive(Debug, Error)]
pub enum AlignmentError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error("candidate set has not been scored")]
    Unscored,
    #[error("registry is empty")]
    EmptyRegistry,
    #[error("alignment split is empty")]
    EmptySplit,
    #[error("invalid alignment config: {0}")]
    InvalidConfig(String),
    #[error("alignment diverged at epoch {epoch} (loss {loss})")]
    DivergenceDetected { epoch: usize, loss: f64 },
}

pub type Result<T> = std::result::Result<T, AlignmentError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Multinomial,
    DiverseBeam,
    Default,
    /// Second most-downloaded model, used when no sample survives.
    Fallback,
}

/// What happened to the raw decoded sequences of one prompt.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleStats {
    pub raw: usize,
    pub malformed: usize,
    pub unknown_model: usize,
    pub type_mismatch: usize,
    pub architecture_mismatch: usize,
    pub duplicates: usize,
    pub resampled: bool,
    pub fallback: bool,
}

impl SampleStats {
    pub fn hallucinated(&self) -> usize {
        self.malformed + self.unknown_model + self.type_mismatch + self.architecture_mismatch
    }

    fn record(&mut self, h: Hallucination) {
        match h {
            Hallucination::UnknownModel => self.unknown_model += 1,
            Hallucination::TypeMismatch => self.type_mismatch += 1,
            Hallucination::ArchitectureMismatch => self.architecture_mismatch += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub prompt: Instruction,
    pub responses: Vec<T2IApi>,
    pub origins: Vec<Origin>,
    /// Unified scores; empty until [`score_candidates`] runs.
    pub scores: Vec<f64>,
    /// Length-normalized log-probabilities under the policy that built the set.
    pub logprobs: Vec<f64>,
    pub stats: SampleStats,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    pub fn is_scored(&self) -> bool {
        self.scores.len() == self.responses.len()
    }

    /// Index of the highest score; ties go to the lowest index.
    pub fn best(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, s) in self.scores.iter().enumerate() {
            if best.is_none_or(|b| *s > self.scores[b]) {
                best = Some(i);
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RrhfConfig {
    /// Diverse-beam groups.
    pub m: usize,
    pub n_multinomial: usize,
    pub lambda: f64,
    pub temperature: f64,
    /// Image seeds per candidate.
    pub k: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub max_len: usize,
    /// Build and score candidates once, then reuse them every epoch.
    pub cache_candidates: bool,
}

impl Default for RrhfConfig {
    fn default() -> Self {
        RrhfConfig {
            m: 4,
            n_multinomial: 2,
            lambda: 0.5,
            temperature: 1.0,
            k: 10,
            lr: 0.5,
            epochs: 3,
            seed: 0,
            max_len: DEFAULT_MAX_LEN,
            cache_candidates: false,
        }
    }
}

impl RrhfConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AlignmentError::InvalidConfig(m.into()));
        if self.m == 0 {
            return bad("m must be at least 1");
        }
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be nonnegative");
        }
        if self.max_len == 0 {
            return bad("max_len must be positive");
        }
        Ok(())
    }
}

/// Image seeds shared by every candidate of one comparison.
pub fn reward_seeds(seed: u64, k: usize) -> Vec<u64> {
    (0..k as u64).map(|i| derive_seed(seed, &[b"reward", &i.to_le_bytes()])).collect()
}

struct Collector<'a> {
    registry: &'a Registry,
    policy: &'a Policy,
    default: T2IApi,
    seen: BTreeSet<String>,
    responses: Vec<T2IApi>,
    origins: Vec<Origin>,
    stats: SampleStats,
}

impl Collector<'_> {
    fn offer(&mut self, seq: &TokenSequence, origin: Origin) {
        self.stats.raw += 1;
        let info = match self.policy.vocab.parse_model_info_prefix(seq) {
            Ok(info) => info,
            Err(_) => {
                self.stats.malformed += 1;
                return;
            }
        };
        let api = match self.registry.reconstruct_full_response(&info) {
            Ok(api) => api,
            Err(h) => {
                self.stats.record(h);
                return;
            }
        };
        if api == self.default || !self.seen.insert(api.info.model.clone()) {
            self.stats.duplicates += 1;
            return;
        }
        self.responses.push(api);
        self.origins.push(origin);
    }
}

/// Decodes, reconstructs and deduplicates candidates for one prompt, then
/// appends the default response. If no decoded candidate survives, sampling
/// is repeated once; after that the second most-downloaded model is used.
pub fn build_candidates(
    policy: &Policy,
    prompt: &Instruction,
    registry: &Registry,
    cfg: &RrhfConfig,
    seed: u64,
) -> Result<CandidateSet> {
    let default = registry.default_response().ok_or(AlignmentError::EmptyRegistry)?;
    let tokens = policy.vocab.encode_prompt(&prompt.prompt);
    let sampler = MultinomialOptions { samples: cfg.n_multinomial, temperature: cfg.temperature, max_len: cfg.max_len };
    let beam = DiverseBeamOptions { groups: cfg.m, lambda: cfg.lambda, max_len: cfg.max_len };
    let mut c = Collector {
        registry,
        policy,
        default: default.clone(),
        seen: BTreeSet::new(),
        responses: Vec::new(),
        origins: Vec::new(),
        stats: SampleStats::default(),
    };
    for seq in sampler.decode(policy, &tokens, seed)? {
        c.offer(&seq, Origin::Multinomial);
    }
    for seq in beam.decode(policy, &tokens, seed)? {
        c.offer(&seq, Origin::DiverseBeam);
    }
    if c.responses.is_empty() && cfg.n_multinomial > 0 {
        c.stats.resampled = true;
        for seq in sampler.decode(policy, &tokens, derive_seed(seed, &[b"resample"]))? {
            c.offer(&seq, Origin::Multinomial);
        }
    }
    if c.responses.is_empty() {
        if let Some(e) = registry.by_downloads().get(1) {
            c.stats.fallback = true;
            c.responses.push(e.api());
            c.origins.push(Origin::Fallback);
        }
    }
    c.responses.push(default);
    c.origins.push(Origin::Default);
    let logprobs = c
        .responses
        .iter()
        .map(|r| candidate_logprob(policy, &tokens, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(CandidateSet {
        prompt: prompt.clone(),
        responses: c.responses,
        origins: c.origins,
        scores: Vec::new(),
        logprobs,
        stats: c.stats,
    })
}

fn candidate_logprob(policy: &Policy, prompt: &TokenSequence, r: &T2IApi) -> Result<f64> {
    Ok(policy.length_normalized_logprob(prompt, &render_snapped(&policy.vocab, r)?)?)
}

/// Unified scores over `seeds`, with one normalization population per set.
pub fn score_candidates(set: &mut CandidateSet, backends: &Backends, seeds: &[u64]) -> Result<()> {
    let out = score_batch(&set.prompt, &set.responses, seeds, backends)?;
    set.scores = out.unified.iter().map(|u| u.value).collect();
    Ok(())
}

/// Canonical tokens of every candidate, paired with the prompt tokens.
fn examples(policy: &Policy, set: &CandidateSet) -> Result<Vec<Example>> {
    let prompt = policy.vocab.encode_prompt(&set.prompt.prompt);
    set.responses
        .iter()
        .map(|r| Ok(Example { prompt: prompt.clone(), response: render_snapped(&policy.vocab, r)? }))
        .collect()
}

/// Hinge `max(0, p_i - p_j)` summed over ordered pairs with `s_i < s_j`,
/// with the net coefficient of each `p_i` in the active terms.
pub fn rank_hinge(p: &[f64], s: &[f64]) -> (f64, Vec<f64>) {
    let mut coef = vec![0.0; p.len()];
    let mut loss = 0.0;
    for i in 0..p.len() {
        for j in 0..p.len() {
            if s[i] < s[j] && p[i] > p[j] {
                loss += p[i] - p[j];
                coef[i] += 1.0;
                coef[j] -= 1.0;
            }
        }
    }
    (loss, coef)
}

/// [`rank_hinge`] on the policy's length-normalized log-probabilities of
/// each candidate's canonical rendering, with its exact gradient.
pub fn rank_loss(policy: &Policy, set: &CandidateSet) -> Result<(f64, PolicyParams)> {
    if !set.is_scored() {
        return Err(AlignmentError::Unscored);
    }
    let ex = examples(policy, set)?;
    let p = ex
        .iter()
        .map(|e| Ok(policy.length_normalized_logprob(&e.prompt, &e.response)?))
        .collect::<Result<Vec<f64>>>()?;
    let (loss, coef) = rank_hinge(&p, &set.scores);
    let mut grad = PolicyParams::zeros(policy.layout());
    for (e, c) in ex.iter().zip(&coef) {
        if *c != 0.0 {
            let f = policy.prompt_features(&e.prompt)?;
            policy.accumulate_logprob_grad(&f, &e.response, c / e.response.len() as f64, &mut grad)?;
        }
    }
    Ok((loss, grad))
}

/// Negative log-likelihood of the best-scoring candidate.
pub fn best_response_ce_loss(policy: &Policy, set: &CandidateSet) -> Result<(f64, PolicyParams)> {
    let best = set.best().ok_or(AlignmentError::Unscored)?;
    if !set.is_scored() {
        return Err(AlignmentError::Unscored);
    }
    let ex = examples(policy, set)?;
    Ok(sft_loss_and_grad(policy, std::slice::from_ref(&ex[best]))?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RrhfLoss {
    pub total: f64,
    pub rank: f64,
    pub ce: f64,
    pub grad: PolicyParams,
}

/// Unweighted sum of the ranking and cross-entropy terms.
pub fn rrhf_total_loss(policy: &Policy, set: &CandidateSet) -> Result<RrhfLoss> {
    let (rank, mut grad) = rank_loss(policy, set)?;
    let (ce, g_ce) = best_response_ce_loss(policy, set)?;
    grad.axpy(1.0, &g_ce);
    Ok(RrhfLoss { total: rank + ce, rank, ce, grad })
}

/// One line of the alignment run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_rank_loss: f64,
    pub mean_ce_loss: f64,
    /// Share of raw decoded sequences that failed parsing or reconstruction.
    pub raw_hallucination_rate: f64,
    pub mean_best_score: f64,
}

fn build_scored(
    policy: &Policy,
    prompt: &Instruction,
    registry: &Registry,
    backends: &Backends,
    cfg: &RrhfConfig,
    seed: u64,
) -> Result<CandidateSet> {
    let mut set = build_candidates(policy, prompt, registry, cfg, seed)?;
    score_candidates(&mut set, backends, &reward_seeds(seed, cfg.k))?;
    Ok(set)
}

/// Per-prompt gradient steps over the alignment prompts, in a seeded order.
pub fn train_rrhf(
    policy: &Policy,
    prompts: &[Instruction],
    registry: &Registry,
    backends: &Backends,
    cfg: &RrhfConfig,
) -> Result<(Policy, Vec<EpochRecord>)> {
    cfg.validate()?;
    if prompts.is_empty() {
        return Err(AlignmentError::EmptySplit);
    }
    if registry.is_empty() {
        return Err(AlignmentError::EmptyRegistry);
    }
    let mut p = policy.clone();
    let mut order: Vec<usize> = (0..prompts.len()).collect();
    let mut shuffle = rng(derive_seed(cfg.seed, &[b"order"]));
    let mut cache: Vec<Option<CandidateSet>> = vec![None; prompts.len()];
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        let (mut loss, mut rank, mut ce, mut best) = (0.0, 0.0, 0.0, 0.0);
        let (mut raw, mut hallucinated) = (0usize, 0usize);
        for &i in &order {
            let set = match &cache[i] {
                Some(set) => set.clone(),
                None => {
                    let seed = derive_seed(cfg.seed, &[&(epoch as u64).to_le_bytes(), &(i as u64).to_le_bytes()]);
                    let set = build_scored(&p, &prompts[i], registry, backends, cfg, seed)?;
                    if cfg.cache_candidates {
                        cache[i] = Some(set.clone());
                    }
                    set
                }
            };
            let l = rrhf_total_loss(&p, &set)?;
            if !l.total.is_finite() {
                return Err(AlignmentError::DivergenceDetected { epoch, loss: l.total });
            }
            p.params.axpy(-cfg.lr, &l.grad);
            if !p.params.is_finite() {
                return Err(AlignmentError::DivergenceDetected { epoch, loss: f64::NAN });
            }
            loss += l.total;
            rank += l.rank;
            ce += l.ce;
            best += set.best().map_or(0.0, |b| set.scores[b]);
            raw += set.stats.raw;
            hallucinated += set.stats.hallucinated();
        }
        let n = prompts.len() as f64;
        let rec = EpochRecord {
            epoch,
            mean_loss: loss / n,
            mean_rank_loss: rank / n,
            mean_ce_loss: ce / n,
            raw_hallucination_rate: if raw == 0 { 0.0 } else { hallucinated as f64 / raw as f64 },
            mean_best_score: best / n,
        };
        log::info!(
            "rrhf epoch {epoch}: loss {:.4} (rank {:.4}, ce {:.4}), raw hallucination {:.3}, best score {:.4}",
            rec.mean_loss,
            rec.mean_rank_loss,
            rec.mean_ce_loss,
            rec.raw_hallucination_rate,
            rec.mean_best_score
        );
        log.push(rec);
    }
    Ok((p, log))
}
