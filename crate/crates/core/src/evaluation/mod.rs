//! Measurement protocol: hallucination error of greedy decodes, unified
//! scores of the comparison variants with per-prompt paired normalization,
//! and recommendation latency.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::Registry;
use crate::policy::{greedy, Policy, PolicyError, DEFAULT_MAX_LEN};
use crate::schema::{ArchitectureFamily, Instruction, InstructionApiPair, ParamInfo, T2IApi, TokenSequence};
use crate::scoring::{raw_triples, unified_from_triples, Backends, NormalizationContext, ScoreTriple, ScoringError};
use crate::util::{derive_seed, order_free_mean};

pub const DEFAULT_IMAGES_PER_API: usize = 3;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation split is empty")]
    EmptySplit,
    #[error("registry has no baseline model for {0}")]
    NoBaseline(ArchitectureFamily),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// Baseline model with default parameters.
    Baseline,
    /// Baseline model with the aligned policy's parameters.
    ParamsOnly,
    /// Aligned policy's model with default parameters.
    ModelOnly,
    Sft,
    Rrhf,
}

impl Variant {
    pub const ALL: [Variant; 5] =
        [Variant::Baseline, Variant::ParamsOnly, Variant::ModelOnly, Variant::Sft, Variant::Rrhf];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "Baseline",
            Variant::ParamsOnly => "Params-only",
            Variant::ModelOnly => "Model-only",
            Variant::Sft => "SFT",
            Variant::Rrhf => "RRHF",
        }
    }
}

/// Result of decoding and validating one policy response.
#[derive(Debug, Clone, PartialEq)]
pub enum Decoded {
    Valid(T2IApi),
    Hallucinated(String),
}

/// Greedy decode, full parse, then registry validation. A valid response
/// keeps the decoded parameters and takes model metadata from the registry.
pub fn decode_response(policy: &Policy, prompt: &str, registry: &Registry) -> Result<Decoded, PolicyError> {
    let tokens = greedy(policy, &policy.vocab.encode_prompt(prompt), DEFAULT_MAX_LEN)?;
    Ok(validate_tokens(policy, &tokens, registry))
}

fn validate_tokens(policy: &Policy, tokens: &TokenSequence, registry: &Registry) -> Decoded {
    let parsed = match policy.vocab.parse_response_tokens(tokens) {
        Ok(api) => api,
        Err(e) => return Decoded::Hallucinated(e.to_string()),
    };
    match registry.reconstruct_full_response(&parsed.info) {
        Ok(full) => Decoded::Valid(T2IApi { info: full.info, params: parsed.params }),
        Err(h) => Decoded::Hallucinated(h.to_string()),
    }
}

/// Fraction of prompts whose greedy response fails parsing or validation.
pub fn hallucination_error(policy: &Policy, prompts: &[Instruction], registry: &Registry) -> Result<f64, EvalError> {
    if prompts.is_empty() {
        return Ok(0.0);
    }
    let failures = prompts
        .par_iter()
        .map(|t| decode_response(policy, &t.prompt, registry).map(|d| matches!(d, Decoded::Hallucinated(_))))
        .collect::<Result<Vec<bool>, _>>()?
        .into_iter()
        .filter(|f| *f)
        .count();
    Ok(failures as f64 / prompts.len() as f64)
}

/// Policies being compared.
#[derive(Debug, Clone, Copy)]
pub struct Policies<'a> {
    pub sft: &'a Policy,
    pub rrhf: &'a Policy,
}

/// Responses of every variant for one prompt, plus which policies hallucinated.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub responses: Vec<(Variant, T2IApi)>,
    pub sft_hallucinated: bool,
    pub rrhf_hallucinated: bool,
}

fn baseline_response(registry: &Registry, arch: ArchitectureFamily) -> Result<T2IApi, EvalError> {
    let e = registry.baseline(arch).ok_or(EvalError::NoBaseline(arch))?;
    Ok(T2IApi { info: e.info.clone(), params: ParamInfo::defaults(e.info.base_model) })
}

/// Resolves the response of `variant` for one prompt. Hallucinated policy
/// responses fall back to the baseline response (or its parts).
pub fn resolve_variant_response(
    variant: Variant,
    prompt: &str,
    arch: ArchitectureFamily,
    policies: Policies<'_>,
    registry: &Registry,
) -> Result<T2IApi, EvalError> {
    Ok(resolve_all(prompt, arch, policies, registry, &[variant])?.responses.remove(0).1)
}

fn resolve_all(
    prompt: &str,
    arch: ArchitectureFamily,
    policies: Policies<'_>,
    registry: &Registry,
    variants: &[Variant],
) -> Result<Resolved, EvalError> {
    let baseline = baseline_response(registry, arch)?;
    let sft = decode_response(policies.sft, prompt, registry)?;
    let rrhf = decode_response(policies.rrhf, prompt, registry)?;
    let valid = |d: &Decoded| match d {
        Decoded::Valid(api) => Some(api.clone()),
        Decoded::Hallucinated(_) => None,
    };
    let responses = variants
        .iter()
        .map(|&v| {
            let api = match v {
                Variant::Baseline => baseline.clone(),
                Variant::Sft => valid(&sft).unwrap_or_else(|| baseline.clone()),
                Variant::Rrhf => valid(&rrhf).unwrap_or_else(|| baseline.clone()),
                Variant::ParamsOnly => T2IApi {
                    info: baseline.info.clone(),
                    params: valid(&rrhf).map_or_else(|| baseline.params.clone(), |r| r.params),
                },
                Variant::ModelOnly => valid(&rrhf).map_or_else(
                    || baseline.clone(),
                    |r| T2IApi { params: ParamInfo::defaults(r.info.base_model), info: r.info },
                ),
            };
            (v, api)
        })
        .collect();
    Ok(Resolved {
        responses,
        sft_hallucinated: valid(&sft).is_none(),
        rrhf_hallucinated: valid(&rrhf).is_none(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    pub variants: Vec<Variant>,
    pub n_images: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { variants: Variant::ALL.to_vec(), n_images: DEFAULT_IMAGES_PER_API, seed: 0 }
    }
}

/// One variant's row of the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub variant: Variant,
    pub label: String,
    pub clip_mean: f64,
    pub image_reward_mean: f64,
    pub hps_mean: f64,
    pub unified_mean: f64,
    /// Greedy-decode hallucination rate; only for policy variants.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hallucination_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<VariantRow>,
    pub n_prompts: usize,
    pub n_images_per_api: usize,
    /// Set by [`timing_probe`] callers; absent by default so reports stay
    /// reproducible byte for byte.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time_per_response: Option<f64>,
    /// True when a backend failure cut the run short.
    pub partial: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl EvalReport {
    pub fn row(&self, v: Variant) -> Option<&VariantRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    /// Aligned text table; column order is fixed.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<12} {:>10} {:>12} {:>10} {:>10} {:>14}",
            "variant", "clip", "image_reward", "hps", "unified", "hallucination"
        );
        for r in &self.rows {
            let h = r.hallucination_rate.map_or_else(|| "-".to_string(), |h| format!("{h:.4}"));
            let _ = writeln!(
                out,
                "{:<12} {:>10.4} {:>12.4} {:>10.4} {:>10.4} {:>14}",
                r.label, r.clip_mean, r.image_reward_mean, r.hps_mean, r.unified_mean, h
            );
        }
        let _ = writeln!(out, "prompts: {}  images per api: {}", self.n_prompts, self.n_images_per_api);
        if self.partial {
            let _ = writeln!(out, "PARTIAL: {}", self.error.as_deref().unwrap_or("backend failure"));
        }
        out
    }

    /// Machine-readable lines: one per variant row, then a summary line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&serde_json::to_string(r).expect("row serializes"));
            out.push('\n');
        }
        let summary = serde_json::json!({
            "n_prompts": self.n_prompts,
            "n_images_per_api": self.n_images_per_api,
            "partial": self.partial,
            "error": self.error,
            "wall_time_per_response": self.wall_time_per_response,
        });
        out.push_str(&summary.to_string());
        out.push('\n');
        out
    }
}

/// Per-prompt contribution: raw means and unified score per variant.
struct PromptScores {
    per_variant: Vec<([f64; 3], f64)>,
    sft_hallucinated: bool,
    rrhf_hallucinated: bool,
}

/// Image seeds of one prompt; shared by every variant.
pub fn image_seeds(seed: u64, prompt_index: usize, n: usize) -> Vec<u64> {
    (0..n as u64)
        .map(|i| derive_seed(seed, &[b"eval", &(prompt_index as u64).to_le_bytes(), &i.to_le_bytes()]))
        .collect()
}

fn score_prompt(
    pair: &InstructionApiPair,
    seeds: &[u64],
    policies: Policies<'_>,
    registry: &Registry,
    backends: &Backends,
    variants: &[Variant],
) -> Result<Result<PromptScores, ScoringError>, EvalError> {
    let resolved = resolve_all(&pair.instruction.prompt, pair.api.info.base_model, policies, registry, variants)?;
    let raw: Result<Vec<Vec<ScoreTriple>>, ScoringError> = resolved
        .responses
        .iter()
        .map(|(_, api)| raw_triples(&pair.instruction, api, seeds, backends.generation.as_ref(), backends.scorer.as_ref()))
        .collect();
    let raw = match raw {
        Ok(r) => r,
        Err(e) => return Ok(Err(e)),
    };
    let ctx = NormalizationContext::from_triples(raw.iter().flatten());
    let mut per_variant = Vec::with_capacity(raw.len());
    for triples in &raw {
        let u = match unified_from_triples(triples, &ctx) {
            Ok(u) => u,
            Err(e) => return Ok(Err(e)),
        };
        let metric = |m: usize| order_free_mean(&triples.iter().map(|t| t.as_array()[m]).collect::<Vec<_>>());
        per_variant.push(([metric(0), metric(1), metric(2)], u.value));
    }
    Ok(Ok(PromptScores {
        per_variant,
        sft_hallucinated: resolved.sft_hallucinated,
        rrhf_hallucinated: resolved.rrhf_hallucinated,
    }))
}

/// Scores every variant on every prompt of `split`. Each prompt's variants
/// form one normalization population. Prompts run in parallel; results are
/// reduced in split order. A backend failure stops the report at the last
/// prompt before it and marks it partial.
pub fn evaluate(
    split: &[InstructionApiPair],
    policies: Policies<'_>,
    registry: &Registry,
    backends: &Backends,
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    if split.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let results = split
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            let seeds = image_seeds(cfg.seed, i, cfg.n_images);
            score_prompt(pair, &seeds, policies, registry, backends, &cfg.variants)
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    let mut done = Vec::with_capacity(results.len());
    let mut error = None;
    for r in results {
        match r {
            Ok(s) => done.push(s),
            Err(e) => {
                error = Some(e.to_string());
                break;
            }
        }
    }
    let n = done.len().max(1) as f64;
    let rate = |f: fn(&PromptScores) -> bool| done.iter().filter(|s| f(s)).count() as f64 / n;
    let (sft_rate, rrhf_rate) = (rate(|s| s.sft_hallucinated), rate(|s| s.rrhf_hallucinated));
    let rows = cfg
        .variants
        .iter()
        .enumerate()
        .map(|(j, &variant)| {
            let mean = |f: &dyn Fn(&([f64; 3], f64)) -> f64| done.iter().map(|s| f(&s.per_variant[j])).sum::<f64>() / n;
            VariantRow {
                variant,
                label: variant.label().to_string(),
                clip_mean: mean(&|s| s.0[0]),
                image_reward_mean: mean(&|s| s.0[1]),
                hps_mean: mean(&|s| s.0[2]),
                unified_mean: mean(&|s| s.1),
                hallucination_rate: match variant {
                    Variant::Sft => Some(sft_rate),
                    Variant::Rrhf => Some(rrhf_rate),
                    _ => None,
                },
            }
        })
        .collect();
    Ok(EvalReport {
        rows,
        n_prompts: done.len(),
        n_images_per_api: cfg.n_images,
        wall_time_per_response: None,
        partial: error.is_some(),
        error,
    })
}

/// Mean wall-clock seconds of greedy decode plus validation per prompt,
/// single-threaded, after one warm-up pass.
pub fn timing_probe(policy: &Policy, prompts: &[Instruction], registry: &Registry) -> Result<f64, EvalError> {
    if prompts.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    for t in prompts {
        decode_response(policy, &t.prompt, registry)?;
    }
    let start = Instant::now();
    for t in prompts {
        std::hint::black_box(decode_response(policy, &t.prompt, registry)?);
    }
    Ok(start.elapsed().as_secs_f64() / prompts.len() as f64)
}

/// Outcome of one directional check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Directional checks on a full report: RRHF > SFT > Baseline on unified
/// means, params-only and model-only at least Baseline, and fewer
/// hallucinations after alignment.
pub fn directional_checks(report: &EvalReport) -> Vec<Check> {
    let unified = |v| report.row(v).map(|r| r.unified_mean);
    let halluc = |v| report.row(v).and_then(|r| r.hallucination_rate);
    let mut out = Vec::new();
    let mut cmp = |name: &str, a: Option<f64>, b: Option<f64>, strict: bool| {
        let (passed, detail) = match (a, b) {
            (Some(a), Some(b)) => (if strict { a > b } else { a >= b }, format!("{a:.4} vs {b:.4}")),
            _ => (false, "variant missing from report".to_string()),
        };
        out.push(Check { name: name.into(), passed, detail });
    };
    cmp("unified RRHF > SFT", unified(Variant::Rrhf), unified(Variant::Sft), true);
    cmp("unified SFT > Baseline", unified(Variant::Sft), unified(Variant::Baseline), true);
    cmp("unified Params-only >= Baseline", unified(Variant::ParamsOnly), unified(Variant::Baseline), false);
    cmp("unified Model-only >= Baseline", unified(Variant::ModelOnly), unified(Variant::Baseline), false);
    cmp("hallucination SFT > RRHF", halluc(Variant::Sft), halluc(Variant::Rrhf), true);
    out
}
