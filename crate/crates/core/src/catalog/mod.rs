//! Catalog ingestion: raw model/image metadata in, validated [`Registry`] and
//! instruction/API pairs out.
//!
//! Stages run in this order:
//!
//! 1. [`filter_availability`] drops unavailable, NSFW and unparseable models
//!    and, for LoRA models, every sample image whose base-model hash does not
//!    resolve to an available checkpoint.
//! 2. [`filter_quality`] applies download/rating thresholds.
//! 3. [`reconstruct_description`] rewrites each model description through a
//!    [`TextGenClient`].
//! 4. [`build_registry`] and [`build_pairs`] emit the registry and the pairs.
//! 5. [`split_dataset`] partitions the pairs 8:1:1.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::tokens::snap_params;
use crate::schema::{
    validate_model_id, ArchitectureFamily, Instruction, InstructionApiPair, ModelInfo, ModelKind, ParamInfo,
    SamplerSet, T2IApi,
};
use crate::util::rng;

pub mod lora;
pub mod registry;
pub mod textgen;

pub use lora::{strip_lora_tags, LoraTag, Stripped};
pub use registry::{Hallucination, Registry, RegistryEntry, RegistryError};
pub use textgen::{expand_prompt, TextGenClient, TextGenRequest};

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("need at least 10 pairs to split, got {0}")]
    TooFewPairs(usize),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Reads line-delimited raw model records; blank lines are skipped.
pub fn read_records<R: std::io::BufRead>(reader: R) -> Result<Vec<RawModelRecord>, CatalogError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| CatalogError::Parse { line: i + 1, reason: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}

/// Generation parameters as uploaded; any field may be absent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PartialParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling_method: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling_steps: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cfg_scale: Option<f64>,
}

impl PartialParams {
    /// Fills absent fields from the default parameters of `arch`.
    pub fn fill(&self, arch: ArchitectureFamily) -> ParamInfo {
        let d = ParamInfo::defaults(arch);
        ParamInfo {
            width: self.width.unwrap_or(d.width),
            height: self.height.unwrap_or(d.height),
            sampling_method: self.sampling_method.clone().unwrap_or(d.sampling_method),
            sampling_steps: self.sampling_steps.unwrap_or(d.sampling_steps),
            cfg_scale: self.cfg_scale.unwrap_or(d.cfg_scale),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawImageRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub prompt: String,
    #[serde(default)]
    pub negative_prompt: String,
    #[serde(default)]
    pub gen_params: PartialParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_model_hash: Option<String>,
    #[serde(default)]
    pub nsfw: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawModelRecord {
    pub id: String,
    /// Model identifier as it appears in API responses.
    pub name: String,
    #[serde(rename = "type")]
    pub kind_str: String,
    #[serde(rename = "base_model")]
    pub arch_str: String,
    #[serde(default)]
    pub nsfw: bool,
    pub file_available: bool,
    /// Hashes of the model's own files (checkpoints are resolved by these).
    #[serde(default)]
    pub file_hashes: Vec<String>,
    /// Image id to base-model hash, for LoRA images lacking an inline hash.
    #[serde(default)]
    pub base_model_hash_map: BTreeMap<String, String>,
    pub download_count: u64,
    pub rating_count: u64,
    pub rating: f64,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub baseline: bool,
    #[serde(default)]
    pub sample_images: Vec<RawImageRecord>,
}

impl RawModelRecord {
    pub fn kind(&self) -> Option<ModelKind> {
        self.kind_str.parse().ok()
    }

    pub fn arch(&self) -> Option<ArchitectureFamily> {
        self.arch_str.parse().ok()
    }

    fn image_hash<'a>(&'a self, img: &'a RawImageRecord) -> Option<&'a str> {
        img.base_model_hash
            .as_deref()
            .or_else(|| img.id.as_ref().and_then(|id| self.base_model_hash_map.get(id)).map(String::as_str))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityThresholds {
    pub min_downloads: u64,
    pub min_rating_count: u64,
    pub min_rating: f64,
}

impl Default for QualityThresholds {
    fn default() -> Self {
        QualityThresholds { min_downloads: 100, min_rating_count: 5, min_rating: 3.5 }
    }
}

/// Per-criterion drop counts of the availability filter. A record is counted
/// under the first criterion it fails, in field order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AvailabilityStats {
    pub file_unavailable: usize,
    pub nsfw: usize,
    pub unknown_type: usize,
    pub unknown_architecture: usize,
    pub invalid_identifier: usize,
    pub lora_without_resolvable_images: usize,
    pub images_nsfw: usize,
    pub images_unresolved: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Availability {
    pub records: Vec<RawModelRecord>,
    pub stats: AvailabilityStats,
}

/// Availability filter.
///
/// Keeps records whose file is available, that are not NSFW and whose type
/// and architecture parse. NSFW sample images are dropped. LoRA records keep
/// only images whose base-model hash resolves to a unique checkpoint that
/// itself passes the record-level criteria; LoRA records left with no
/// images are dropped.
pub fn filter_availability(records: &[RawModelRecord]) -> Availability {
    let mut stats = AvailabilityStats::default();
    let record_ok = |r: &RawModelRecord, stats: Option<&mut AvailabilityStats>| -> bool {
        let failure = if !r.file_available {
            Some(0)
        } else if r.nsfw {
            Some(1)
        } else if r.kind().is_none() {
            Some(2)
        } else if r.arch().is_none() {
            Some(3)
        } else if validate_model_id(&r.name).is_err() {
            Some(4)
        } else {
            None
        };
        if let (Some(f), Some(s)) = (failure, stats) {
            match f {
                0 => s.file_unavailable += 1,
                1 => s.nsfw += 1,
                2 => s.unknown_type += 1,
                3 => s.unknown_architecture += 1,
                _ => s.invalid_identifier += 1,
            }
        }
        failure.is_none()
    };

    // Hash -> owners among available checkpoints; only unique owners resolve.
    let mut owners: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for r in records.iter().filter(|r| record_ok(r, None) && r.kind() == Some(ModelKind::Checkpoint)) {
        for h in &r.file_hashes {
            owners.entry(h.as_str()).or_default().insert(r.name.as_str());
        }
    }
    let resolves = |h: &str| owners.get(h).is_some_and(|o| o.len() == 1);

    let mut out = Vec::new();
    for r in records {
        if !record_ok(r, Some(&mut stats)) {
            continue;
        }
        let mut kept = r.clone();
        kept.sample_images.clear();
        for img in &r.sample_images {
            if img.nsfw {
                stats.images_nsfw += 1;
                continue;
            }
            if r.kind() == Some(ModelKind::Lora) && !r.image_hash(img).is_some_and(resolves) {
                stats.images_unresolved += 1;
                continue;
            }
            kept.sample_images.push(img.clone());
        }
        if r.kind() == Some(ModelKind::Lora) && kept.sample_images.is_empty() {
            stats.lora_without_resolvable_images += 1;
            continue;
        }
        out.push(kept);
    }
    Availability { records: out, stats }
}

/// Keeps records meeting every threshold (inclusive).
pub fn filter_quality(records: &[RawModelRecord], th: &QualityThresholds) -> Vec<RawModelRecord> {
    records
        .iter()
        .filter(|r| {
            r.download_count >= th.min_downloads && r.rating_count >= th.min_rating_count && r.rating >= th.min_rating
        })
        .cloned()
        .collect()
}

/// Stripped sample prompts for a description request: deduplicated,
/// longest first (ties in byte order), at most [`textgen::MAX_DESCRIPTION_PROMPTS`].
pub fn description_prompts(record: &RawModelRecord) -> Vec<String> {
    let unique: BTreeSet<String> = record
        .sample_images
        .iter()
        .map(|i| strip_lora_tags(&i.prompt).clean.trim().to_string())
        .filter(|p| !p.is_empty())
        .collect();
    let mut v: Vec<String> = unique.into_iter().collect();
    v.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
    v.truncate(textgen::MAX_DESCRIPTION_PROMPTS);
    v
}

pub fn description_request(record: &RawModelRecord) -> TextGenRequest {
    TextGenRequest {
        template_id: textgen::DESCRIBE_TEMPLATE.into(),
        variables: BTreeMap::from([
            ("name".to_string(), record.name.clone()),
            ("description".to_string(), record.description.clone()),
            ("sample_prompts".to_string(), description_prompts(record).join("\n")),
        ]),
    }
}

/// Rewrites a model description from its original text and sample prompts.
/// Client failure returns the original description.
pub fn reconstruct_description(record: &RawModelRecord, client: &dyn TextGenClient) -> String {
    textgen::generate_or(client, &description_request(record), &record.description)
}

/// Per-field mode; ties resolve to `default` when it is among the tied
/// values, otherwise to the smallest tied value.
fn mode_or<T: Ord + Clone>(values: impl Iterator<Item = T>, default: T) -> T {
    let mut counts: BTreeMap<T, usize> = BTreeMap::new();
    for v in values {
        *counts.entry(v).or_default() += 1;
    }
    let Some(&top) = counts.values().max() else { return default };
    if counts.get(&default) == Some(&top) {
        return default;
    }
    counts.into_iter().find(|(_, c)| *c == top).map(|(v, _)| v).unwrap_or(default)
}

/// Canonical parameters of a model: the per-field mode of its sample
/// images' filled parameters, snapped onto the token grid.
pub fn canonical_params(record: &RawModelRecord, samplers: &SamplerSet) -> ParamInfo {
    let arch = record.arch().unwrap_or(ArchitectureFamily::Sd15);
    let default = snap_params(&ParamInfo::defaults(arch), samplers);
    let filled: Vec<ParamInfo> = record
        .sample_images
        .iter()
        .map(|i| i.gen_params.fill(arch))
        .filter(|p| p.validate(samplers).is_ok())
        .map(|p| snap_params(&p, samplers))
        .collect();
    ParamInfo {
        width: mode_or(filled.iter().map(|p| p.width), default.width),
        height: mode_or(filled.iter().map(|p| p.height), default.height),
        sampling_method: mode_or(filled.iter().map(|p| p.sampling_method.clone()), default.sampling_method.clone()),
        sampling_steps: mode_or(filled.iter().map(|p| p.sampling_steps), default.sampling_steps),
        cfg_scale: mode_or(filled.iter().map(|p| p.cfg_scale as u32), default.cfg_scale as u32) as f64,
    }
}

/// Registry entries for filtered records. `descriptions` overrides record
/// descriptions by record index.
pub fn build_registry(
    records: &[RawModelRecord],
    descriptions: Option<&[String]>,
    samplers: &SamplerSet,
) -> Result<Registry, RegistryError> {
    let entries = records.iter().enumerate().filter_map(|(i, r)| {
        Some(RegistryEntry {
            info: ModelInfo {
                model: r.name.clone(),
                kind: r.kind()?,
                base_model: r.arch()?,
                model_description: descriptions.map_or_else(|| r.description.clone(), |d| d[i].clone()),
            },
            params: canonical_params(r, samplers),
            hashes: r.file_hashes.iter().cloned().collect(),
            download_count: r.download_count,
            baseline: r.baseline,
        })
    });
    Registry::build(entries, samplers.clone())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BuiltPairs {
    pub pairs: Vec<InstructionApiPair>,
    /// Images whose instruction or filled parameters failed validation.
    pub dropped: usize,
}

/// One pair per retained sample image. Missing parameters are filled from
/// the defaults; invalid images are dropped and counted.
pub fn build_pairs(records: &[RawModelRecord], registry: &Registry) -> BuiltPairs {
    let mut out = BuiltPairs::default();
    for r in records {
        let (Some(kind), Some(arch)) = (r.kind(), r.arch()) else {
            out.dropped += r.sample_images.len();
            continue;
        };
        let info = registry.get(&r.name).map(|e| e.info.clone()).unwrap_or_else(|| ModelInfo {
            model: r.name.clone(),
            kind,
            base_model: arch,
            model_description: r.description.clone(),
        });
        for img in &r.sample_images {
            let instruction = Instruction {
                prompt: strip_lora_tags(&img.prompt).clean,
                negative_prompt: strip_lora_tags(&img.negative_prompt).clean,
            };
            let pair = InstructionApiPair {
                instruction,
                api: T2IApi { info: info.clone(), params: img.gen_params.fill(arch) },
            };
            match pair.validate(registry.samplers()) {
                Ok(()) => out.pairs.push(pair),
                Err(e) => {
                    log::warn!("dropping image of `{}`: {e}", r.name);
                    out.dropped += 1;
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<InstructionApiPair>,
    pub align: Vec<InstructionApiPair>,
    pub eval: Vec<InstructionApiPair>,
}

/// Seeded shuffle, then `floor(n/10)` pairs each to the alignment and
/// evaluation splits and the remainder to training.
pub fn split_dataset(pairs: &[InstructionApiPair], seed: u64) -> Result<Splits, CatalogError> {
    let n = pairs.len();
    if n < 10 {
        return Err(CatalogError::TooFewPairs(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng(seed));
    let small = n / 10;
    let take = |idx: &[usize]| idx.iter().map(|&i| pairs[i].clone()).collect::<Vec<_>>();
    Ok(Splits {
        align: take(&order[..small]),
        eval: take(&order[small..2 * small]),
        train: take(&order[2 * small..]),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub raw_records: usize,
    pub raw_images: usize,
    pub availability: AvailabilityStats,
    pub after_availability: usize,
    pub after_quality: usize,
    pub registry_models: usize,
    pub descriptions_rewritten: usize,
    pub descriptions_degraded: usize,
    pub pairs_emitted: usize,
    pub pairs_dropped: usize,
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub records: Vec<RawModelRecord>,
    pub registry: Registry,
    pub pairs: Vec<InstructionApiPair>,
    pub summary: IngestSummary,
}

/// Runs every ingestion stage. Description requests are issued in parallel
/// on the current rayon pool; results are merged in record order.
pub fn ingest(
    raw: &[RawModelRecord],
    thresholds: &QualityThresholds,
    samplers: &SamplerSet,
    client: &dyn TextGenClient,
) -> Result<Ingested, CatalogError> {
    let available = filter_availability(raw);
    let records = filter_quality(&available.records, thresholds);
    let outcomes: Vec<Option<String>> = records
        .par_iter()
        .map(|r| client.generate(&description_request(r)).ok())
        .collect();
    let degraded = outcomes.iter().filter(|o| o.is_none()).count();
    if degraded > 0 {
        log::warn!("description client `{}` failed for {degraded} models; kept originals", client.name());
    }
    let descriptions: Vec<String> = outcomes
        .into_iter()
        .zip(&records)
        .map(|(o, r)| o.unwrap_or_else(|| r.description.clone()))
        .collect();
    let registry = build_registry(&records, Some(&descriptions), samplers)?;
    let built = build_pairs(&records, &registry);
    let summary = IngestSummary {
        raw_records: raw.len(),
        raw_images: raw.iter().map(|r| r.sample_images.len()).sum(),
        availability: available.stats,
        after_availability: available.records.len(),
        after_quality: records.len(),
        registry_models: registry.len(),
        descriptions_rewritten: records.len() - degraded,
        descriptions_degraded: degraded,
        pairs_emitted: built.pairs.len(),
        pairs_dropped: built.dropped,
    };
    Ok(Ingested { records, registry, pairs: built.pairs, summary })
}
