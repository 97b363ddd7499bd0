//! The model registry: ground truth for validating, reconstructing and
//! counting hallucinated API responses.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{ArchitectureFamily, ModelInfo, ParamInfo, SamplerSet, SchemaError, T2IApi};

pub const REGISTRY_FORMAT: &str = "t2i-registry/1";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RegistryError {
    #[error("duplicate model identifier `{0}`")]
    DuplicateModel(String),
    #[error("hash `{hash}` claimed by both `{first}` and `{second}`")]
    DuplicateHash { hash: String, first: String, second: String },
    #[error("entry `{0}`: {1}")]
    InvalidEntry(String, SchemaError),
    #[error("unsupported registry format {0:?}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub info: ModelInfo,
    /// Canonical generation parameters for this model.
    pub params: ParamInfo,
    #[serde(default)]
    pub hashes: BTreeSet<String>,
    #[serde(default)]
    pub download_count: u64,
    /// Designated vanilla model of its architecture.
    #[serde(default)]
    pub baseline: bool,
}

impl RegistryEntry {
    pub fn api(&self) -> T2IApi {
        T2IApi { info: self.info.clone(), params: self.params.clone() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RegistryFile {
    format: String,
    samplers: SamplerSet,
    entries: Vec<RegistryEntry>,
}

/// Immutable after construction; cheap to share behind `&` across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Registry {
    samplers: SamplerSet,
    entries: BTreeMap<String, RegistryEntry>,
    hash_index: BTreeMap<String, String>,
}

/// Why a claimed model could not be reconstructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Hallucination {
    UnknownModel,
    TypeMismatch,
    ArchitectureMismatch,
}

impl fmt::Display for Hallucination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Hallucination::UnknownModel => "unknown model",
            Hallucination::TypeMismatch => "type mismatch",
            Hallucination::ArchitectureMismatch => "architecture mismatch",
        })
    }
}

impl Registry {
    pub fn build<I>(entries: I, samplers: SamplerSet) -> Result<Self, RegistryError>
    where
        I: IntoIterator<Item = RegistryEntry>,
    {
        let mut map = BTreeMap::new();
        let mut hash_index: BTreeMap<String, String> = BTreeMap::new();
        for e in entries {
            let id = e.info.model.clone();
            e.info.validate().map_err(|err| RegistryError::InvalidEntry(id.clone(), err))?;
            e.params.validate(&samplers).map_err(|err| RegistryError::InvalidEntry(id.clone(), err))?;
            for h in &e.hashes {
                if let Some(first) = hash_index.insert(h.clone(), id.clone()) {
                    return Err(RegistryError::DuplicateHash { hash: h.clone(), first, second: id });
                }
            }
            if map.insert(id.clone(), e).is_some() {
                return Err(RegistryError::DuplicateModel(id));
            }
        }
        Ok(Registry { samplers, entries: map, hash_index })
    }

    pub fn samplers(&self) -> &SamplerSet {
        &self.samplers
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&RegistryEntry> {
        self.entries.get(id)
    }

    /// Entries in identifier order.
    pub fn entries(&self) -> impl Iterator<Item = &RegistryEntry> {
        self.entries.values()
    }

    pub fn model_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Entries by descending download count, ties by identifier.
    pub fn by_downloads(&self) -> Vec<&RegistryEntry> {
        let mut v: Vec<_> = self.entries.values().collect();
        v.sort_by(|a, b| b.download_count.cmp(&a.download_count).then_with(|| a.info.model.cmp(&b.info.model)));
        v
    }

    pub fn most_downloaded(&self) -> Option<&RegistryEntry> {
        self.by_downloads().into_iter().next()
    }

    /// The default response: most-downloaded model with default parameters.
    pub fn default_response(&self) -> Option<T2IApi> {
        self.most_downloaded().map(|e| T2IApi {
            info: e.info.clone(),
            params: ParamInfo::defaults(e.info.base_model),
        })
    }

    /// Designated baseline for `arch`; if none is flagged, the most-downloaded
    /// checkpoint of that architecture.
    pub fn baseline(&self, arch: ArchitectureFamily) -> Option<&RegistryEntry> {
        let mut of_arch = self.by_downloads().into_iter().filter(|e| e.info.base_model == arch);
        let flagged = self.entries.values().find(|e| e.baseline && e.info.base_model == arch);
        flagged.or_else(|| of_arch.find(|e| e.info.kind == crate::schema::ModelKind::Checkpoint))
    }

    /// Looks up the model owning `hash`.
    pub fn resolve_base_model(&self, hash: &str) -> Option<&str> {
        self.hash_index.get(hash).map(String::as_str)
    }

    /// Validates a claimed model against the registry and returns the
    /// complete response with the registry's canonical parameters.
    pub fn reconstruct_full_response(&self, info: &ModelInfo) -> Result<T2IApi, Hallucination> {
        let entry = self.entries.get(&info.model).ok_or(Hallucination::UnknownModel)?;
        if entry.info.kind != info.kind {
            return Err(Hallucination::TypeMismatch);
        }
        if entry.info.base_model != info.base_model {
            return Err(Hallucination::ArchitectureMismatch);
        }
        Ok(entry.api())
    }

    pub fn to_json(&self) -> String {
        let file = RegistryFile {
            format: REGISTRY_FORMAT.to_string(),
            samplers: self.samplers.clone(),
            entries: self.entries.values().cloned().collect(),
        };
        serde_json::to_string_pretty(&file).expect("registry serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, Box<dyn std::error::Error + Send + Sync>> {
        let file: RegistryFile = serde_json::from_str(text)?;
        if file.format != REGISTRY_FORMAT {
            return Err(Box::new(RegistryError::Format(file.format)));
        }
        Ok(Registry::build(file.entries, file.samplers)?)
    }
}
