//! T2I API data model: model information, generation parameters, and the
//! instruction/API pair that makes up one dataset line.
//!
//! Records are `serde_json` objects with a closed field set. Serialization is
//! canonical: `serde_json::Map` keeps keys sorted, so structurally equal values
//! always produce identical bytes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

pub mod tokens;

pub use tokens::{StructureError, Token, TokenError, TokenSequence, Vocab, VocabSpec};

/// Sampling methods accepted when no registry-provided list is in effect.
pub const DEFAULT_SAMPLING_METHODS: &[&str] = &["Euler a", "Euler", "DPM++ 2M", "DDIM", "UniPC"];

/// API record field names in canonical order.
pub const API_FIELDS: [&str; 9] = [
    "model",
    "type",
    "base_model",
    "width",
    "height",
    "sampling_method",
    "sampling_steps",
    "cfg_scale",
    "model_description",
];

/// Characters a model identifier may not contain. They are used as
/// delimiters by the token form and by prompt LoRA tags.
const RESERVED_ID_CHARS: &[char] = &['<', '>', '[', ']', '='];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchemaError {
    #[error("missing field `{0}`")]
    MissingField(String),
    #[error("invalid value for `{0}`: {1}")]
    InvalidValue(String, String),
    #[error("unknown field `{0}`")]
    UnknownField(String),
    #[error("record is not an object")]
    NotAnObject,
}

impl SchemaError {
    fn invalid(field: &str, reason: impl Into<String>) -> Self {
        SchemaError::InvalidValue(field.to_string(), reason.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ArchitectureFamily {
    #[serde(rename = "SD 1.5")]
    Sd15,
    #[serde(rename = "SDXL 1.0")]
    Sdxl,
}

impl ArchitectureFamily {
    pub const ALL: [ArchitectureFamily; 2] = [ArchitectureFamily::Sd15, ArchitectureFamily::Sdxl];

    pub fn as_str(self) -> &'static str {
        match self {
            ArchitectureFamily::Sd15 => "SD 1.5",
            ArchitectureFamily::Sdxl => "SDXL 1.0",
        }
    }

    /// Native square resolution of the family.
    pub fn native_resolution(self) -> u32 {
        match self {
            ArchitectureFamily::Sd15 => 512,
            ArchitectureFamily::Sdxl => 1024,
        }
    }
}

impl fmt::Display for ArchitectureFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchitectureFamily {
    type Err = SchemaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .chars()
            .filter(|c| !c.is_whitespace())
            .collect::<String>()
            .to_ascii_lowercase();
        match norm.as_str() {
            "sd1.5" | "sd15" => Ok(ArchitectureFamily::Sd15),
            "sdxl1.0" | "sdxl" | "sdxl10" => Ok(ArchitectureFamily::Sdxl),
            _ => Err(SchemaError::invalid("base_model", format!("unknown architecture {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    Checkpoint,
    #[serde(rename = "LoRA")]
    Lora,
}

impl ModelKind {
    pub const ALL: [ModelKind; 2] = [ModelKind::Checkpoint, ModelKind::Lora];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Checkpoint => "Checkpoint",
            ModelKind::Lora => "LoRA",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = SchemaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "checkpoint" => Ok(ModelKind::Checkpoint),
            "lora" => Ok(ModelKind::Lora),
            _ => Err(SchemaError::invalid("type", format!("unknown model type {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelInfo {
    pub model: String,
    pub kind: ModelKind,
    pub base_model: ArchitectureFamily,
    pub model_description: String,
}

impl ModelInfo {
    pub fn validate(&self) -> Result<(), SchemaError> {
        validate_model_id(&self.model)
    }
}

pub fn validate_model_id(id: &str) -> Result<(), SchemaError> {
    if id.trim().is_empty() {
        return Err(SchemaError::invalid("model", "empty identifier"));
    }
    if let Some(c) = id.chars().find(|c| RESERVED_ID_CHARS.contains(c) || c.is_control()) {
        return Err(SchemaError::invalid("model", format!("reserved character {c:?}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub width: u32,
    pub height: u32,
    pub sampling_method: String,
    pub sampling_steps: u32,
    pub cfg_scale: f64,
}

impl ParamInfo {
    /// The default generation parameters: `Euler a`, 20 steps, CFG 7, at the
    /// family's native square resolution.
    pub fn defaults(arch: ArchitectureFamily) -> Self {
        let side = arch.native_resolution();
        ParamInfo {
            width: side,
            height: side,
            sampling_method: "Euler a".to_string(),
            sampling_steps: 20,
            cfg_scale: 7.0,
        }
    }

    pub fn validate(&self, samplers: &SamplerSet) -> Result<(), SchemaError> {
        validate_side("width", self.width)?;
        validate_side("height", self.height)?;
        if !samplers.contains(&self.sampling_method) {
            return Err(SchemaError::invalid(
                "sampling_method",
                format!("{:?} not in the sampler enumeration", self.sampling_method),
            ));
        }
        if !(1..=150).contains(&self.sampling_steps) {
            return Err(SchemaError::invalid("sampling_steps", "outside [1, 150]"));
        }
        if !(self.cfg_scale.is_finite() && self.cfg_scale > 0.0 && self.cfg_scale <= 30.0) {
            return Err(SchemaError::invalid("cfg_scale", "outside (0, 30]"));
        }
        Ok(())
    }
}

fn validate_side(field: &str, v: u32) -> Result<(), SchemaError> {
    if !(64..=4096).contains(&v) {
        return Err(SchemaError::invalid(field, "outside [64, 4096]"));
    }
    if v % 8 != 0 {
        return Err(SchemaError::invalid(field, "not divisible by 8"));
    }
    Ok(())
}

/// Closed enumeration of sampling-method names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerSet(Vec<String>);

impl SamplerSet {
    pub fn new<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v: Vec<String> = Vec::new();
        for n in names {
            let n = n.into();
            if !v.contains(&n) {
                v.push(n);
            }
        }
        SamplerSet(v)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.iter().any(|s| s == name)
    }

    pub fn names(&self) -> &[String] {
        &self.0
    }
}

impl Default for SamplerSet {
    fn default() -> Self {
        SamplerSet::new(DEFAULT_SAMPLING_METHODS.iter().copied())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct T2IApi {
    pub info: ModelInfo,
    pub params: ParamInfo,
}

impl T2IApi {
    pub fn validate(&self, samplers: &SamplerSet) -> Result<(), SchemaError> {
        self.info.validate()?;
        self.params.validate(samplers)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instruction {
    pub prompt: String,
    #[serde(default)]
    pub negative_prompt: String,
}

impl Instruction {
    pub fn new(prompt: impl Into<String>, negative_prompt: impl Into<String>) -> Self {
        Instruction { prompt: prompt.into(), negative_prompt: negative_prompt.into() }
    }

    pub fn validate(&self) -> Result<(), SchemaError> {
        if self.prompt.trim().is_empty() {
            return Err(SchemaError::invalid("prompt", "empty after trimming"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstructionApiPair {
    pub instruction: Instruction,
    pub api: T2IApi,
}

impl InstructionApiPair {
    pub fn validate(&self, samplers: &SamplerSet) -> Result<(), SchemaError> {
        self.instruction.validate()?;
        self.api.validate(samplers)
    }
}

fn take_str(obj: &Map<String, Value>, field: &str) -> Result<String, SchemaError> {
    match obj.get(field) {
        None => Err(SchemaError::MissingField(field.to_string())),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(SchemaError::invalid(field, "expected a string")),
    }
}

fn take_u32(obj: &Map<String, Value>, field: &str) -> Result<u32, SchemaError> {
    let v = obj.get(field).ok_or_else(|| SchemaError::MissingField(field.to_string()))?;
    if let Some(n) = v.as_u64() {
        return u32::try_from(n).map_err(|_| SchemaError::invalid(field, "out of range"));
    }
    if let Some(f) = v.as_f64() {
        if f.fract() == 0.0 && f >= 0.0 && f <= u32::MAX as f64 {
            return Ok(f as u32);
        }
        return Err(SchemaError::invalid(field, "expected a nonnegative integer"));
    }
    Err(SchemaError::invalid(field, "expected a number"))
}

fn take_f64(obj: &Map<String, Value>, field: &str) -> Result<f64, SchemaError> {
    obj.get(field)
        .ok_or_else(|| SchemaError::MissingField(field.to_string()))?
        .as_f64()
        .ok_or_else(|| SchemaError::invalid(field, "expected a number"))
}

/// Parses an API record, checking every field against its invariants with the
/// default sampler enumeration.
pub fn parse_api(record: &Value) -> Result<T2IApi, SchemaError> {
    parse_api_with(record, &SamplerSet::default())
}

pub fn parse_api_with(record: &Value, samplers: &SamplerSet) -> Result<T2IApi, SchemaError> {
    let obj = record.as_object().ok_or(SchemaError::NotAnObject)?;
    if let Some(unknown) = obj.keys().find(|k| !API_FIELDS.contains(&k.as_str())) {
        return Err(SchemaError::UnknownField(unknown.clone()));
    }
    // Missing fields are reported in canonical order.
    if let Some(missing) = API_FIELDS.iter().find(|f| !obj.contains_key(**f)) {
        return Err(SchemaError::MissingField(missing.to_string()));
    }
    let info = ModelInfo {
        model: take_str(obj, "model")?,
        kind: take_str(obj, "type")?.parse()?,
        base_model: take_str(obj, "base_model")?.parse()?,
        model_description: take_str(obj, "model_description")?,
    };
    info.validate()?;
    let params = ParamInfo {
        width: take_u32(obj, "width")?,
        height: take_u32(obj, "height")?,
        sampling_method: take_str(obj, "sampling_method")?,
        sampling_steps: take_u32(obj, "sampling_steps")?,
        cfg_scale: take_f64(obj, "cfg_scale")?,
    };
    params.validate(samplers)?;
    Ok(T2IApi { info, params })
}

pub fn serialize_api(api: &T2IApi) -> Value {
    let mut obj = Map::new();
    obj.insert("model".into(), Value::from(api.info.model.clone()));
    obj.insert("type".into(), Value::from(api.info.kind.as_str()));
    obj.insert("base_model".into(), Value::from(api.info.base_model.as_str()));
    obj.insert("width".into(), Value::from(api.params.width));
    obj.insert("height".into(), Value::from(api.params.height));
    obj.insert("sampling_method".into(), Value::from(api.params.sampling_method.clone()));
    obj.insert("sampling_steps".into(), Value::from(api.params.sampling_steps));
    obj.insert("cfg_scale".into(), Value::from(api.params.cfg_scale));
    obj.insert("model_description".into(), Value::from(api.info.model_description.clone()));
    Value::Object(obj)
}

/// One dataset line: `{"instruction": {...}, "api": {...}}`.
pub fn serialize_pair(pair: &InstructionApiPair) -> Value {
    let mut instr = Map::new();
    instr.insert("prompt".into(), Value::from(pair.instruction.prompt.clone()));
    instr.insert("negative_prompt".into(), Value::from(pair.instruction.negative_prompt.clone()));
    let mut obj = Map::new();
    obj.insert("instruction".into(), Value::Object(instr));
    obj.insert("api".into(), serialize_api(&pair.api));
    Value::Object(obj)
}

pub fn parse_pair(record: &Value, samplers: &SamplerSet) -> Result<InstructionApiPair, SchemaError> {
    let obj = record.as_object().ok_or(SchemaError::NotAnObject)?;
    if let Some(unknown) = obj.keys().find(|k| *k != "instruction" && *k != "api") {
        return Err(SchemaError::UnknownField(unknown.clone()));
    }
    let instr = obj
        .get("instruction")
        .ok_or_else(|| SchemaError::MissingField("instruction".into()))?
        .as_object()
        .ok_or_else(|| SchemaError::invalid("instruction", "expected an object"))?;
    if let Some(unknown) = instr.keys().find(|k| *k != "prompt" && *k != "negative_prompt") {
        return Err(SchemaError::UnknownField(unknown.clone()));
    }
    let instruction = Instruction {
        prompt: take_str(instr, "prompt")?,
        negative_prompt: take_str(instr, "negative_prompt")?,
    };
    instruction.validate()?;
    let api = parse_api_with(
        obj.get("api").ok_or_else(|| SchemaError::MissingField("api".into()))?,
        samplers,
    )?;
    Ok(InstructionApiPair { instruction, api })
}
