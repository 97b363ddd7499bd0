//! Vocabulary and the token form of an API response.
//!
//! A response is rendered as `[field] field=value` pairs in canonical field
//! order followed by `<eos>`. Numeric values come from fixed bins so that
//! every syntactically valid emission is also semantically valid. The model
//! description is registry metadata and has no token form.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ArchitectureFamily, ModelInfo, ModelKind, ParamInfo, SamplerSet, T2IApi};
use crate::util::stable_hash;

pub const WIDTH_BINS: std::ops::RangeInclusive<u32> = 256..=1536;
pub const SIDE_STEP: u32 = 64;
pub const STEP_BINS: [u32; 7] = [10, 15, 20, 25, 30, 40, 50];
pub const CFG_BINS: [u32; 6] = [3, 5, 7, 9, 11, 13];

pub const EOS: &str = "<eos>";
pub const BOS: &str = "<bos>";
pub const SEP: &str = "<sep>";
pub const UNK: &str = "<unk>";

/// Upper bound on vocabulary size.
pub const MAX_VOCAB: usize = 4096;

/// Token fields in emission order.
pub const TOKEN_FIELDS: [Field; 8] = [
    Field::Model,
    Field::Type,
    Field::BaseModel,
    Field::Width,
    Field::Height,
    Field::SamplingMethod,
    Field::SamplingSteps,
    Field::CfgScale,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Field {
    Model,
    Type,
    BaseModel,
    Width,
    Height,
    SamplingMethod,
    SamplingSteps,
    CfgScale,
}

impl Field {
    pub fn name(self) -> &'static str {
        match self {
            Field::Model => "model",
            Field::Type => "type",
            Field::BaseModel => "base_model",
            Field::Width => "width",
            Field::Height => "height",
            Field::SamplingMethod => "sampling_method",
            Field::SamplingSteps => "sampling_steps",
            Field::CfgScale => "cfg_scale",
        }
    }

    pub fn marker(self) -> String {
        format!("[{}]", self.name())
    }

    pub fn value_token(self, value: &str) -> String {
        format!("{}={}", self.name(), value)
    }

    fn order(self) -> usize {
        TOKEN_FIELDS.iter().position(|f| *f == self).unwrap()
    }
}

/// Index into a [`Vocab`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(pub u32);

impl Token {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

pub type TokenSequence = Vec<Token>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TokenError {
    #[error("value of `{0}` is not representable in the vocabulary")]
    UnrepresentableValue(String),
    #[error("vocabulary too large: {0} > {MAX_VOCAB}")]
    TooLarge(usize),
    #[error("duplicate token {0:?}")]
    Duplicate(String),
    #[error("invalid vocabulary: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed response at token {position}: {reason}")]
pub struct StructureError {
    pub position: usize,
    pub reason: String,
}

impl StructureError {
    fn at(position: usize, reason: impl Into<String>) -> Self {
        StructureError { position, reason: reason.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Marker(Field),
    Value(Field),
    Eos,
    Bos,
    Sep,
    Unk,
    Word,
}

/// Serialized vocabulary layout; see [`Vocab`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSpec {
    pub models: Vec<String>,
    pub samplers: Vec<String>,
    pub words: Vec<String>,
}

/// Token vocabulary.
///
/// Response tokens (field markers, field values, `<eos>`) occupy the ids
/// `0..response_len()`, which is the policy's output space. `<bos>`, `<sep>`,
/// `<unk>` and the prompt words follow.
#[derive(Debug, Clone)]
pub struct Vocab {
    spec: VocabSpec,
    tokens: Vec<String>,
    roles: Vec<Role>,
    index: HashMap<String, Token>,
    response_len: usize,
    samplers: SamplerSet,
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
    }
}

impl Vocab {
    /// Builds the vocabulary. Model names and prompt words are sorted and
    /// deduplicated so construction is independent of input order.
    pub fn new<M, W>(models: M, samplers: &SamplerSet, words: W) -> Result<Self, TokenError>
    where
        M: IntoIterator,
        M::Item: Into<String>,
        W: IntoIterator,
        W::Item: Into<String>,
    {
        let models: BTreeSet<String> = models.into_iter().map(Into::into).collect();
        let words: BTreeSet<String> = words.into_iter().map(Into::into).collect();
        Self::from_spec(VocabSpec {
            models: models.into_iter().collect(),
            samplers: samplers.names().to_vec(),
            words: words.into_iter().collect(),
        })
    }

    pub fn from_spec(spec: VocabSpec) -> Result<Self, TokenError> {
        let mut tokens = Vec::new();
        let mut roles = Vec::new();
        for f in TOKEN_FIELDS {
            tokens.push(f.marker());
            roles.push(Role::Marker(f));
        }
        let mut push_values = |field: Field, values: Vec<String>| {
            for v in values {
                tokens.push(field.value_token(&v));
                roles.push(Role::Value(field));
            }
        };
        for m in &spec.models {
            super::validate_model_id(m).map_err(|e| TokenError::Invalid(e.to_string()))?;
        }
        push_values(Field::Model, spec.models.clone());
        push_values(Field::Type, ModelKind::ALL.iter().map(|k| k.as_str().to_string()).collect());
        push_values(
            Field::BaseModel,
            ArchitectureFamily::ALL.iter().map(|a| a.as_str().to_string()).collect(),
        );
        let sides: Vec<String> = side_bins().map(|v| v.to_string()).collect();
        push_values(Field::Width, sides.clone());
        push_values(Field::Height, sides);
        push_values(Field::SamplingMethod, spec.samplers.clone());
        push_values(Field::SamplingSteps, STEP_BINS.iter().map(|v| v.to_string()).collect());
        push_values(Field::CfgScale, CFG_BINS.iter().map(|v| v.to_string()).collect());
        tokens.push(EOS.to_string());
        roles.push(Role::Eos);
        let response_len = tokens.len();
        for (t, r) in [(BOS, Role::Bos), (SEP, Role::Sep), (UNK, Role::Unk)] {
            tokens.push(t.to_string());
            roles.push(r);
        }
        for w in &spec.words {
            tokens.push(w.clone());
            roles.push(Role::Word);
        }
        if tokens.len() > MAX_VOCAB {
            return Err(TokenError::TooLarge(tokens.len()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), Token(i as u32)).is_some() {
                return Err(TokenError::Duplicate(t.clone()));
            }
        }
        let samplers = SamplerSet::new(spec.samplers.iter().cloned());
        Ok(Vocab { spec, tokens, roles, index, response_len, samplers })
    }

    pub fn spec(&self) -> &VocabSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Size of the output space (response tokens including `<eos>`).
    pub fn response_len(&self) -> usize {
        self.response_len
    }

    pub fn samplers(&self) -> &SamplerSet {
        &self.samplers
    }

    pub fn token(&self, s: &str) -> Option<Token> {
        self.index.get(s).copied()
    }

    pub fn text(&self, t: Token) -> Option<&str> {
        self.tokens.get(t.index()).map(String::as_str)
    }

    pub fn eos(&self) -> Token {
        self.index[EOS]
    }

    pub fn bos(&self) -> Token {
        self.index[BOS]
    }

    pub fn unk(&self) -> Token {
        self.index[UNK]
    }

    pub fn is_response_token(&self, t: Token) -> bool {
        t.index() < self.response_len
    }

    pub fn model_token(&self, model: &str) -> Option<Token> {
        self.token(&Field::Model.value_token(model))
    }

    /// Maps prompt text to word tokens; out-of-vocabulary words become `<unk>`.
    pub fn encode_prompt(&self, text: &str) -> TokenSequence {
        tokenize_prompt(text)
            .into_iter()
            .map(|w| match self.index.get(&w) {
                Some(&t) if self.roles[t.index()] == Role::Word => t,
                _ => self.unk(),
            })
            .collect()
    }

    /// Stable hash of a prompt token's text, used for feature bucketing.
    pub fn word_hash(&self, t: Token) -> u64 {
        stable_hash(self.text(t).unwrap_or(UNK).as_bytes())
    }

    fn value(&self, field: Field, value: &str) -> Result<Token, TokenError> {
        self.token(&field.value_token(value))
            .ok_or_else(|| TokenError::UnrepresentableValue(field.name().to_string()))
    }

    /// Canonical token rendering of an API response.
    pub fn render_response_tokens(&self, api: &T2IApi) -> Result<TokenSequence, TokenError> {
        let mut out = Vec::with_capacity(2 * TOKEN_FIELDS.len() + 1);
        for f in TOKEN_FIELDS {
            let value = match f {
                Field::Model => api.info.model.clone(),
                Field::Type => api.info.kind.as_str().to_string(),
                Field::BaseModel => api.info.base_model.as_str().to_string(),
                Field::Width => api.params.width.to_string(),
                Field::Height => api.params.height.to_string(),
                Field::SamplingMethod => api.params.sampling_method.clone(),
                Field::SamplingSteps => api.params.sampling_steps.to_string(),
                Field::CfgScale => {
                    let c = api.params.cfg_scale;
                    if c.fract() != 0.0 {
                        return Err(TokenError::UnrepresentableValue(f.name().to_string()));
                    }
                    format!("{}", c as i64)
                }
            };
            out.push(self.index[&f.marker()]);
            out.push(self.value(f, &value)?);
        }
        out.push(self.eos());
        Ok(out)
    }

    /// Parses a full response. Accepts arbitrary input; malformed sequences
    /// yield a [`StructureError`] pointing at the first violation.
    pub fn parse_response_tokens(&self, tokens: &[Token]) -> Result<T2IApi, StructureError> {
        let values = self.parse_fields(tokens, TOKEN_FIELDS.len())?;
        let end = 2 * TOKEN_FIELDS.len();
        match tokens.get(end) {
            None => return Err(StructureError::at(end, "truncated before end of response")),
            Some(&t) if t == self.eos() => {}
            Some(_) => return Err(StructureError::at(end, "expected end of response")),
        }
        if tokens.len() > end + 1 {
            return Err(StructureError::at(end + 1, "tokens after end of response"));
        }
        let info = self.model_info_from(&values);
        let num = |i: usize| values[i].parse::<u32>().unwrap_or(0);
        let params = ParamInfo {
            width: num(3),
            height: num(4),
            sampling_method: values[5].clone(),
            sampling_steps: num(6),
            cfg_scale: values[7].parse::<f64>().unwrap_or(0.0),
        };
        if let Err(e) = params.validate(&self.samplers) {
            return Err(StructureError::at(end, e.to_string()));
        }
        Ok(T2IApi { info, params })
    }

    /// Parses only the leading model-information fields (model, type,
    /// base_model) and ignores whatever follows.
    pub fn parse_model_info_prefix(&self, tokens: &[Token]) -> Result<ModelInfo, StructureError> {
        let values = self.parse_fields(tokens, 3)?;
        Ok(self.model_info_from(&values))
    }

    fn model_info_from(&self, values: &[String]) -> ModelInfo {
        // Values were produced from vocabulary entries, so these parses hold.
        ModelInfo {
            model: values[0].clone(),
            kind: values[1].parse().expect("type token"),
            base_model: values[2].parse().expect("base_model token"),
            model_description: String::new(),
        }
    }

    fn parse_fields(&self, tokens: &[Token], n_fields: usize) -> Result<Vec<String>, StructureError> {
        let mut values = Vec::with_capacity(n_fields);
        for (i, field) in TOKEN_FIELDS.iter().take(n_fields).enumerate() {
            let pos = 2 * i;
            let marker = *tokens
                .get(pos)
                .ok_or_else(|| StructureError::at(pos, format!("truncated before `{}`", field.name())))?;
            match self.roles.get(marker.index()) {
                Some(Role::Marker(f)) if f == field => {}
                Some(Role::Marker(f)) if f.order() < i => {
                    return Err(StructureError::at(pos, "duplicate field"));
                }
                Some(Role::Marker(f)) => {
                    return Err(StructureError::at(
                        pos,
                        format!("expected `{}`, found `{}`", field.name(), f.name()),
                    ));
                }
                Some(Role::Eos) => return Err(StructureError::at(pos, "premature end of response")),
                Some(_) => return Err(StructureError::at(pos, "expected a field marker")),
                None => return Err(StructureError::at(pos, "unknown token")),
            }
            let value = *tokens
                .get(pos + 1)
                .ok_or_else(|| StructureError::at(pos + 1, format!("truncated in `{}`", field.name())))?;
            match self.roles.get(value.index()) {
                Some(Role::Value(f)) if f == field => {
                    let text = &self.tokens[value.index()];
                    values.push(text[field.name().len() + 1..].to_string());
                }
                Some(Role::Value(f)) => {
                    return Err(StructureError::at(
                        pos + 1,
                        format!("value for `{}` in `{}`", f.name(), field.name()),
                    ));
                }
                Some(Role::Marker(_)) => {
                    return Err(StructureError::at(pos + 1, format!("missing value for `{}`", field.name())));
                }
                Some(_) => return Err(StructureError::at(pos + 1, "expected a field value")),
                None => return Err(StructureError::at(pos + 1, "unknown token")),
            }
        }
        Ok(values)
    }

    pub fn snap_params(&self, p: &ParamInfo) -> ParamInfo {
        snap_params(p, &self.samplers)
    }
}

/// Snaps numeric parameters onto the token bins. A sampler outside `samplers`
/// falls back to the first entry.
pub fn snap_params(p: &ParamInfo, samplers: &SamplerSet) -> ParamInfo {
    let sampler = if samplers.contains(&p.sampling_method) {
        p.sampling_method.clone()
    } else {
        samplers.names().first().cloned().unwrap_or_default()
    };
    ParamInfo {
        width: nearest(side_bins(), p.width as f64),
        height: nearest(side_bins(), p.height as f64),
        sampling_method: sampler,
        sampling_steps: nearest(STEP_BINS.iter().copied(), p.sampling_steps as f64),
        cfg_scale: nearest(CFG_BINS.iter().copied(), p.cfg_scale) as f64,
    }
}

fn side_bins() -> impl Iterator<Item = u32> + Clone {
    WIDTH_BINS.step_by(SIDE_STEP as usize)
}

/// Nearest bin; ties go to the smaller bin.
fn nearest(bins: impl Iterator<Item = u32>, v: f64) -> u32 {
    let mut best = None::<(f64, u32)>;
    for b in bins {
        let d = (b as f64 - v).abs();
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, b));
        }
    }
    best.map(|(_, b)| b).unwrap_or(0)
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize_prompt(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}
