//! StyleWorld: a deterministic synthetic generation and scoring backend.
//!
//! Prompts carry a latent style, read off style keywords. Each model has a
//! style-affinity vector, a generic component and a quality scalar. A
//! "generated image" is a feature vector
//!
//! ```text
//! [affinity_1 .. affinity_S, generic, quality * param_quality] + noise
//! ```
//!
//! and the scorers are smooth functions of the text/image cosine and of the
//! quality channel, so models whose style matches the prompt score higher.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{cosine, GenerationBackend, ImageFeatures, Provenance, Result, ScorerBackend, ScoringError};
use crate::schema::tokens::tokenize_prompt;
use crate::schema::{serialize_api, ArchitectureFamily, Instruction, ParamInfo, T2IApi};
use crate::util::{derive_seed, rng, stable_hash};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleSpec {
    pub name: String,
    pub keywords: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelStyle {
    pub model: String,
    /// One nonnegative weight per style.
    pub affinity: Vec<f64>,
    /// Weight on the style-neutral direction.
    pub generic: f64,
    pub quality: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleWorldSpec {
    pub styles: Vec<StyleSpec>,
    pub models: Vec<ModelStyle>,
    /// Weight of the style-neutral direction in prompt embeddings.
    #[serde(default = "default_prompt_generic")]
    pub prompt_generic: f64,
    /// Amplitude of the uniform per-image noise.
    #[serde(default)]
    pub noise: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Mixed into every per-image noise seed.
    #[serde(default)]
    pub seed_salt: u64,
}

fn default_prompt_generic() -> f64 {
    0.5
}

fn default_tau() -> f64 {
    0.01
}

pub struct StyleWorld {
    spec: StyleWorldSpec,
    keyword_style: HashMap<String, usize>,
    models: HashMap<String, usize>,
}

impl std::fmt::Debug for StyleWorld {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StyleWorld").field("styles", &self.spec.styles.len()).field("models", &self.models.len()).finish()
    }
}

/// Multiplier in `(0, 1]` for how well generation parameters suit the
/// architecture: resolution near native, more steps (saturating), CFG near 7.
pub fn param_quality(p: &ParamInfo, arch: ArchitectureFamily) -> f64 {
    let native = arch.native_resolution() as f64;
    let ratio = (p.width as f64 * p.height as f64) / (native * native);
    let res = (-0.5 * ratio.log2().powi(2)).exp();
    let steps = 1.0 - 0.5 * (-(p.sampling_steps as f64) / 15.0).exp();
    let cfg = (-((p.cfg_scale - 7.0) / 6.0).powi(2)).exp();
    res * steps * cfg
}

impl StyleWorld {
    pub fn new(spec: StyleWorldSpec) -> Result<Self> {
        let bad = |m: String| Err(ScoringError::InvalidSpec(m));
        let n_styles = spec.styles.len();
        if n_styles == 0 {
            return bad("no styles".into());
        }
        if !(spec.tau > 0.0) {
            return Err(ScoringError::NonpositiveTau(spec.tau));
        }
        if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
            return bad(format!("noise amplitude {}", spec.noise));
        }
        if !(spec.prompt_generic > 0.0) {
            return bad("prompt_generic must be positive".into());
        }
        let mut keyword_style = HashMap::new();
        for (i, s) in spec.styles.iter().enumerate() {
            for k in &s.keywords {
                let k = k.to_lowercase();
                if keyword_style.insert(k.clone(), i).is_some() {
                    return bad(format!("keyword {k:?} used by two styles"));
                }
            }
        }
        let mut models = HashMap::new();
        for (i, m) in spec.models.iter().enumerate() {
            if m.affinity.len() != n_styles {
                return bad(format!("model {:?}: affinity has {} entries, expected {n_styles}", m.model, m.affinity.len()));
            }
            if m.affinity.iter().any(|a| !(*a >= 0.0)) || !(m.generic >= 0.0) {
                return bad(format!("model {:?}: negative weights", m.model));
            }
            if m.generic + m.affinity.iter().sum::<f64>() <= 0.0 {
                return bad(format!("model {:?}: all weights zero", m.model));
            }
            if !(0.0..=1.5).contains(&m.quality) {
                return bad(format!("model {:?}: quality {} outside [0, 1.5]", m.model, m.quality));
            }
            if models.insert(m.model.clone(), i).is_some() {
                return bad(format!("duplicate model {:?}", m.model));
            }
        }
        Ok(StyleWorld { spec, keyword_style, models })
    }

    pub fn spec(&self) -> &StyleWorldSpec {
        &self.spec
    }

    pub fn n_styles(&self) -> usize {
        self.spec.styles.len()
    }

    pub fn model(&self, name: &str) -> Option<&ModelStyle> {
        self.models.get(name).map(|&i| &self.spec.models[i])
    }

    fn style_counts(&self, text: &str) -> Vec<f64> {
        let mut c = vec![0.0; self.n_styles()];
        for w in tokenize_prompt(text) {
            if let Some(&s) = self.keyword_style.get(&w) {
                c[s] += 1.0;
            }
        }
        c
    }

    /// Dominant style of a prompt, if one style has strictly the most keywords.
    pub fn prompt_style(&self, prompt: &str) -> Option<usize> {
        unique_argmax(&self.style_counts(prompt))
    }

    /// Dominant style of a model, if its affinity has a unique positive maximum.
    pub fn model_style(&self, model: &str) -> Option<usize> {
        self.model(model).and_then(|m| unique_argmax(&m.affinity))
    }

    fn quality_channel(x: &ImageFeatures) -> f64 {
        x.vector.last().copied().unwrap_or(0.0).clamp(0.0, 1.5)
    }

    fn check(&self, x: &ImageFeatures) -> Result<()> {
        let want = self.n_styles() + 2;
        if x.vector.len() != want {
            return Err(ScoringError::DimensionMismatch { expected: want, got: x.vector.len() });
        }
        Ok(())
    }

    fn text_image_cosine(&self, prompt: &str, x: &ImageFeatures) -> Result<f64> {
        cosine(&self.embed_text(prompt)?, &self.embed_image(x)?)
    }
}

fn unique_argmax(v: &[f64]) -> Option<usize> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return None;
    }
    let mut hits = v.iter().enumerate().filter(|(_, x)| **x == max);
    let first = hits.next().map(|(i, _)| i);
    if hits.next().is_some() {
        None
    } else {
        first
    }
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

impl GenerationBackend for StyleWorld {
    fn name(&self) -> &str {
        "styleworld"
    }

    fn dimension(&self) -> usize {
        self.n_styles() + 2
    }

    fn generate(&self, api: &T2IApi, instruction: &Instruction, seed: u64) -> Result<ImageFeatures> {
        let m = self.model(&api.info.model).ok_or_else(|| ScoringError::UnknownModel(api.info.model.clone()))?;
        let api_id = serde_json::to_string(&serialize_api(api)).expect("api serializes");
        let noise_seed = derive_seed(
            self.spec.seed_salt,
            &[
                api_id.as_bytes(),
                instruction.prompt.as_bytes(),
                instruction.negative_prompt.as_bytes(),
                &seed.to_le_bytes(),
            ],
        );
        let mut r = rng(noise_seed);
        let amp = self.spec.noise;
        let negated = self.style_counts(&instruction.negative_prompt);
        let mut vector = Vec::with_capacity(self.n_styles() + 2);
        for (s, a) in m.affinity.iter().enumerate() {
            let damp = if negated[s] > 0.0 { 0.5 } else { 1.0 };
            vector.push(a * damp + amp * r.gen_range(-1.0..=1.0));
        }
        vector.push(m.generic + amp * r.gen_range(-1.0..=1.0));
        let q = m.quality * param_quality(&api.params, api.info.base_model);
        vector.push(q + 0.5 * amp * r.gen_range(-1.0..=1.0));
        Ok(ImageFeatures {
            vector,
            unit_norm: false,
            provenance: Provenance { api_id, prompt_hash: stable_hash(instruction.prompt.as_bytes()), seed },
        })
    }
}

impl ScorerBackend for StyleWorld {
    fn name(&self) -> &str {
        "styleworld"
    }

    fn dimension(&self) -> usize {
        self.n_styles() + 1
    }

    fn embed_text(&self, prompt: &str) -> Result<Vec<f64>> {
        let mut v = self.style_counts(prompt);
        v.push(self.spec.prompt_generic);
        Ok(unit(v))
    }

    fn embed_image(&self, x: &ImageFeatures) -> Result<Vec<f64>> {
        self.check(x)?;
        Ok(unit(x.vector[..self.n_styles() + 1].to_vec()))
    }

    fn reward_scalar(&self, prompt: &str, x: &ImageFeatures) -> Result<f64> {
        self.check(x)?;
        let cos = self.text_image_cosine(prompt, x)?;
        Ok(2.0 * cos + 1.5 * Self::quality_channel(x) - 1.5)
    }

    fn hps_similarity(&self, prompt: &str, x: &ImageFeatures) -> Result<f64> {
        self.check(x)?;
        let cos = self.text_image_cosine(prompt, x)?;
        Ok(0.3 * cos * (0.5 + 0.5 * Self::quality_channel(x)))
    }

    fn tau(&self) -> f64 {
        self.spec.tau
    }
}

/// Compact world used by unit tests: one style-specialist per style plus a
/// generic model.
pub fn fixture_spec(noise: f64) -> StyleWorldSpec {
    let names = ["pixel", "anime", "photo", "watercolor", "cyberpunk"];
    let keywords: BTreeMap<&str, [&str; 2]> = BTreeMap::from([
        ("pixel", ["pixel", "sprite"]),
        ("anime", ["anime", "manga"]),
        ("photo", ["photo", "dslr"]),
        ("watercolor", ["watercolor", "pastel"]),
        ("cyberpunk", ["neon", "cyberpunk"]),
    ]);
    let styles = names
        .iter()
        .map(|n| StyleSpec { name: n.to_string(), keywords: keywords[n].iter().map(|k| k.to_string()).collect() })
        .collect();
    let mut models: Vec<ModelStyle> = names
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let mut affinity = vec![0.0; names.len()];
            affinity[i] = 1.0;
            ModelStyle { model: format!("{n}-xl"), affinity, generic: 0.3, quality: 1.0 }
        })
        .collect();
    models.push(ModelStyle {
        model: "sdxl-base".into(),
        affinity: vec![0.1; names.len()],
        generic: 1.0,
        quality: 0.6,
    });
    StyleWorldSpec { styles, models, prompt_generic: 0.5, noise, tau: 0.01, seed_salt: 7 }
}
