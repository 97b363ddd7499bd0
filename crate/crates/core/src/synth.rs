//! Seeded synthetic catalog paired with a StyleWorld spec.
//!
//! Six styles, each with one checkpoint and two LoRA adapters of different
//! quality, plus two generic checkpoints (one of them the flagged baseline).
//! Image counts per style follow one of three profiles:
//!
//! - `split`: the checkpoint is the most frequent single model while LoRA
//!   images are the majority, so a policy that reads the type from the
//!   prompt alone tends to pair the checkpoint name with the LoRA type.
//! - `checkpoint_heavy`: the checkpoint dominates both counts.
//! - `lora_led`: the best LoRA dominates both counts.
//!
//! In every style the best LoRA scores highest, then the checkpoint, then
//! the weaker LoRA.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::catalog::{PartialParams, RawImageRecord, RawModelRecord};
use crate::schema::DEFAULT_SAMPLING_METHODS;
use crate::scoring::styleworld::{ModelStyle, StyleSpec, StyleWorldSpec};
use crate::util::rng;

pub const STYLES: [(&str, [&str; 2]); 6] = [
    ("pixel", ["pixel", "sprite"]),
    ("anime", ["anime", "manga"]),
    ("photo", ["photo", "dslr"]),
    ("watercolor", ["watercolor", "pastel"]),
    ("cyberpunk", ["neon", "cyberpunk"]),
    ("fantasy", ["fantasy", "elven"]),
];

const SUBJECTS: [&str; 16] = [
    "cat", "dog", "castle", "forest", "city", "girl", "knight", "robot", "car", "mountain", "ship", "flower",
    "portrait", "lighthouse", "village", "bird",
];

const MODIFIERS: [&str; 8] = [
    "highly detailed",
    "at sunset",
    "in the rain",
    "soft lighting",
    "wide angle",
    "close up",
    "masterpiece",
    "dramatic sky",
];

pub const BASELINE_MODEL: &str = "sdxl-base";
pub const GENERIC_MODEL: &str = "dreamshaper-xl";
const BASE_HASH: &str = "sha256-sdxl-base";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Split,
    CheckpointHeavy,
    LoraLed,
}

impl Profile {
    /// Images for (checkpoint, best LoRA, weaker LoRA).
    fn counts(self) -> [usize; 3] {
        match self {
            Profile::Split => [40, 32, 32],
            Profile::CheckpointHeavy => [56, 24, 16],
            Profile::LoraLed => [16, 48, 24],
        }
    }
}

const PROFILES: [Profile; 6] = [
    Profile::Split,
    Profile::Split,
    Profile::CheckpointHeavy,
    Profile::CheckpointHeavy,
    Profile::LoraLed,
    Profile::LoraLed,
];

/// Role of a model within its style.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Checkpoint,
    BestLora,
    WeakLora,
}

pub fn model_name(style: &str, role: Role) -> String {
    match role {
        Role::Checkpoint => format!("{style}-xl"),
        Role::BestLora => format!("{style}-lora-v2"),
        Role::WeakLora => format!("{style}-lora-v1"),
    }
}

#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub spec: StyleWorldSpec,
    pub records: Vec<RawModelRecord>,
}

/// Share of generic-model images among all images.
const OFF_STYLE_IMAGES: [usize; 2] = [60, 40];

pub fn style_world(seed: u64) -> SynthWorld {
    let mut r = rng(seed);
    let n = STYLES.len();
    let styles: Vec<StyleSpec> = STYLES
        .iter()
        .map(|(name, kw)| StyleSpec { name: name.to_string(), keywords: kw.iter().map(|k| k.to_string()).collect() })
        .collect();
    let mut models = Vec::new();
    let mut records = Vec::new();

    for (i, (style, keywords)) in STYLES.iter().enumerate() {
        let mut affinity = vec![0.0; n];
        affinity[i] = 1.0;
        let roles = [(Role::Checkpoint, 0.85), (Role::BestLora, 1.0), (Role::WeakLora, 0.7)];
        for ((role, quality), count) in roles.into_iter().zip(PROFILES[i].counts()) {
            let name = model_name(style, role);
            models.push(ModelStyle { model: name.clone(), affinity: affinity.clone(), generic: 0.3, quality });
            let images = (0..count).map(|_| styled_prompt(&mut r, keywords)).collect();
            records.push(record(&mut r, &name, role != Role::Checkpoint, images, false));
        }
    }
    for (name, count, quality, baseline) in [
        (BASELINE_MODEL, OFF_STYLE_IMAGES[0], 0.6, true),
        (GENERIC_MODEL, OFF_STYLE_IMAGES[1], 0.9, false),
    ] {
        models.push(ModelStyle { model: name.into(), affinity: vec![0.1; n], generic: 1.0, quality });
        let images = (0..count).map(|_| plain_prompt(&mut r)).collect();
        records.push(record(&mut r, name, false, images, baseline));
    }

    let spec = StyleWorldSpec { styles, models, prompt_generic: 0.5, noise: 0.05, tau: 0.01, seed_salt: seed };
    SynthWorld { spec, records }
}

fn pick<'a, R: Rng>(r: &mut R, items: &[&'a str]) -> &'a str {
    items.choose(r).copied().unwrap_or_default()
}

fn plain_prompt<R: Rng>(r: &mut R) -> String {
    format!("{}, {}", pick(r, &SUBJECTS), pick(r, &MODIFIERS))
}

fn styled_prompt<R: Rng>(r: &mut R, keywords: &[&str; 2]) -> String {
    let kw = pick(r, keywords);
    let subject = pick(r, &SUBJECTS);
    let modifier = pick(r, &MODIFIERS);
    if r.gen_bool(0.5) {
        format!("{kw} {subject}, {modifier}")
    } else {
        format!("{subject}, {kw} style, {modifier}")
    }
}

fn record<R: Rng>(r: &mut R, name: &str, lora: bool, prompts: Vec<String>, baseline: bool) -> RawModelRecord {
    let steps = [25, 30, 40][r.gen_range(0..3)];
    let sampler = DEFAULT_SAMPLING_METHODS[r.gen_range(0..DEFAULT_SAMPLING_METHODS.len())];
    let canonical = PartialParams {
        width: Some(1024),
        height: Some(1024),
        sampling_method: Some(sampler.into()),
        sampling_steps: Some(steps),
        cfg_scale: Some(7.0),
    };
    let images = prompts
        .into_iter()
        .enumerate()
        .map(|(i, prompt)| {
            let roll = r.gen_range(0.0..1.0);
            let gen_params = if roll < 0.7 {
                canonical.clone()
            } else if roll < 0.9 {
                let (w, h) = [(832, 1216), (1216, 832), (1024, 1024)][r.gen_range(0..3)];
                PartialParams {
                    width: Some(w),
                    height: Some(h),
                    sampling_method: Some(DEFAULT_SAMPLING_METHODS[r.gen_range(0..5)].into()),
                    sampling_steps: Some([20, 30, 50][r.gen_range(0..3)]),
                    cfg_scale: Some([6.0, 7.5, 8.0][r.gen_range(0..3)]),
                }
            } else {
                PartialParams::default()
            };
            let prompt = if lora && r.gen_bool(0.5) { format!("{prompt} <lora:{name}:0.8>") } else { prompt };
            RawImageRecord {
                id: Some(format!("{name}-{i}")),
                negative_prompt: if r.gen_bool(0.5) { "blurry, lowres, watermark".into() } else { String::new() },
                prompt,
                gen_params,
                base_model_hash: lora.then(|| BASE_HASH.to_string()),
                nsfw: false,
            }
        })
        .collect();
    RawModelRecord {
        id: format!("m-{name}"),
        name: name.into(),
        kind_str: if lora { "LoRA" } else { "Checkpoint" }.into(),
        arch_str: "SDXL 1.0".into(),
        nsfw: false,
        file_available: true,
        file_hashes: if lora { Vec::new() } else { vec![format!("sha256-{name}")] },
        base_model_hash_map: Default::default(),
        download_count: if baseline { 1_000_000 } else { r.gen_range(1_000..50_000) },
        rating_count: r.gen_range(20..500),
        rating: 4.0 + (r.gen_range(0..10) as f64) / 10.0,
        description: format!("{name} for SDXL"),
        baseline,
        sample_images: images,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{ingest, textgen::OfflineClient, QualityThresholds};
    use crate::schema::SamplerSet;
    use crate::scoring::StyleWorld;

    #[test]
    fn world_is_consistent_and_seeded() {
        let w = style_world(1);
        assert!(w.spec.models.len() >= 20);
        assert!(w.spec.styles.len() >= 5);
        let world = StyleWorld::new(w.spec.clone()).unwrap();
        for (i, (style, _)) in STYLES.iter().enumerate() {
            assert_eq!(world.model_style(&model_name(style, Role::BestLora)), Some(i));
        }
        assert_eq!(style_world(1).records, w.records);
        assert_ne!(style_world(2).records, w.records);
    }

    #[test]
    fn every_image_survives_ingestion() {
        let w = style_world(3);
        let images: usize = w.records.iter().map(|r| r.sample_images.len()).sum();
        let out = ingest(&w.records, &QualityThresholds::default(), &SamplerSet::default(), &OfflineClient).unwrap();
        assert_eq!(out.registry.len(), 20);
        assert_eq!(out.pairs.len(), images);
        assert!(images * 8 / 10 >= 500);
        assert_eq!(out.registry.baseline(crate::schema::ArchitectureFamily::Sdxl).unwrap().info.model, BASELINE_MODEL);
        assert!(out.pairs.iter().all(|p| !p.instruction.prompt.contains("<lora")));
    }
}
