//! Run configuration: one TOML file plus flag overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use t2i_core::catalog::QualityThresholds;
use t2i_core::pipeline::TrainConfig;

/// Named strategy plus its options table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Strategy {
    pub name: String,
    #[serde(default = "empty_table")]
    pub options: Value,
}

fn empty_table() -> Value {
    Value::Object(Default::default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Raw model records, one JSON object per line.
    pub records: PathBuf,
    /// Root under which per-config run directories are created.
    #[serde(default = "default_runs")]
    pub runs: PathBuf,
}

fn default_runs() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub n_images: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { n_images: t2i_core::evaluation::DEFAULT_IMAGES_PER_API }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub paths: Paths,
    #[serde(default)]
    pub quality: QualityThresholds,
    #[serde(default = "offline")]
    pub textgen: Strategy,
    pub backend: Strategy,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSettings,
}

fn offline() -> Strategy {
    Strategy { name: "offline".into(), options: empty_table() }
}

/// A validated configuration with paths resolved against its file.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: RunConfig,
    pub seed: u64,
    pub run_dir: PathBuf,
    base: PathBuf,
}

impl Loaded {
    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("config: reading {}", path.display()))?;
        let mut config: RunConfig = toml::from_str(&text).with_context(|| format!("config: parsing {}", path.display()))?;
        if seed_override.is_some() {
            config.seed = seed_override;
        }
        let Some(seed) = config.seed else {
            bail!("config: a seed is required (set `seed` or pass --seed)");
        };
        config.train = config.train.clone().with_seed(seed);
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let run_dir = base.join(&config.paths.runs).join(config_hash(&config));
        Ok(Loaded { config, seed, run_dir, base })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.base.join(p)
    }

    /// Strategy options with a relative `world` path resolved.
    pub fn backend_options(&self) -> Value {
        let mut opts = self.config.backend.options.clone();
        if let Some(Value::String(w)) = opts.get("world") {
            let resolved = self.resolve(Path::new(w)).to_string_lossy().into_owned();
            opts["world"] = Value::String(resolved);
        }
        opts
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.run_dir.join(name)
    }
}

/// First 12 hex digits of the SHA-256 of the canonical JSON form.
pub fn config_hash(config: &RunConfig) -> String {
    let canonical = serde_json::to_string(config).expect("config serializes");
    let digest = Sha256::digest(canonical.as_bytes());
    digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
}
