//! Pipeline configuration file: TOML with one section per stage plus a
//! `[global]` section. Unknown keys are rejected; every stage falls back
//! to defaults when its section is absent. Command-line flags override
//! config values.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub version: Option<u32>,
    #[serde(default)]
    pub global: GlobalConfig,
    #[serde(default)]
    pub clean: CleanSection,
    #[serde(default)]
    pub dedup: DedupSection,
    #[serde(default)]
    pub score: ScoreSection,
    #[serde(default)]
    pub select: SelectSection,
    #[serde(default)]
    pub format: FormatSection,
    #[serde(default)]
    pub mix: MixSection,
    #[serde(default)]
    pub mask: MaskSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlobalConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_counter")]
    pub token_counter: String,
    #[serde(default)]
    pub work_dir: Option<PathBuf>,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
}

fn default_seed() -> u64 {
    0
}
fn default_counter() -> String {
    "whitespace".to_string()
}
fn default_jobs() -> usize {
    16
}

impl Default for GlobalConfig {
    fn default() -> Self {
        GlobalConfig {
            seed: default_seed(),
            token_counter: default_counter(),
            work_dir: None,
            jobs: default_jobs(),
        }
    }
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct CleanSection {
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub rejects: Option<PathBuf>,
    pub min_chars: Option<usize>,
    pub max_char_repeat_ratio: Option<f64>,
    pub max_word_repeat_ratio: Option<f64>,
    pub url_filter: Option<bool>,
    pub emoji_filter: Option<bool>,
    pub list_item_filter: Option<bool>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DedupSection {
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub jaccard: Option<f64>,
    pub cosine: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ScoreSection {
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub offline: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub k: Option<usize>,
    pub t: Option<usize>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SelectSection {
    pub scores: Option<PathBuf>,
    pub n: Option<usize>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct FormatSection {
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub dataset: Option<String>,
    pub single_frac: Option<f64>,
    pub direction_split: Option<f64>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct MixSection {
    pub manifests: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub lengths: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct MaskSection {
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub counter: Option<String>,
    pub supervise_reasoning: Option<bool>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let config: PipelineConfig =
            toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        if let Some(v) = config.version {
            if v != CONFIG_VERSION {
                bail!("unsupported config version {v} (expected {CONFIG_VERSION})");
            }
        }
        Ok(config)
    }
}
