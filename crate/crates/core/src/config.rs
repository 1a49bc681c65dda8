//! Declarative run description, read from and written to TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::SynthSpec;
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::lm::{LmConfig, TrainConfig};
use crate::prompt::PromptOptions;
use crate::vision::{RenderSpec, DEFAULT_FOCUS_PROMPT};
use crate::vq::TokenizerConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Where a domain's data comes from: a dataset file or an inline
/// synthetic spec (exactly one of the two).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSource {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureSection {
    pub enabled: bool,
    #[serde(flatten)]
    pub params: FeatureConfig,
}

impl Default for FeatureSection {
    fn default() -> Self {
        FeatureSection {
            enabled: true,
            params: FeatureConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Mock,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaptionSection {
    pub enabled: bool,
    pub provider: ProviderKind,
    /// Cache directory; relative paths resolve against the output directory.
    pub cache_dir: PathBuf,
    pub focus_prompt: String,
    pub concurrency: usize,
    pub render: RenderSpec,
}

impl Default for CaptionSection {
    fn default() -> Self {
        CaptionSection {
            enabled: false,
            provider: ProviderKind::Mock,
            cache_dir: PathBuf::from("caption-cache"),
            focus_prompt: DEFAULT_FOCUS_PROMPT.to_string(),
            concurrency: 4,
            render: RenderSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainSection {
    pub enabled: bool,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            enabled: true,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneSection {
    /// Fraction of the target training split used, stratified.
    pub train_fraction: f64,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        FinetuneSection {
            train_fraction: 1.0,
            train: TrainConfig::finetune_default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlotSection {
    pub overlay_instances: usize,
    pub width: u32,
    pub panel_height: u32,
}

impl Default for PlotSection {
    fn default() -> Self {
        PlotSection {
            overlay_instances: 4,
            width: 640,
            panel_height: 120,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    pub target_domain: String,
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
    pub domains: Vec<DomainSource>,
    #[serde(default)]
    pub tokenizer: TokenizerConfig,
    #[serde(default)]
    pub features: FeatureSection,
    #[serde(default)]
    pub caption: CaptionSection,
    #[serde(default)]
    pub prompt: PromptOptions,
    #[serde(default)]
    pub lm: LmConfig,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub finetune: FinetuneSection,
    #[serde(default)]
    pub plots: PlotSection,
}

fn default_eval_fraction() -> f64 {
    0.25
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Relative dataset paths resolve against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for d in &mut cfg.domains {
            if let Some(p) = &d.path {
                if p.is_relative() {
                    d.path = Some(base.join(p));
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.domains.is_empty() {
            return Err(Error::Config("at least one domain is required".into()));
        }
        for (i, d) in self.domains.iter().enumerate() {
            if d.path.is_some() == d.synth.is_some() {
                return Err(Error::Config(format!(
                    "domain {} needs exactly one of path or synth",
                    d.name
                )));
            }
            if let Some(s) = &d.synth {
                if s.domain != d.name {
                    return Err(Error::Config(format!(
                        "synthetic spec domain {:?} differs from domain name {:?}",
                        s.domain, d.name
                    )));
                }
            }
            if self.domains[..i].iter().any(|o| o.name == d.name) {
                return Err(Error::Config(format!("domain {} listed twice", d.name)));
            }
        }
        if !self.domains.iter().any(|d| d.name == self.target_domain) {
            return Err(Error::Config(format!(
                "target domain {} is not among the domains",
                self.target_domain
            )));
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return Err(Error::Config("eval_fraction must lie in (0, 1)".into()));
        }
        let f = self.finetune.train_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Config("finetune.train_fraction must lie in (0, 1]".into()));
        }
        if self.prompt.target_len == 0 {
            return Err(Error::Config("prompt.target_len must be positive".into()));
        }
        self.tokenizer.validate()?;
        self.lm.validate()?;
        self.pretrain.train.validate()?;
        self.finetune.train.validate()?;
        if self.caption.enabled {
            self.caption.render.validate()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
schema_version = 1
output_dir = "out"
target_domain = "a"

[[domains]]
name = "a"
path = "a.jsonl"
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.eval_fraction, 0.25);
        assert_eq!(cfg.prompt.target_len, 8);
        assert!(cfg.features.enabled && !cfg.caption.enabled);
        assert_eq!(cfg.finetune.train.learning_rate, 5e-4);
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig::from_toml(MINIMAL).unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(RunConfig::from_toml(&MINIMAL.replace("schema_version = 1", "schema_version = 2")).is_err());
        assert!(RunConfig::from_toml(&MINIMAL.replace("target_domain = \"a\"", "target_domain = \"b\"")).is_err());
        assert!(RunConfig::from_toml(&MINIMAL.replace("path = \"a.jsonl\"", "")).is_err());
        assert!(RunConfig::from_toml("nonsense = [").is_err());
    }
}
