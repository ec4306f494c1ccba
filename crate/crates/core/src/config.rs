//! The single TOML configuration file shared by every command.
//!
//! Every key has a default, unknown keys are rejected, and the effective
//! configuration is written next to each command's outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augmentation::AugConfig;
use crate::curation::CurationConfig;
use crate::dataset::{default_categories, write_atomic, Split, SplitRatios};
use crate::error::{Error, Result};
use crate::fewshot::FewShotConfig;
use crate::head::ContrastiveConfig;
use crate::model::ModelConfig;
use crate::synth::SynthConfig;
use crate::text::{BehaviourVocabulary, PromptTemplate, Tokenizer, TokenizerMode, DEFAULT_TEMPLATE};
use crate::training::{TextSetup, TrainConfig};

pub const EFFECTIVE_CONFIG_FILE: &str = "effective-config.toml";

/// Training keys that mirror a setting owned elsewhere in the file.
const DERIVED_TRAINING_KEYS: &[(&str, &str)] = &[("seed", "the top-level seed"), ("temperature_mode", "[contrastive]")];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub categories: Vec<String>,
    pub split: SplitRatios,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            categories: default_categories(),
            split: SplitRatios::default(),
        }
    }
}

/// Augmentation settings. The output size always follows the model input
/// size, and the on/off switch lives with the training sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugSection {
    pub fill_value: [f32; 3],
    pub flip_prob: f64,
    pub jitter_strength: [f32; 3],
    pub grayscale_prob: f64,
}

impl Default for AugSection {
    fn default() -> Self {
        let d = AugConfig::default();
        Self {
            fill_value: d.fill_value,
            flip_prob: d.flip_prob,
            jitter_strength: d.jitter_strength,
            grayscale_prob: d.grayscale_prob,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextSection {
    pub template: String,
    /// Substring rewrites applied to labels before prompting.
    pub remap: BTreeMap<String, String>,
    pub tokenizer: TokenizerMode,
    /// Desk mode: optional vocabulary override. Byte-pair mode: required.
    pub vocab_file: Option<PathBuf>,
    pub merges_file: Option<PathBuf>,
}

impl Default for TextSection {
    fn default() -> Self {
        Self {
            template: DEFAULT_TEMPLATE.to_string(),
            remap: BehaviourVocabulary::default().rules().iter().cloned().collect(),
            tokenizer: TokenizerMode::Desk,
            vocab_file: None,
            merges_file: None,
        }
    }
}

impl TextSection {
    /// Relative file paths resolve against `base`.
    pub fn build(&self, base: &Path) -> Result<TextSetup> {
        let resolve = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
        let tokenizer = match (self.tokenizer, &self.vocab_file, &self.merges_file) {
            (TokenizerMode::Desk, None, _) => Tokenizer::desk(),
            (TokenizerMode::Desk, Some(v), _) => Tokenizer::desk_from_file(&resolve(v))?,
            (TokenizerMode::BpeFile, Some(v), Some(m)) => Tokenizer::bpe_from_files(&resolve(v), &resolve(m))?,
            (TokenizerMode::BpeFile, _, _) => {
                return Err(Error::Config("bpe-file tokenizer needs vocab_file and merges_file".into()))
            }
        };
        Ok(TextSetup {
            tokenizer,
            template: PromptTemplate::new(self.template.clone())?,
            vocabulary: BehaviourVocabulary::new(self.remap.clone())?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    pub split: Split,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self { split: Split::Test }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlobalConfig {
    /// Seeds synthesis, splitting and supervised training.
    pub seed: u64,
    pub dataset: DatasetSection,
    pub synth: SynthConfig,
    pub curation: CurationConfig,
    pub augmentation: AugSection,
    pub model: ModelConfig,
    pub contrastive: ContrastiveConfig,
    pub training: TrainConfig,
    pub fewshot: FewShotConfig,
    pub text: TextSection,
    pub evaluation: EvaluationSection,
}

impl GlobalConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        if let Some(training) = table.get("training").and_then(|t| t.as_table()) {
            for (key, home) in DERIVED_TRAINING_KEYS {
                if training.contains_key(*key) {
                    return Err(Error::Config(format!("training.{key} is not settable; use {home}")));
                }
            }
        }
        let mut cfg: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Copies the shared settings into the sections that carry them.
    fn sync(&mut self) {
        self.training.seed = self.seed;
        self.training.temperature_mode = self.contrastive.temperature_mode;
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Overrides the seed everywhere it is used.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.sync();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.categories.is_empty() {
            return Err(Error::Config("dataset.categories must be non-empty".into()));
        }
        self.synth.validate()?;
        self.curation.validate()?;
        self.model.validate()?;
        self.aug_config().validate(self.model.patch_size)?;
        self.training.validate()?;
        self.fewshot.validate()?;
        PromptTemplate::new(self.text.template.clone())?;
        BehaviourVocabulary::new(self.text.remap.clone())?;
        if !(self.contrastive.tau_init > 0.0 && self.contrastive.tau_init.is_finite()) {
            return Err(Error::Config("contrastive.tau_init must be positive".into()));
        }
        Ok(())
    }

    pub fn aug_config(&self) -> AugConfig {
        AugConfig {
            target_height: self.model.image_height,
            target_width: self.model.image_width,
            fill_value: self.augmentation.fill_value,
            flip_prob: self.augmentation.flip_prob,
            jitter_strength: self.augmentation.jitter_strength,
            grayscale_prob: self.augmentation.grayscale_prob,
            enabled: true,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        let err = |e: &dyn std::fmt::Display| Error::Config(e.to_string());
        let mut table = toml::Table::try_from(self).map_err(|e| err(&e))?;
        if let Some(training) = table.get_mut("training").and_then(|t| t.as_table_mut()) {
            for (key, _) in DERIVED_TRAINING_KEYS {
                training.remove(*key);
            }
        }
        toml::to_string_pretty(&table).map_err(|e| err(&e))
    }

    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    /// Writes the effective configuration into `out_dir`.
    pub fn echo(&self, out_dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let path = out_dir.join(EFFECTIVE_CONFIG_FILE);
        write_atomic(&path, self.to_toml()?.as_bytes())?;
        Ok(path)
    }
}
