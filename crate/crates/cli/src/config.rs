//! Experiment configuration: a TOML file where every field has a default,
//! unknown keys are rejected, and the run-identifying hash is the SHA-256
//! digest of the canonicalized (re-serialized) effective config, taken
//! after preset and flag overrides are applied.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[clap(rename_all = "lower")]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[clap(rename_all = "snake_case")]
pub enum BackboneKind {
    Classifier,
    DualEncoder,
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackboneKind::Classifier => write!(f, "classifier"),
            BackboneKind::DualEncoder => write!(f, "dual_encoder"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[clap(rename_all = "snake_case")]
pub enum TemplateKind {
    Padding,
    FixedPatch,
    RandomPatch,
}

impl fmt::Display for TemplateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TemplateKind::Padding => write!(f, "padding"),
            TemplateKind::FixedPatch => write!(f, "fixed_patch"),
            TemplateKind::RandomPatch => write!(f, "random_patch"),
        }
    }
}

impl From<TemplateKind> for vpt_core::prompt::TemplateKind {
    fn from(kind: TemplateKind) -> Self {
        match kind {
            TemplateKind::Padding => vpt_core::prompt::TemplateKind::Padding,
            TemplateKind::FixedPatch => vpt_core::prompt::TemplateKind::FixedPatch,
            TemplateKind::RandomPatch => vpt_core::prompt::TemplateKind::RandomPatch,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[clap(rename_all = "snake_case")]
pub enum MappingStrategy {
    Semantic,
    Arbitrary,
    Swapped,
}

impl fmt::Display for MappingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MappingStrategy::Semantic => write!(f, "semantic"),
            MappingStrategy::Arbitrary => write!(f, "arbitrary"),
            MappingStrategy::Swapped => write!(f, "swapped"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// Channels per conv stage; each stage halves the spatial extent.
    pub channels: Vec<usize>,
    /// Model input dims (C, H, W).
    pub input: [usize; 3],
    /// Pretraining classes (classifier head size and embedding-table rows).
    pub pretrain_classes: usize,
    /// Dual-encoder feature dimension.
    pub embed_dim: usize,
    /// Logit scale applied to cosine similarities.
    pub temperature: f32,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            kind: BackboneKind::DualEncoder,
            channels: vec![16, 32, 64],
            input: [3, 32, 32],
            pretrain_classes: 8,
            embed_dim: 64,
            temperature: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub samples: usize,
    pub epochs: usize,
    pub lr: f32,
    pub batch: usize,
    /// Position/scale/rotation/hue jitter of the pretraining renders, in [0,1].
    pub jitter: f32,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            samples: 512,
            epochs: 8,
            lr: 0.05,
            batch: 32,
            jitter: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Task preset: down-4-near | down-4-far | down-4-domains | down-2 | pretrain-8.
    pub name: String,
    pub train_samples: usize,
    pub test_samples: usize,
    pub jitter: f32,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            name: "down-4-far".to_string(),
            train_samples: 128,
            test_samples: 256,
            jitter: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemplateConfig {
    pub kind: TemplateKind,
    pub p: usize,
    /// "zeros" or "uniform" (symmetric around zero, half-width `amplitude`).
    pub init: String,
    pub amplitude: f32,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        TemplateConfig {
            kind: TemplateKind::Padding,
            p: 4,
            init: "uniform".to_string(),
            amplitude: 0.03,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformConfig {
    /// Classifier label mapping strategy.
    pub mapping: MappingStrategy,
    /// Dual-encoder text-quality noise level.
    pub sigma: f32,
}

impl Default for TransformConfig {
    fn default() -> Self {
        TransformConfig {
            mapping: MappingStrategy::Semantic,
            sigma: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Prompt-tuning peak learning rate (cosine-decayed to zero).
    pub lr0: f32,
    pub epochs: usize,
    pub batch: usize,
    pub lp_lr: f32,
    pub ft_lr: f32,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr0: 40.0,
            epochs: 50,
            batch: 32,
            lp_lr: 0.1,
            ft_lr: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Datasets joined into the analysis report; each needs tp + vp runs.
    pub datasets: Vec<String>,
    pub sample_cap: usize,
    pub num_pairs: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            datasets: vec![
                "down-4-near".to_string(),
                "down-4-far".to_string(),
                "down-4-domains".to_string(),
            ],
            sample_cap: 512,
            num_pairs: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub backbone: BackboneConfig,
    pub pretrain: PretrainConfig,
    pub dataset: DatasetConfig,
    pub template: TemplateConfig,
    pub transform: TransformConfig,
    pub optimizer: OptimizerConfig,
    pub analysis: AnalysisConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            out_dir: PathBuf::from("runs"),
            seeds: vec![0],
            backbone: BackboneConfig::default(),
            pretrain: PretrainConfig::default(),
            dataset: DatasetConfig::default(),
            template: TemplateConfig::default(),
            transform: TransformConfig::default(),
            optimizer: OptimizerConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

/// Config errors surface as usage problems (exit code 1).
#[derive(Debug)]
pub enum ConfigError {
    Read(PathBuf, std::io::Error),
    Parse(PathBuf, toml::de::Error),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Read(p, e) => write!(f, "cannot read config {}: {e}", p.display()),
            ConfigError::Parse(p, e) => write!(f, "invalid config {}: {e}", p.display()),
        }
    }
}

impl std::error::Error for ConfigError {}

impl Config {
    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Read(path.to_path_buf(), e))?;
        toml::from_str(&text).map_err(|e| ConfigError::Parse(path.to_path_buf(), e))
    }

    /// Paper-recipe overrides: the published tuning setup (1,000 epochs,
    /// batch 256, lr 40, padding p=30 on 3x224x224 inputs). Desk is the
    /// default and changes nothing.
    pub fn apply_preset(&mut self, preset: Preset) {
        if preset == Preset::Paper {
            self.optimizer.lr0 = 40.0;
            self.optimizer.epochs = 1000;
            self.optimizer.batch = 256;
            self.template.kind = TemplateKind::Padding;
            self.template.p = 30;
            self.backbone.input = [3, 224, 224];
        }
    }

    pub fn apply_overrides(&mut self, seed: Option<u64>, out: Option<&Path>) {
        if let Some(s) = seed {
            self.seeds = vec![s];
        }
        if let Some(o) = out {
            self.out_dir = o.to_path_buf();
        }
    }

    /// Canonical text: the struct re-serialized to TOML, independent of
    /// source formatting, comments, and key order.
    pub fn canonical_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 16 hex chars of SHA-256 over the canonical text.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_text().as_bytes());
        let mut out = String::with_capacity(16);
        for byte in &digest[..8] {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.out_dir.join(format!("ckpt-{}", self.backbone.kind))
    }

    pub fn runs_csv(&self) -> PathBuf {
        self.out_dir.join("runs.csv")
    }
}
