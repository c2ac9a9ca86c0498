//! Subcommand implementations. Each command takes an effective `Config`
//! (file + preset + flag overrides already applied) and reports errors
//! through `CliError`, which fixes the process exit code: 1 for usage
//! problems, 2 for data problems, 3 for numeric failures.

pub mod ablate;
pub mod analyze;
pub mod export_prompt;
pub mod pretrain;
pub mod run;

use crate::config::{BackboneKind as CfgKind, Config, MappingStrategy as CfgMapping};
use std::fmt;
use std::path::{Path, PathBuf};
use vpt_core::backbone::{ArchSpec, BackboneKind, FrozenBackbone};
use vpt_core::data::{generate_synthetic, resize_to_model, task_preset, LabeledDataset, TaskSpec};
use vpt_core::prompt::PromptInit;
use vpt_core::transform::{
    class_mean_features, make_mapping, MappingStrategy, OutputTransform, TextPromptHead,
};

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation or config; exit 1.
    Usage(String),
    /// Missing or inconsistent inputs on disk; exit 2.
    Data(String),
    /// Anything the core library rejected; exit 2, or 3 when numeric.
    Core(vpt_core::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) | CliError::Data(msg) => write!(f, "{msg}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Core(e) => {
                if e.is_numeric() {
                    3
                } else {
                    2
                }
            }
        }
    }
}

impl From<vpt_core::Error> for CliError {
    fn from(e: vpt_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(vpt_core::Error::Io(e))
    }
}

impl From<crate::config::ConfigError> for CliError {
    fn from(e: crate::config::ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

pub type CmdResult<T> = Result<T, CliError>;

pub fn first_seed(cfg: &Config) -> CmdResult<u64> {
    cfg.seeds
        .first()
        .copied()
        .ok_or_else(|| CliError::Usage("seeds list is empty".to_string()))
}

pub fn arch_spec(cfg: &Config, seed: u64) -> ArchSpec {
    let input = (
        cfg.backbone.input[0],
        cfg.backbone.input[1],
        cfg.backbone.input[2],
    );
    match cfg.backbone.kind {
        CfgKind::Classifier => ArchSpec::classifier(
            input,
            cfg.backbone.channels.clone(),
            cfg.backbone.pretrain_classes,
            seed,
        ),
        CfgKind::DualEncoder => ArchSpec::dual_encoder(
            input,
            cfg.backbone.channels.clone(),
            cfg.backbone.pretrain_classes,
            cfg.backbone.embed_dim,
            cfg.backbone.temperature,
            seed,
        ),
    }
}

pub fn load_backbone(cfg: &Config) -> CmdResult<FrozenBackbone> {
    let dir = cfg.checkpoint_dir();
    if !dir.is_dir() {
        return Err(CliError::Data(format!(
            "no checkpoint at {}; run `vpt pretrain` first",
            dir.display()
        )));
    }
    Ok(FrozenBackbone::load(&dir)?)
}

/// The pretraining task that produced a checkpoint, regenerated from its
/// recorded seed; the reference set for mapping means and distribution
/// distances.
pub fn pretrain_set(cfg: &Config, backbone: &FrozenBackbone) -> CmdResult<LabeledDataset> {
    let mut spec = TaskSpec::new(
        backbone.spec.num_classes,
        cfg.pretrain.samples,
        backbone.spec.seed,
    );
    spec.dims = backbone.spec.input;
    spec.jitter = cfg.pretrain.jitter;
    let set = generate_synthetic(&spec)?;
    Ok(set.with_stats(backbone.stats.clone()))
}

/// Downstream train/test splits named by the config, resized to the model
/// input and normalized with the pretraining statistics.
pub fn downstream(
    cfg: &Config,
    backbone: &FrozenBackbone,
    seed: u64,
) -> CmdResult<(LabeledDataset, LabeledDataset)> {
    let (mut train, mut test) = task_preset(
        &cfg.dataset.name,
        cfg.dataset.train_samples,
        cfg.dataset.test_samples,
        cfg.dataset.jitter,
        seed,
    )?;
    let (_, h, w) = backbone.spec.input;
    if train.dims() != backbone.spec.input {
        train = resize_to_model(&train, h, w);
        test = resize_to_model(&test, h, w);
    }
    train = train.with_stats(backbone.stats.clone());
    test = test.with_stats(backbone.stats.clone());
    Ok((train, test))
}

pub fn core_mapping_strategy(s: CfgMapping) -> MappingStrategy {
    match s {
        CfgMapping::Semantic => MappingStrategy::Semantic,
        CfgMapping::Arbitrary => MappingStrategy::Arbitrary,
        CfgMapping::Swapped => MappingStrategy::Swapped,
    }
}

/// The output transform the config asks for: a label mapping for
/// classifiers, a (possibly noise-degraded) text-prompt head for dual
/// encoders.
pub fn build_transform(
    cfg: &Config,
    backbone: &FrozenBackbone,
    down_train: &LabeledDataset,
    seed: u64,
) -> CmdResult<OutputTransform> {
    match backbone.spec.kind {
        BackboneKind::Classifier => {
            let pre = pretrain_set(cfg, backbone)?;
            let pre_feats = backbone.penultimate_features(&pre.normalized_all())?;
            let pre_means =
                class_mean_features(&pre_feats, &pre.labels, pre.num_classes())?;
            let down_feats = backbone.penultimate_features(&down_train.normalized_all())?;
            let down_means =
                class_mean_features(&down_feats, &down_train.labels, down_train.num_classes())?;
            let mapping = make_mapping(
                core_mapping_strategy(cfg.transform.mapping),
                &down_means,
                &pre_means,
                seed,
            )?;
            Ok(OutputTransform::Mapped(mapping))
        }
        BackboneKind::DualEncoder => {
            let table = backbone.table.as_ref().ok_or_else(|| {
                CliError::Data("checkpoint has no class-embedding table".to_string())
            })?;
            let targets: Vec<usize> = (0..down_train.num_classes()).collect();
            let head = TextPromptHead::new(
                table,
                &targets,
                backbone.spec.temperature,
                cfg.transform.sigma,
                seed,
            )?;
            Ok(OutputTransform::TextHead(head))
        }
    }
}

pub fn prompt_init(cfg: &Config) -> CmdResult<PromptInit> {
    match cfg.template.init.as_str() {
        "zeros" => Ok(PromptInit::Zeros),
        "uniform" => Ok(PromptInit::Uniform(cfg.template.amplitude)),
        other => Err(CliError::Usage(format!(
            "template.init must be \"zeros\" or \"uniform\", got {other:?}"
        ))),
    }
}

/// Self-describing copy of the effective config, named by its hash so
/// distinct configs never clobber each other and reruns are byte-stable.
pub fn write_provenance(dir: &Path, cfg: &Config) -> CmdResult<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("config-{}.toml", &cfg.hash()[..8]));
    std::fs::write(&path, cfg.canonical_text())?;
    Ok(path)
}
