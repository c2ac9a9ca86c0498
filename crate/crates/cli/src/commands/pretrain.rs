//! Build, pretrain, freeze, and save the backbone checkpoint.

use super::{arch_spec, first_seed, write_provenance, CliError, CmdResult};
use crate::config::Config;
use vpt_core::backbone::build_backbone;
use vpt_core::data::{channel_stats, generate_synthetic, TaskSpec};

pub fn cmd_pretrain(cfg: &Config, force: bool) -> CmdResult<()> {
    let seed = first_seed(cfg)?;
    let dir = cfg.checkpoint_dir();
    if dir.exists() {
        if !force {
            return Err(CliError::Data(format!(
                "checkpoint directory {} already exists; pass --force to replace it",
                dir.display()
            )));
        }
        std::fs::remove_dir_all(&dir)?;
    }

    let spec = arch_spec(cfg, seed);
    let mut task = TaskSpec::new(cfg.backbone.pretrain_classes, cfg.pretrain.samples, seed);
    task.dims = spec.input;
    task.jitter = cfg.pretrain.jitter;
    let train = generate_synthetic(&task)?;
    let stats = channel_stats(&train.images);
    let train = train.with_stats(stats.clone());

    let mut backbone = build_backbone(&spec, stats)?;
    let history = backbone.pretrain(
        &train,
        cfg.pretrain.epochs,
        cfg.pretrain.batch,
        cfg.pretrain.lr,
        seed,
    )?;
    backbone.freeze();
    backbone.save(&dir)?;
    write_provenance(&dir, cfg)?;

    let first = history.first().copied().unwrap_or(f64::NAN);
    let last = history.last().copied().unwrap_or(f64::NAN);
    println!(
        "pretrained {} on {} images ({} epochs): loss {first:.4} -> {last:.4}, saved to {}",
        cfg.backbone.kind,
        train.len(),
        cfg.pretrain.epochs,
        dir.display()
    );
    Ok(())
}
