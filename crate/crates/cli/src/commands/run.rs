//! One adaptation run per seed: zero-shot (tp), visual prompt (vp),
//! linear probe (lp), or full fine-tuning (ft). Appends one CSV row per
//! run and writes learned artifacts to fresh hash-stamped directories.

use super::{
    build_transform, downstream, load_backbone, prompt_init, write_provenance, CmdResult,
};
use crate::config::Config;
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;
use vpt_core::prompt::{init_prompt, save_prompt, PromptSpec, Prompter};
use vpt_core::train::{
    append_run_csv, evaluate, fine_tune, linear_probe, prompt_tune, OptimTarget, OptimizerState,
    RunResult,
};
use vpt_core::transform::{save_mapping, OutputTransform};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
#[clap(rename_all = "lower")]
pub enum Method {
    Tp,
    Vp,
    Lp,
    Ft,
}

fn artifact_dir(cfg: &Config, prefix: &str, seed: u64) -> PathBuf {
    cfg.out_dir.join(format!(
        "{prefix}-{}-s{seed}-{}",
        cfg.dataset.name,
        &cfg.hash()[..8]
    ))
}

pub fn cmd_run(cfg: &Config, method: Method) -> CmdResult<()> {
    let backbone = load_backbone(cfg)?;
    write_provenance(&cfg.out_dir, cfg)?;
    let batch = cfg.optimizer.batch;

    for &seed in &cfg.seeds {
        let (train, test) = downstream(cfg, &backbone, seed)?;
        let mut row = match method {
            Method::Tp => {
                let transform = build_transform(cfg, &backbone, &train, seed)?;
                let start = Instant::now();
                let train_acc = evaluate(&backbone, &transform, None, &train, batch)?;
                let test_acc = evaluate(&backbone, &transform, None, &test, batch)?;
                RunResult {
                    method: "TP".to_string(),
                    dataset: String::new(),
                    template: String::new(),
                    p: 0,
                    seed,
                    epochs: 0,
                    loss_history: Vec::new(),
                    train_acc,
                    test_acc,
                    wall_ms: start.elapsed().as_millis(),
                    config_hash: String::new(),
                }
            }
            Method::Vp => {
                let transform = build_transform(cfg, &backbone, &train, seed)?;
                let spec = PromptSpec::new(
                    cfg.template.kind.into(),
                    cfg.template.p,
                    backbone.spec.input,
                );
                let mut prompter = Prompter::new(spec, seed)?;
                let mut prompt = init_prompt(spec, prompt_init(cfg)?, seed)?;
                let opt =
                    OptimizerState::new(cfg.optimizer.lr0, cfg.optimizer.epochs, OptimTarget::Prompt);
                let mut row = prompt_tune(
                    &backbone,
                    &transform,
                    &mut prompter,
                    &mut prompt,
                    &train,
                    &opt,
                    batch,
                    seed,
                )?;
                row.test_acc =
                    evaluate(&backbone, &transform, Some((&mut prompter, &prompt)), &test, batch)?;
                let dir = artifact_dir(cfg, "prompt", seed);
                save_prompt(&prompt, &dir)?;
                if let OutputTransform::Mapped(mapping) = &transform {
                    save_mapping(mapping, &dir.join("mapping.txt"))?;
                }
                row
            }
            Method::Lp => {
                let opt = OptimizerState::new(
                    cfg.optimizer.lp_lr,
                    cfg.optimizer.epochs,
                    OptimTarget::Probe,
                );
                let (w, b, row) = linear_probe(&backbone, &train, &test, &opt, batch, seed)?;
                let dir = artifact_dir(cfg, "probe", seed);
                let tensors = BTreeMap::from([("w".to_string(), w), ("b".to_string(), b)]);
                let meta = BTreeMap::from([
                    ("dataset".to_string(), cfg.dataset.name.clone()),
                    ("seed".to_string(), seed.to_string()),
                    ("epochs".to_string(), cfg.optimizer.epochs.to_string()),
                    ("lr".to_string(), cfg.optimizer.lp_lr.to_string()),
                ]);
                vpt_core::io::save_checkpoint(&dir, &tensors, &meta)?;
                row
            }
            Method::Ft => {
                let opt = OptimizerState::new(
                    cfg.optimizer.ft_lr,
                    cfg.optimizer.epochs,
                    OptimTarget::AllParams,
                );
                let (tuned, row) = fine_tune(&backbone, &train, &test, &opt, batch, seed)?;
                tuned.save(&artifact_dir(cfg, "ft", seed))?;
                row
            }
        };
        row.dataset = cfg.dataset.name.clone();
        row.config_hash = cfg.hash();
        append_run_csv(&cfg.runs_csv(), &row)?;
        println!(
            "{} {} seed {seed}: train {:.3} test {:.3} ({} ms)",
            row.method, row.dataset, row.train_acc, row.test_acc, row.wall_ms
        );
    }
    Ok(())
}
