//! Ablation grids: template kind x prompt size, mapping strategy, and
//! text-head noise level. Every invocation rewrites its own CSV and SVG
//! from scratch through a single writer, so reruns are byte-stable.

use super::{
    build_transform, downstream, load_backbone, prompt_init, write_provenance, CliError,
    CmdResult,
};
use crate::config::Config;
use std::path::Path;
use vpt_core::backbone::{BackboneKind, FrozenBackbone};
use vpt_core::data::LabeledDataset;
use vpt_core::prompt::{init_prompt, PromptSpec, Prompter, TemplateKind};
use vpt_core::svg::{line_svg, Series};
use vpt_core::train::{evaluate, prompt_tune, OptimTarget, OptimizerState};
use vpt_core::transform::{
    class_mean_features, make_mapping, MappingStrategy, OutputTransform, TextPromptHead,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
#[clap(rename_all = "lower")]
pub enum Axis {
    /// Template kind x prompt size grid.
    Template,
    /// Semantic vs arbitrary vs swapped label mappings (classifier only).
    Mapping,
    /// Text-embedding noise sweep (dual encoder only).
    Sigma,
}

/// Prompt sizes swept by the template grid.
pub const SWEEP_SIZES: [usize; 7] = [1, 2, 4, 8, 16, 30, 48];
pub const SWEEP_TEMPLATES: [TemplateKind; 3] = [
    TemplateKind::Padding,
    TemplateKind::FixedPatch,
    TemplateKind::RandomPatch,
];
/// Noise levels swept by the sigma axis.
pub const SIGMA_LEVELS: [f32; 5] = [0.0, 0.2, 0.4, 0.8, 1.6];

pub const TEMPLATE_CSV_HEADER: &str = "template,p,params,status,train_acc,test_acc";
pub const MAPPING_CSV_HEADER: &str = "strategy,train_acc,test_acc";
pub const SIGMA_CSV_HEADER: &str = "sigma,zero_shot_acc,vp_acc,gain";

pub fn cmd_ablate(cfg: &Config, axis: Axis) -> CmdResult<()> {
    let backbone = load_backbone(cfg)?;
    write_provenance(&cfg.out_dir, cfg)?;
    match axis {
        Axis::Template => template_sweep(cfg, &backbone),
        Axis::Mapping => mapping_sweep(cfg, &backbone),
        Axis::Sigma => sigma_sweep(cfg, &backbone),
    }
}

/// One visual-prompt run: tune on train, return (train_acc, test_acc).
#[allow(clippy::too_many_arguments)]
fn vp_cell(
    cfg: &Config,
    backbone: &FrozenBackbone,
    transform: &OutputTransform,
    spec: PromptSpec,
    train: &LabeledDataset,
    test: &LabeledDataset,
    seed: u64,
) -> CmdResult<(f64, f64)> {
    let mut prompter = Prompter::new(spec, seed)?;
    let mut prompt = init_prompt(spec, prompt_init(cfg)?, seed)?;
    let opt = OptimizerState::new(cfg.optimizer.lr0, cfg.optimizer.epochs, OptimTarget::Prompt);
    let row = prompt_tune(
        backbone,
        transform,
        &mut prompter,
        &mut prompt,
        train,
        &opt,
        cfg.optimizer.batch,
        seed,
    )?;
    let test_acc = evaluate(
        backbone,
        transform,
        Some((&mut prompter, &prompt)),
        test,
        cfg.optimizer.batch,
    )?;
    Ok((row.train_acc, test_acc))
}

fn write_text(path: &Path, text: &str) -> CmdResult<()> {
    std::fs::write(path, text)?;
    Ok(())
}

fn template_sweep(cfg: &Config, backbone: &FrozenBackbone) -> CmdResult<()> {
    let mut rows = vec![TEMPLATE_CSV_HEADER.to_string()];
    let mut curves: Vec<Series> = Vec::new();
    for template in SWEEP_TEMPLATES {
        let mut points = Vec::new();
        for p in SWEEP_SIZES {
            let spec = PromptSpec::new(template, p, backbone.spec.input);
            if spec.validate().is_err() {
                rows.push(format!("{},{p},,invalid,,", template.as_str()));
                continue;
            }
            let (mut train_sum, mut test_sum) = (0.0f64, 0.0f64);
            for &seed in &cfg.seeds {
                let (train, test) = downstream(cfg, backbone, seed)?;
                let transform = build_transform(cfg, backbone, &train, seed)?;
                let (tr, te) = vp_cell(cfg, backbone, &transform, spec, &train, &test, seed)?;
                train_sum += tr;
                test_sum += te;
            }
            let n = cfg.seeds.len() as f64;
            let (train_acc, test_acc) = (train_sum / n, test_sum / n);
            rows.push(format!(
                "{},{p},{},ok,{train_acc:.6},{test_acc:.6}",
                template.as_str(),
                spec.param_count()
            ));
            points.push((p as f64, test_acc));
            println!(
                "{} p={p}: train {train_acc:.3} test {test_acc:.3}",
                template.as_str()
            );
        }
        if !points.is_empty() {
            curves.push(Series::new(template.as_str(), points));
        }
    }
    write_text(
        &cfg.out_dir.join("ablate-template.csv"),
        &(rows.join("\n") + "\n"),
    )?;
    let svg = line_svg(
        "test accuracy vs prompt size",
        "prompt size p",
        "test accuracy",
        &curves,
    )?;
    write_text(&cfg.out_dir.join("ablate-template.svg"), &svg)?;
    Ok(())
}

fn mapping_sweep(cfg: &Config, backbone: &FrozenBackbone) -> CmdResult<()> {
    if backbone.spec.kind != BackboneKind::Classifier {
        return Err(CliError::Usage(
            "the mapping ablation needs a classifier checkpoint; \
             set backbone.kind = \"classifier\" and pretrain again"
                .to_string(),
        ));
    }
    let strategies = [
        MappingStrategy::Semantic,
        MappingStrategy::Arbitrary,
        MappingStrategy::Swapped,
    ];
    let spec = PromptSpec::new(
        cfg.template.kind.into(),
        cfg.template.p,
        backbone.spec.input,
    );
    let pre = super::pretrain_set(cfg, backbone)?;
    let pre_feats = backbone.penultimate_features(&pre.normalized_all())?;
    let pre_means = class_mean_features(&pre_feats, &pre.labels, pre.num_classes())?;

    let mut rows = vec![MAPPING_CSV_HEADER.to_string()];
    let mut points = Vec::new();
    for (i, strategy) in strategies.into_iter().enumerate() {
        let (mut train_sum, mut test_sum) = (0.0f64, 0.0f64);
        for &seed in &cfg.seeds {
            let (train, test) = downstream(cfg, backbone, seed)?;
            let down_feats = backbone.penultimate_features(&train.normalized_all())?;
            let down_means = class_mean_features(&down_feats, &train.labels, train.num_classes())?;
            let mapping = make_mapping(strategy, &down_means, &pre_means, seed)?;
            let transform = OutputTransform::Mapped(mapping);
            let (tr, te) = vp_cell(cfg, backbone, &transform, spec, &train, &test, seed)?;
            train_sum += tr;
            test_sum += te;
        }
        let n = cfg.seeds.len() as f64;
        rows.push(format!(
            "{},{:.6},{:.6}",
            strategy.as_str(),
            train_sum / n,
            test_sum / n
        ));
        points.push((i as f64, test_sum / n));
        println!("{}: test {:.3}", strategy.as_str(), test_sum / n);
    }
    write_text(
        &cfg.out_dir.join("ablate-mapping.csv"),
        &(rows.join("\n") + "\n"),
    )?;
    let svg = line_svg(
        "test accuracy by mapping strategy",
        "strategy (0 semantic, 1 arbitrary, 2 swapped)",
        "test accuracy",
        &[Series::new("vp", points)],
    )?;
    write_text(&cfg.out_dir.join("ablate-mapping.svg"), &svg)?;
    Ok(())
}

fn sigma_sweep(cfg: &Config, backbone: &FrozenBackbone) -> CmdResult<()> {
    if backbone.spec.kind != BackboneKind::DualEncoder {
        return Err(CliError::Usage(
            "the sigma ablation needs a dual-encoder checkpoint; \
             set backbone.kind = \"dual_encoder\" and pretrain again"
                .to_string(),
        ));
    }
    let table = backbone
        .table
        .as_ref()
        .ok_or_else(|| CliError::Data("checkpoint has no class-embedding table".to_string()))?;
    let spec = PromptSpec::new(
        cfg.template.kind.into(),
        cfg.template.p,
        backbone.spec.input,
    );
    let mut rows = vec![SIGMA_CSV_HEADER.to_string()];
    let (mut zs_curve, mut gain_curve) = (Vec::new(), Vec::new());
    for sigma in SIGMA_LEVELS {
        let (mut zs_sum, mut vp_sum) = (0.0f64, 0.0f64);
        for &seed in &cfg.seeds {
            let (train, test) = downstream(cfg, backbone, seed)?;
            let targets: Vec<usize> = (0..train.num_classes()).collect();
            let head =
                TextPromptHead::new(table, &targets, backbone.spec.temperature, sigma, seed)?;
            let transform = OutputTransform::TextHead(head);
            zs_sum += evaluate(backbone, &transform, None, &test, cfg.optimizer.batch)?;
            let (_, te) = vp_cell(cfg, backbone, &transform, spec, &train, &test, seed)?;
            vp_sum += te;
        }
        let n = cfg.seeds.len() as f64;
        let (zs, vp) = (zs_sum / n, vp_sum / n);
        rows.push(format!("{sigma},{zs:.6},{vp:.6},{:.6}", vp - zs));
        zs_curve.push((sigma as f64, zs));
        gain_curve.push((sigma as f64, vp - zs));
        println!("sigma {sigma}: zero-shot {zs:.3} vp {vp:.3} gain {:.3}", vp - zs);
    }
    write_text(
        &cfg.out_dir.join("ablate-sigma.csv"),
        &(rows.join("\n") + "\n"),
    )?;
    let svg = line_svg(
        "text-head noise vs accuracy",
        "embedding noise sigma",
        "accuracy",
        &[
            Series::new("zero-shot", zs_curve),
            Series::new("vp gain", gain_curve),
        ],
    )?;
    write_text(&cfg.out_dir.join("ablate-sigma.svg"), &svg)?;
    Ok(())
}
