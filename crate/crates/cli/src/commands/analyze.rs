//! Join per-dataset run results with feature-space diagnostics: Fréchet
//! distance to the pretraining distribution, perceptual diversity, and
//! the zero-shot-to-prompted gain, plus correlations across datasets.

use super::{first_seed, load_backbone, pretrain_set, write_provenance, CliError, CmdResult};
use crate::config::Config;
use std::path::Path;
use vpt_core::analysis::{
    correlation_report, feature_moments, frechet_distance, perceptual_diversity,
    write_analysis_csv, AnalysisRow,
};
use vpt_core::backbone::FrozenBackbone;
use vpt_core::data::{resize_to_model, task_preset};
use vpt_core::svg::{scatter_svg, Series};

/// Mean test accuracy per (method-kind, dataset) pulled out of runs.csv.
struct RunMeans {
    zero_shot: Option<f64>,
    vp: Option<f64>,
}

fn run_means(runs_text: &str, dataset: &str) -> RunMeans {
    let (mut zs, mut vp) = ((0.0, 0usize), (0.0, 0usize));
    for line in runs_text.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 8 || fields[1] != dataset {
            continue;
        }
        let Ok(test_acc) = fields[7].parse::<f64>() else {
            continue;
        };
        match fields[0] {
            "TP" => {
                zs.0 += test_acc;
                zs.1 += 1;
            }
            "VP" | "VP+TP" => {
                vp.0 += test_acc;
                vp.1 += 1;
            }
            _ => {}
        }
    }
    RunMeans {
        zero_shot: (zs.1 > 0).then(|| zs.0 / zs.1 as f64),
        vp: (vp.1 > 0).then(|| vp.0 / vp.1 as f64),
    }
}

fn write_text(path: &Path, text: &str) -> CmdResult<()> {
    std::fs::write(path, text)?;
    Ok(())
}

fn scatter(
    out: &Path,
    name: &str,
    x_label: &str,
    points: Vec<(f64, f64)>,
) -> CmdResult<()> {
    let svg = scatter_svg(
        &format!("prompting gain vs {x_label}"),
        x_label,
        "gain (vp - zero-shot)",
        &[Series::new("datasets", points)],
    )?;
    write_text(&out.join(name), &svg)
}

fn correlation_line(name: &str, x: &[f64], y: &[f64]) -> String {
    if x.len() < 3 {
        return format!("{name}: needs at least 3 datasets, have {}", x.len());
    }
    match correlation_report(x, y) {
        Ok(r) => format!(
            "{name}: pearson {:.4}, spearman {:.4}, n {}",
            r.pearson,
            r.spearman,
            x.len()
        ),
        Err(vpt_core::Error::ZeroVariance { series }) => {
            format!("{name}: degenerate ({series} series has zero variance)")
        }
        Err(e) => format!("{name}: {e}"),
    }
}

pub fn cmd_analyze(cfg: &Config) -> CmdResult<()> {
    let backbone = load_backbone(cfg)?;
    let seed = first_seed(cfg)?;
    let runs_path = cfg.runs_csv();
    let required = || {
        cfg.analysis
            .datasets
            .iter()
            .map(|d| format!("tp and vp runs for {d:?}"))
            .collect::<Vec<_>>()
            .join(", ")
    };
    let runs_text = std::fs::read_to_string(&runs_path).map_err(|_| {
        CliError::Data(format!(
            "no run log at {}; analysis needs {}",
            runs_path.display(),
            required()
        ))
    })?;

    let mut missing = Vec::new();
    let mut means = Vec::new();
    for ds in &cfg.analysis.datasets {
        let m = run_means(&runs_text, ds);
        if m.zero_shot.is_none() {
            missing.push(format!("`vpt run --method tp` on {ds:?}"));
        }
        if m.vp.is_none() {
            missing.push(format!("`vpt run --method vp` on {ds:?}"));
        }
        means.push(m);
    }
    if !missing.is_empty() {
        return Err(CliError::Data(format!(
            "analysis needs these runs first: {}",
            missing.join(", ")
        )));
    }

    let pre = pretrain_set(cfg, &backbone)?;
    let pre_moments = feature_moments(&backbone, &pre, cfg.analysis.sample_cap, seed)?;
    let mut rows = Vec::new();
    for (ds, m) in cfg.analysis.datasets.iter().zip(&means) {
        let train = downstream_train(cfg, &backbone, ds, seed)?;
        let moments = feature_moments(&backbone, &train, cfg.analysis.sample_cap, seed)?;
        let fid = frechet_distance(&moments, &pre_moments)?;
        let diversity = perceptual_diversity(&backbone, &train, cfg.analysis.num_pairs, seed)?;
        rows.push(AnalysisRow {
            dataset: ds.clone(),
            fid_to_pretrain: fid,
            diversity,
            zero_shot_acc: m.zero_shot.unwrap(),
            vp_acc: m.vp.unwrap(),
        });
        println!(
            "{ds}: fid {fid:.3} diversity {diversity:.3} zero-shot {:.3} vp {:.3}",
            m.zero_shot.unwrap(),
            m.vp.unwrap()
        );
    }

    write_provenance(&cfg.out_dir, cfg)?;
    write_analysis_csv(&cfg.out_dir.join("analysis.csv"), &rows)?;

    let gains: Vec<f64> = rows.iter().map(|r| r.gain()).collect();
    let fids: Vec<f64> = rows.iter().map(|r| r.fid_to_pretrain).collect();
    let divs: Vec<f64> = rows.iter().map(|r| r.diversity).collect();
    let zs: Vec<f64> = rows.iter().map(|r| r.zero_shot_acc).collect();
    scatter(
        &cfg.out_dir,
        "analysis-fid.svg",
        "fid to pretraining set",
        fids.iter().copied().zip(gains.iter().copied()).collect(),
    )?;
    scatter(
        &cfg.out_dir,
        "analysis-diversity.svg",
        "perceptual diversity",
        divs.iter().copied().zip(gains.iter().copied()).collect(),
    )?;
    scatter(
        &cfg.out_dir,
        "analysis-zeroshot.svg",
        "zero-shot accuracy",
        zs.iter().copied().zip(gains.iter().copied()).collect(),
    )?;

    let report = [
        correlation_line("gain vs fid", &fids, &gains),
        correlation_line("gain vs diversity", &divs, &gains),
        correlation_line("gain vs zero-shot accuracy", &zs, &gains),
    ]
    .join("\n")
        + "\n";
    write_text(&cfg.out_dir.join("correlations.txt"), &report)?;
    print!("{report}");
    Ok(())
}

fn downstream_train(
    cfg: &Config,
    backbone: &FrozenBackbone,
    name: &str,
    seed: u64,
) -> CmdResult<vpt_core::data::LabeledDataset> {
    let (mut train, _) = task_preset(
        name,
        cfg.dataset.train_samples,
        cfg.dataset.test_samples,
        cfg.dataset.jitter,
        seed,
    )?;
    let (_, h, w) = backbone.spec.input;
    if train.dims() != backbone.spec.input {
        train = resize_to_model(&train, h, w);
    }
    Ok(train.with_stats(backbone.stats.clone()))
}
