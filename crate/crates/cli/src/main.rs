use clap::{Parser, Subcommand};
use std::path::PathBuf;
use vpt_cli::commands::ablate::{cmd_ablate, Axis};
use vpt_cli::commands::analyze::cmd_analyze;
use vpt_cli::commands::export_prompt::cmd_export_prompt;
use vpt_cli::commands::pretrain::cmd_pretrain;
use vpt_cli::commands::run::{cmd_run, Method};
use vpt_cli::commands::CliError;
use vpt_cli::config::{Config, Preset};

/// Visual prompt tuning experiments on frozen desk-scale backbones.
#[derive(Parser)]
#[command(name = "vpt", version, about)]
struct Cli {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Replace the config's seed list with this single seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Output directory (for export-prompt: the output file).
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,

    /// desk = config as written; paper = published recipe overrides.
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,

    /// Replace an existing checkpoint directory.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a backbone on the synthetic base task and freeze it.
    Pretrain,
    /// Adapt the frozen checkpoint to the configured downstream task.
    Run {
        /// tp = zero-shot, vp = visual prompt, lp = linear probe, ft = fine-tune.
        #[arg(long, value_enum)]
        method: Method,
    },
    /// Sweep one design axis and write a report CSV plus a plot.
    Ablate {
        #[arg(long, value_enum)]
        axis: Axis,
    },
    /// Join run results with distribution diagnostics across datasets.
    Analyze,
    /// Render a saved prompt directory as a PPM image.
    #[command(name = "export-prompt")]
    ExportPrompt {
        /// Prompt checkpoint directory written by `run --method vp`.
        prompt: PathBuf,
    },
}

fn effective_config(cli: &Cli) -> Result<Config, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(preset) = cli.preset {
        cfg.apply_preset(preset);
    }
    cfg.apply_overrides(cli.seed, cli.out.as_deref());
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::ExportPrompt { prompt } => cmd_export_prompt(prompt, cli.out.as_deref()),
        Command::Pretrain => cmd_pretrain(&effective_config(cli)?, cli.force),
        Command::Run { method } => cmd_run(&effective_config(cli)?, *method),
        Command::Ablate { axis } => cmd_ablate(&effective_config(cli)?, *axis),
        Command::Analyze => cmd_analyze(&effective_config(cli)?),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = dispatch(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
