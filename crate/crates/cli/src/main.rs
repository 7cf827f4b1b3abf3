use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use phonebench::dataio::FbankConfig;
use phonebench::rf::AttnRange;
use phonebench_cli::{commands, error_json, ExperimentConfig, Profile};

#[derive(Parser)]
#[command(name = "phonebench", version, about = "Receptive-field experiments for frame-level phoneme classifiers")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; unknown keys are rejected.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Named defaults the config file and flags are layered on.
    #[arg(long, global = true, value_enum)]
    profile: Option<Profile>,
    /// Override a config key, e.g. `--set model.width=64` or `--set sweep=[{"range":[1,"unlimited"]}]`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Write the CSV payload here instead of stdout.
    #[arg(long, short, global = true)]
    out: Option<PathBuf>,
    /// Do not echo the resolved config to stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Receptive field per sweep point.
    Rf,
    /// Parameter counts per sweep point, solving widths for budgets.
    Params,
    /// Train each sweep point; writes checkpoints and reports under DIR.
    Train { dir: PathBuf },
    /// Frame accuracy of a checkpoint on the eval corpus.
    Eval {
        checkpoint: PathBuf,
        /// Attention range at inference; defaults to the trained range.
        #[arg(long)]
        range: Option<AttnRange>,
    },
    /// Train-range by inference-range accuracy matrix.
    Transfer {
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        infer: Vec<AttnRange>,
    },
    /// Inference timing over sequence lengths, with fitted exponents.
    Bench,
    /// Generate the synthetic corpus into DIR.
    Synth { dir: PathBuf },
    /// Log-mel features from a WAV file.
    Fbank {
        wav: PathBuf,
        /// Output feature file.
        feat: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    let mut cfg = ExperimentConfig::resolve(c.profile, c.config.as_deref(), &c.sets)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if !c.quiet {
        eprintln!("{}", serde_json::json!({ "resolved_config": &cfg, "config_hash": cfg.hash() }));
    }
    let csv = match &cli.cmd {
        Cmd::Rf => commands::cmd_rf(&cfg)?,
        Cmd::Params => commands::cmd_params(&cfg)?,
        Cmd::Train { dir } => commands::cmd_train(&cfg, dir)?,
        Cmd::Eval { checkpoint, range } => commands::cmd_eval(&cfg, checkpoint, *range)?,
        Cmd::Transfer { checkpoints, infer } => commands::cmd_transfer(&cfg, checkpoints, infer)?,
        Cmd::Bench => {
            let (csv, fits) = commands::cmd_bench(&cfg)?;
            for (arch, exponent) in fits {
                eprintln!("{}", serde_json::json!({ "model": arch, "exponent": exponent }));
            }
            csv
        }
        Cmd::Synth { dir } => commands::cmd_synth(&cfg, dir)?,
        Cmd::Fbank { wav, feat } => commands::cmd_fbank(wav, feat, &FbankConfig::default())?,
    };
    match &c.out {
        Some(p) => std::fs::write(p, csv).map_err(|e| anyhow::anyhow!("writing {}: {e}", p.display()))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::FAILURE
        }
    }
}
