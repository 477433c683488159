//! `spikefool` command-line driver.
//!
//! Every subcommand reads an optional JSON config, applies flag overrides
//! (flags win), validates the result, echoes it as `config.json` into the
//! output directory and then runs. `SPIKEFOOL_LOG` sets the log filter.

mod commands;
mod config;
mod error;
mod summary;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::commands::{prepare_out, write_json, CONFIG_ECHO};
use crate::config::{load_config, ExperimentConfig, Overrides};
use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "spikefool", version, about = "Adversarial attacks on spiking networks over event rasters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CampaignArgs {
    /// Attack at most this many test samples.
    #[arg(long)]
    max_samples: Option<usize>,
    /// Report zero elapsed time so repeated runs are byte-identical.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic moving-bar dataset.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model (BPTT, ANN or ANN plus weight transfer).
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Run an attack campaign against a trained model.
    Attack {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Trained model file.
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        campaign: CampaignArgs,
    },
    /// Train a universal patch and compare it with a random one.
    Patch {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        max_samples: Option<usize>,
    },
    /// Adversarially train a model and attack it next to its baseline.
    Defend {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Baseline model; trained from the config when absent.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        campaign: CampaignArgs,
    },
    /// Merge campaign reports into one table.
    Report {
        #[command(flatten)]
        common: Common,
        /// `report.json` files or directories searched for them.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

fn resolve(common: &Common, mut o: Overrides, command: &str) -> Result<ExperimentConfig> {
    let mut cfg = load_config(common.config.as_deref())?;
    o.seed = common.seed;
    o.out = common.out.clone();
    o.threads = common.threads;
    cfg.apply(&o);
    // The experiment seed also drives batch shuffling.
    if let Some(seed) = cfg.seed {
        cfg.train.config.seed = seed;
    }
    cfg.validate(command)?;
    prepare_out(cfg.out()?)?;
    write_json(&cfg.out()?.join(CONFIG_ECHO), &cfg)?;
    Ok(cfg)
}

fn with_pool(cfg: &ExperimentConfig, f: impl FnOnce(&ExperimentConfig) -> Result<()> + Send) -> Result<()> {
    spikefool::harness::with_threads(cfg.threads, || f(cfg))?
}

#[derive(Serialize)]
struct ReportEcho<'a> {
    inputs: &'a [PathBuf],
    reports: &'a [PathBuf],
    out: &'a std::path::Path,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common } => {
            let cfg = resolve(&common, Overrides::default(), "synth")?;
            with_pool(&cfg, commands::synth)
        }
        Command::Train { common, data, epochs } => {
            let o = Overrides { data: data.data, epochs, ..Overrides::default() };
            let cfg = resolve(&common, o, "train")?;
            with_pool(&cfg, commands::train)
        }
        Command::Attack { common, data, model, campaign } => {
            let o = Overrides {
                data: data.data,
                model_path: model,
                max_samples: campaign.max_samples,
                no_timing: campaign.no_timing,
                ..Overrides::default()
            };
            let cfg = resolve(&common, o, "attack")?;
            with_pool(&cfg, commands::attack)
        }
        Command::Patch { common, data, model, max_samples } => {
            let o = Overrides { data: data.data, model_path: model, max_samples, ..Overrides::default() };
            let cfg = resolve(&common, o, "patch")?;
            with_pool(&cfg, commands::patch)
        }
        Command::Defend { common, data, model, epochs, campaign } => {
            let o = Overrides {
                data: data.data,
                model_path: model,
                epochs,
                max_samples: campaign.max_samples,
                no_timing: campaign.no_timing,
                ..Overrides::default()
            };
            let cfg = resolve(&common, o, "defend")?;
            with_pool(&cfg, commands::defend)
        }
        Command::Report { common, inputs } => {
            let file = load_config(common.config.as_deref())?;
            let out = common
                .out
                .or(file.out)
                .ok_or_else(|| CliError::config("out", "required (set it in the config or pass --out)"))?;
            prepare_out(&out)?;
            let reports = commands::find_reports(&inputs)?;
            write_json(&out.join(CONFIG_ECHO), &ReportEcho { inputs: &inputs, reports: &reports, out: &out })?;
            let rows = summary::summarize(&reports)?;
            summary::write_summary(&out, &rows)?;
            log::info!("{} reports summarised into {}", rows.len(), out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SPIKEFOOL_LOG", "info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
