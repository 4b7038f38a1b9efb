use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use fscod::error::ExperimentError;
use fscod::experiment::{cmd_eval, cmd_gen_dataset, cmd_report, cmd_train, ExperimentConfig};
use fscod::fscod::Preset;

/// Cooperative object detection by feature sharing, at desk scale.
#[derive(Parser)]
#[command(name = "fscod", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train and validation datasets.
    GenDataset(Common),
    /// Train the baseline and FS-COD detectors.
    Train(Common),
    /// Evaluate trained detectors and write the report.
    Eval(Common),
    /// Rebuild the report from stored evaluation records.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// TOML experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Experiment seed (required without --config).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated transmitted channel counts.
    #[arg(long, value_delimiter = ',')]
    ct: Option<Vec<usize>>,
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum PresetArg {
    Hi,
    Lo,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig, ExperimentError> {
        let mut cfg = match (&self.config, self.seed) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, Some(seed)) => ExperimentConfig::new(seed, Preset::Lo),
            (None, None) => return Err(ExperimentError::Config("either --config or --seed is required".into())),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(ct) = &self.ct {
            cfg.model.transmitted_channels = ct.clone();
        }
        if let Some(p) = self.preset {
            cfg.preset = match p {
                PresetArg::Hi => Preset::Hi,
                PresetArg::Lo => Preset::Lo,
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::GenDataset(c) => {
            let m = cmd_gen_dataset(&c.config()?)?;
            println!("train frames {} validation frames {} config {}", m.train_frames, m.val_frames, m.config_hash);
        }
        Command::Train(c) => {
            for p in cmd_train(&c.config()?)? {
                if let (Some(first), Some(last)) = (p.log.first(), p.log.last()) {
                    println!(
                        "C_t={}: baseline loss {:.4} -> {:.4}, fs-cod loss {:.4} -> {:.4}",
                        p.transmitted_channels, first.baseline_loss, last.baseline_loss, first.fscod_loss, last.fscod_loss
                    );
                }
            }
        }
        Command::Eval(c) => print!("{}", cmd_eval(&c.config()?)?.0),
        Command::Report(c) => print!("{}", cmd_report(&c.config()?)?.0),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
