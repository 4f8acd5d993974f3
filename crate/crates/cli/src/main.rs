use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use srfuse_cli::commands::{
    cmd_downstream, cmd_evaluate, cmd_hist, cmd_ingest, cmd_plots, cmd_spectrum, cmd_split,
    cmd_synth, cmd_train, DownstreamArgs, EvalArgs, IngestArgs, PlotsArgs, SplitArgs, SynthArgs,
};
use srfuse_cli::config::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "srfuse",
    about = "Multi-image super-resolution for satellite revisit series"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with known degradation parameters.
    Synth(SynthArgs),
    /// Co-register raw rasters into a dataset.
    Ingest(IngestArgs),
    /// Recompute patch splits at a new patch/stride into a new manifest.
    Split(SplitArgs),
    /// Train a model from a flat key = value config file.
    Train {
        /// Path to the experiment config (TOML, flat keys only).
        #[arg(long)]
        config: PathBuf,
    },
    /// Score bicubic, model and reference outputs on one split.
    Evaluate(EvalArgs),
    /// Emit the radially averaged power-spectrum artifact.
    Spectrum(EvalArgs),
    /// Emit the per-band histogram artifact.
    Hist(EvalArgs),
    /// Train segmentation backbones per input configuration and score
    /// building detection.
    Downstream(DownstreamArgs),
    /// Render SVG charts from previously emitted JSON artifacts.
    Plots(PlotsArgs),
}

fn run(command: Command) -> srfuse_core::Result<()> {
    match command {
        Command::Synth(args) => {
            let manifest = cmd_synth(&args)?;
            println!("wrote {}", manifest.display());
        }
        Command::Ingest(args) => {
            let manifest = cmd_ingest(&args)?;
            println!("wrote {}", manifest.display());
        }
        Command::Split(args) => {
            let manifest = cmd_split(&args)?;
            println!("wrote {}", manifest.display());
        }
        Command::Train { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let outcome = cmd_train(&cfg)?;
            println!(
                "best epoch {} (val loss {:.6}); wrote {} and {}",
                outcome.report.best_epoch,
                outcome.report.best_val_loss,
                outcome.checkpoint.display(),
                outcome.log.display()
            );
        }
        Command::Evaluate(args) => {
            let outcome = cmd_evaluate(&args)?;
            print!("{}", std::fs::read_to_string(&outcome.metrics_txt).unwrap_or_default());
            println!("wrote {}", outcome.metrics_json.display());
        }
        Command::Spectrum(args) => {
            let path = cmd_spectrum(&args)?;
            println!("wrote {}", path.display());
        }
        Command::Hist(args) => {
            let path = cmd_hist(&args)?;
            println!("wrote {}", path.display());
        }
        Command::Downstream(args) => {
            let outcome = cmd_downstream(&args)?;
            print!("{}", std::fs::read_to_string(&outcome.txt).unwrap_or_default());
            println!("wrote {}", outcome.json.display());
        }
        Command::Plots(args) => {
            for path in cmd_plots(&args)? {
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            // Machine-readable error record on stderr.
            let record = serde_json::json!({ "error": err.kind(), "message": err.to_string() });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
