//! `ebc`: generate synthetic group-action datasets, train the contrastive
//! encoder, evaluate identifiability metrics, and orchestrate sweeps.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ebc_cli::config::{
    apply_seed_override, experiment_preset, load_config, ExperimentConfig, EXPERIMENT_PRESETS,
    SWEEP_PRESETS,
};
use ebc_cli::runner::{run_eval, run_generate, run_train, summarize_record, EvalSource};
use ebc_cli::sweep::{run_sweep, selection_line, sweep_preset, SweepConfig};
use ebc_core::synthdata::SplitId;
use ebc_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "ebc",
    about = "Equivariance-by-contrast experiments: data, training, metrics, sweeps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset from a config or preset.
    Generate {
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an encoder against a generated dataset and evaluate it.
    Train {
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Model seed override; beats the EBC_SEED environment variable.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint (or the debug oracle) on one split.
    Eval {
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// train, valid, or test; defaults to the config's eval split.
        #[arg(long)]
        split: Option<String>,
        /// Use the ground-truth-latent oracle instead of a checkpoint.
        #[arg(long, default_value_t = false)]
        oracle: bool,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Run the cross product of sweep axes times seeds.
    Sweep {
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads; every run is fully seeded either way.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Print a named preset config as JSON.
    Preset { name: String },
}

fn resolve_experiment(
    config: Option<PathBuf>,
    preset: Option<String>,
    seed: Option<u64>,
) -> Result<ExperimentConfig> {
    let experiment = match (config, preset) {
        (Some(path), None) => load_config(&path, seed)?,
        (None, Some(name)) => {
            let mut experiment = experiment_preset(&name)?;
            apply_seed_override(&mut experiment, seed)?;
            experiment
        }
        _ => {
            return Err(Error::InvalidConfig(
                "pass exactly one of --config or --preset".into(),
            ))
        }
    };
    experiment.validate()?;
    Ok(experiment)
}

fn resolve_sweep(config: Option<PathBuf>, preset: Option<String>) -> Result<SweepConfig> {
    match (config, preset) {
        (Some(path), None) => {
            let text = std::fs::read_to_string(path)?;
            Ok(serde_json::from_str(&text)?)
        }
        (None, Some(name)) => sweep_preset(&name),
        _ => Err(Error::InvalidConfig(
            "pass exactly one of --config or --preset".into(),
        )),
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, preset, out } => {
            let experiment = resolve_experiment(config, preset, None)?;
            let summary = run_generate(&experiment, &out)?;
            println!("{summary}");
        }
        Command::Train {
            config,
            preset,
            data,
            out,
            seed,
        } => {
            let experiment = resolve_experiment(config, preset, seed)?;
            let record = run_train(&experiment, &data, &out)?;
            println!("{}", summarize_record(&record));
        }
        Command::Eval {
            config,
            preset,
            checkpoint,
            data,
            split,
            oracle,
            out,
        } => {
            let experiment = resolve_experiment(config, preset, None)?;
            let split = match split {
                Some(s) => Some(s.parse::<SplitId>()?),
                None => None,
            };
            let source = if oracle {
                EvalSource::Oracle
            } else {
                EvalSource::Checkpoint(checkpoint.expect("clap enforces checkpoint"))
            };
            let report = run_eval(&experiment, &source, &data, split, &out)?;
            let mut text = serde_json::to_string_pretty(&report)?;
            text.push('\n');
            print!("{text}");
        }
        Command::Sweep {
            config,
            preset,
            out,
            jobs,
        } => {
            let sweep = resolve_sweep(config, preset)?;
            let outcome = run_sweep(&sweep, &out, jobs)?;
            let failed = outcome.rows.iter().filter(|r| r.record.is_err()).count();
            println!(
                "sweep finished: {} runs, {} failed, csv at {}",
                outcome.rows.len(),
                failed,
                outcome.csv_path.display()
            );
            match &outcome.selection {
                Some(best) => println!("{}", selection_line(best)),
                None => println!("selection: no run completed"),
            }
        }
        Command::Preset { name } => {
            let text = if EXPERIMENT_PRESETS.contains(&name.as_str()) {
                serde_json::to_string_pretty(&experiment_preset(&name)?)?
            } else if SWEEP_PRESETS.contains(&name.as_str()) {
                serde_json::to_string_pretty(&sweep_preset(&name)?)?
            } else {
                return Err(Error::InvalidConfig(format!(
                    "unknown preset '{name}'; experiment presets: {}; sweep presets: {}",
                    EXPERIMENT_PRESETS.join(", "),
                    SWEEP_PRESETS.join(", ")
                )));
            };
            println!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
