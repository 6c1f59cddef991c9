use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use engage_cli::{cmd_evaluate, cmd_experiment, cmd_featurize, cmd_predict, cmd_synth, cmd_train, CliError, Overrides};
use engage_core::fusion::FusionMode;

/// Two-phase On-Task / Off-Task detection from URL logs and facial appearance.
#[derive(Parser)]
#[command(name = "engage", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct WindowFlags {
    #[arg(long)]
    window_ms: Option<u64>,
    #[arg(long)]
    hop_ms: Option<u64>,
    /// Minimum platform coverage for a window to reach the appearance model.
    #[arg(long)]
    gate_threshold: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Slice a corpus into windows and write the feature matrix and window table.
    Featurize {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        window: WindowFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the appearance forest.
    Train {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        windows: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// appearance | two-phase
        #[arg(long, default_value = "two-phase")]
        mode: FusionMode,
        #[arg(long)]
        gate_threshold: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict every window with a trained model.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        windows: PathBuf,
        /// appearance | two-phase; defaults to the mode the model was trained for
        #[arg(long)]
        mode: Option<FusionMode>,
        #[arg(long)]
        gate_threshold: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against window labels.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        windows: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run train/test experiments from a config file.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { config, seed, out } => {
            cmd_synth(config.as_deref(), seed, &out)?;
        }
        Command::Featurize {
            corpus,
            config,
            window,
            out,
        } => {
            let o = Overrides {
                seed: None,
                window_ms: window.window_ms,
                hop_ms: window.hop_ms,
                gate_threshold: window.gate_threshold,
            };
            cmd_featurize(&corpus, config.as_deref(), o, &out)?;
        }
        Command::Train {
            features,
            windows,
            config,
            seed,
            mode,
            gate_threshold,
            out,
        } => {
            let o = Overrides {
                seed,
                gate_threshold,
                ..Overrides::default()
            };
            cmd_train(&features, &windows, config.as_deref(), mode, o, &out)?;
        }
        Command::Predict {
            model,
            features,
            windows,
            mode,
            gate_threshold,
            out,
        } => {
            cmd_predict(&model, &features, &windows, mode, gate_threshold, &out)?;
        }
        Command::Evaluate {
            predictions,
            windows,
            out,
        } => {
            let report = cmd_evaluate(&predictions, &windows, out.as_deref())?;
            print!("{}", report.render());
        }
        Command::Experiment {
            config,
            corpus,
            seed,
            out,
        } => {
            let report = cmd_experiment(&config, &corpus, seed, &out)?;
            print!("{}", report.render());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage errors are validation failures.
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
