use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fcrn_cli::{
    cmd_evaluate, cmd_predict, cmd_simulate, cmd_train, exit_code, RunConfig, EXIT_SCHEMA,
};
use fcrn_core::Error;

/// Functional competing-risks networks.
///
/// Exit codes: 0 ok, 2 I/O, 3 schema or configuration, 4 numeric failure,
/// 5 incompatible model, data or horizon.
#[derive(Parser)]
#[command(name = "fcrn", version)]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.batch_size=32`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run seed (same as `--set seed=N`).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (same as `--set output_dir=DIR`).
    #[arg(short, long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        if let Some(out) = &self.out {
            overrides.push(format!("output_dir={}", serde_json::to_string(out)?));
        }
        RunConfig::resolve(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train/test dataset.
    Simulate(Common),
    /// Fit a model; imputation engages when covariates are missing.
    Train(Common),
    /// Write CIF (and survival) curves for a dataset.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        subjects: PathBuf,
        #[arg(long)]
        curves: Option<PathBuf>,
        /// Output CSV path.
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Score predictions with IPCW Brier curves.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        subjects: PathBuf,
        #[arg(long)]
        curves: Option<PathBuf>,
        /// Integration horizons; defaults to the end of the prediction grid.
        #[arg(long, value_delimiter = ',')]
        horizons: Vec<f64>,
        /// Output directory for scores.csv and summary.csv.
        #[arg(short, long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Simulate(c) => cmd_simulate(&c.resolve()?),
        Command::Train(c) => cmd_train(&c.resolve()?).map(|_| ()),
        Command::Predict {
            model,
            subjects,
            curves,
            out,
        } => cmd_predict(&model, &subjects, curves.as_deref(), &out).map(|_| ()),
        Command::Evaluate {
            predictions,
            subjects,
            curves,
            horizons,
            out,
        } => cmd_evaluate(&predictions, &subjects, curves.as_deref(), &horizons, &out).map(|_| ()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_SCHEMA } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
