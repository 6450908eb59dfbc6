use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use magloc::commands::{self, AlignInputs};
use magloc::config::PipelineConfig;
use magloc::images::DumpFormat;
use magloc::CliError;

/// Magnetic-field indoor localization pipeline.
///
/// Settings come from built-in defaults, then `--config`, then `--set`
/// overrides in order, then command flags.
#[derive(Parser)]
#[command(name = "magloc", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML pipeline configuration.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override a setting, e.g. `--set model.train.epochs=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of canonical CSV trials.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Overrides synth.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Encode trials into image stacks.
    Transform {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write every channel image.
        #[arg(long, value_enum)]
        dump: Option<DumpFormat>,
    },
    /// Build the magnetic map and extract landmarks.
    Landmarks {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a stack directory.
    Train {
        #[arg(long)]
        stacks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Landmark CSV, required by the classifier.
        #[arg(long)]
        landmarks: Option<PathBuf>,
        /// Overrides model.train.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Estimate positions for a stack directory.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        stacks: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a prediction CSV against its ground truth.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a magnetometer alignment from the test robot to the train robot.
    Align {
        /// Train-robot trials.
        #[arg(long)]
        train: PathBuf,
        /// Test-robot trials.
        #[arg(long)]
        test: PathBuf,
        /// Train-robot pass over the common segment.
        #[arg(long, requires = "common_test")]
        common_train: Option<PathBuf>,
        /// Test-robot pass over the common segment.
        #[arg(long, requires = "common_train")]
        common_test: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Write the aligned held-out test trials here.
        #[arg(long)]
        apply_out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = PipelineConfig::load(cli.global.config.as_deref(), &cli.global.overrides)?;
    match cli.command {
        Command::Synth { out, seed } => {
            if let Some(s) = seed {
                cfg.synth.seed = s;
            }
            commands::synth(&cfg, &out)
        }
        Command::Transform { input, out, dump } => commands::transform(&cfg, &input, &out, dump),
        Command::Landmarks { input, out } => commands::landmarks(&cfg, &input, &out),
        Command::Train { stacks, out, landmarks, seed } => {
            if let Some(s) = seed {
                cfg.model.train.seed = s;
            }
            commands::train(&cfg, &stacks, &out, landmarks.as_deref()).map(|_| ())
        }
        Command::Predict { model, stacks, out } => commands::predict(&cfg, &model, &stacks, &out),
        Command::Eval { predictions, out } => commands::eval(&predictions, &out).map(|_| ()),
        Command::Align { train, test, common_train, common_test, out, apply_out } => {
            let common = common_train.as_deref().zip(common_test.as_deref());
            let io = AlignInputs { train: &train, test: &test, common, out: &out, apply_out: apply_out.as_deref() };
            commands::align(&cfg, &io).map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
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
