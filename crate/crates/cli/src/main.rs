//! `fairbat` command-line experiment runner.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{what} not found: {}", path.display())]
    NotFound { what: &'static str, path: PathBuf },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Core(#[from] fairbat::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            Self::NotFound { .. } | Self::Invalid(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "fairbat", version, about = "Balance adversarial training and robust-fairness analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Attack flags shared by `eval` and `analyze`. Unset values take
/// subcommand-specific defaults.
#[derive(Debug, clap::Args)]
struct AttackArgs {
    /// ℓ∞ budget in [0, 1] input units.
    #[arg(long, default_value_t = 8.0 / 255.0)]
    eps: f32,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    step_size: Option<f32>,
    /// Scale of the Gaussian random start.
    #[arg(long, default_value_t = 0.0)]
    random_start: f32,
}

/// Dataset and evaluation flags shared by `eval` and `analyze`.
#[derive(Debug, clap::Args)]
struct EvalArgs {
    checkpoint: PathBuf,
    dataset: PathBuf,
    /// Comma-separated class ids to drop before evaluation.
    #[arg(long, value_delimiter = ',')]
    exclude: Vec<usize>,
    /// Directory for the output files.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads (0: $FAIRBAT_THREADS or all CPUs).
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Steps,
    Targets,
    Confusion,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw a dataset from a Gaussian-mixture spec (JSON) into an FTDS file.
    Gen {
        spec: PathBuf,
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model from an experiment config (JSON).
    Train {
        config: PathBuf,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-class standard/boundary/robust errors under a PGD attack.
    Eval {
        #[command(flatten)]
        data: EvalArgs,
        #[command(flatten)]
        attack: AttackArgs,
    },
    /// Source-class, target-class and confusion diagnostics.
    Analyze {
        #[command(flatten)]
        data: EvalArgs,
        #[arg(long, value_enum)]
        mode: Mode,
        #[command(flatten)]
        attack: AttackArgs,
        /// Attack step at which to read the confusion matrix (default: last).
        #[arg(long)]
        at_step: Option<usize>,
        /// Steps of the attack behind the robust accuracy in `steps` mode.
        #[arg(long, default_value_t = 20)]
        eval_steps: usize,
        /// Step size of that attack (default: eps / 4).
        #[arg(long)]
        eval_step_size: Option<f32>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen { spec, out, seed } => commands::gen(&spec, &out, seed),
        Command::Train { config, out } => commands::train(&config, out.as_deref()),
        Command::Eval { data, attack } => commands::eval(&data.into(), &attack.to_config(20, 4.0)),
        Command::Analyze {
            data,
            mode,
            attack,
            at_step,
            eval_steps,
            eval_step_size,
        } => {
            let data = data.into();
            match mode {
                Mode::Steps => {
                    let longrun = attack.to_config(1000, 20.0);
                    let eval = fairbat::AttackConfig {
                        max_steps: eval_steps,
                        step_size: eval_step_size.unwrap_or(attack.to_config(20, 4.0).step_size),
                        ..attack.to_config(20, 4.0)
                    };
                    commands::analyze_steps(&data, &longrun, &eval)
                }
                Mode::Targets => commands::analyze_targets(&data, &attack.to_config(20, 4.0)),
                Mode::Confusion => commands::analyze_confusion(&data, &attack.to_config(20, 4.0), at_step),
            }
        }
    }
}

impl AttackArgs {
    /// Cross-entropy sign attack; `steps` defaults to `default_steps` and the
    /// step size to `eps / step_div` (any positive value when `eps` is 0).
    fn to_config(&self, default_steps: usize, step_div: f32) -> fairbat::AttackConfig {
        let step = if self.eps > 0.0 { self.eps / step_div } else { 1.0 / 255.0 };
        fairbat::AttackConfig {
            eps: self.eps,
            step_size: self.step_size.unwrap_or(step),
            max_steps: self.steps.unwrap_or(default_steps),
            random_start_scale: self.random_start,
            loss_kind: fairbat::AttackLoss::CrossEntropy,
            step_rule: fairbat::StepRule::Sign,
        }
    }
}

impl From<EvalArgs> for commands::EvalInputs {
    fn from(a: EvalArgs) -> Self {
        Self {
            checkpoint: a.checkpoint,
            dataset: a.dataset,
            exclude: a.exclude,
            out: a.out,
            opts: fairbat::EvalOptions {
                threads: a.threads,
                seed: a.seed,
                ..Default::default()
            },
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
