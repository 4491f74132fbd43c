use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stable_fi::commands::{cmd_eval, cmd_gen, cmd_train, EvalArgs, GenArgs, Split, TrainArgs};
use stable_fi::dataset::SplitCounts;
use stable_fi_core::synth::SynthKind;

/// Stable feature-interaction CTR models: generate, train, evaluate.
#[derive(Debug, Parser)]
#[command(name = "stable-fi", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic multi-environment dataset.
    Gen {
        #[arg(long, value_parser = parse_kind)]
        kind: SynthKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Number of environments.
        #[arg(long)]
        envs: Option<usize>,
        /// Instances per environment.
        #[arg(long)]
        per_env: Option<usize>,
        /// Base field cardinalities, comma separated.
        #[arg(long, value_delimiter = ',')]
        fields: Option<Vec<usize>>,
    },
    /// Train a model; writes the model file and `history.json` beside it.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model_out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        counts: CountArgs,
    },
    /// Evaluate a model on one split and write a JSON report.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_split)]
        split: Split,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        counts: CountArgs,
    },
}

/// Chronological split sizes, in environments.
#[derive(Debug, Args)]
struct CountArgs {
    #[arg(long, default_value_t = 5)]
    train_envs: usize,
    #[arg(long, default_value_t = 2)]
    valid_envs: usize,
    #[arg(long, default_value_t = 3)]
    test_envs: usize,
}

impl From<CountArgs> for SplitCounts {
    fn from(c: CountArgs) -> Self {
        SplitCounts {
            train: c.train_envs,
            valid: c.valid_envs,
            test: c.test_envs,
        }
    }
}

fn parse_kind(s: &str) -> Result<SynthKind, String> {
    SynthKind::parse(s).ok_or_else(|| format!("expected stable, sp or dc, got `{s}`"))
}

fn parse_split(s: &str) -> Result<Split, String> {
    Split::parse(s).ok_or_else(|| format!("expected train, valid or test, got `{s}`"))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Gen {
            kind,
            out,
            seed,
            envs,
            per_env,
            fields,
        } => cmd_gen(&GenArgs {
            kind,
            out,
            seed,
            envs,
            per_env,
            fields,
        }),
        Command::Train {
            data,
            config,
            model_out,
            seed,
            counts,
        } => cmd_train(&TrainArgs {
            data,
            config,
            model_out,
            seed,
            counts: counts.into(),
        }),
        Command::Eval {
            data,
            split,
            model,
            report,
            counts,
        } => cmd_eval(&EvalArgs {
            data,
            split,
            model,
            report,
            counts: counts.into(),
        }),
    };
    match result {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
