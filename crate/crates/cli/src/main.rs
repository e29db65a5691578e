use std::fmt;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod flags;

use commands::{AblateArgs, BenchArgs, EvalArgs, GenArgs, PredictArgs, TrainArgs};

pub const THREADS_ENV: &str = "TRIAFFINE_THREADS";

/// Nested named entity recognition with triaffine span scoring.
#[derive(Parser, Debug)]
#[command(name = "triaffine", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic nested corpus split into train/dev/test.
    Gen(GenArgs),
    /// Train a model and write metrics and checkpoints.
    Train(TrainArgs),
    /// Score a checkpoint or a prediction file against gold data.
    Eval(EvalArgs),
    /// Write predictions of a checkpoint as JSON lines.
    Predict(PredictArgs),
    /// Time naive against decomposed scoring.
    Bench(BenchArgs),
    /// Train every setting (a)-(h) and tabulate dev scores.
    Ablate(AblateArgs),
}

/// Bad invocation: missing inputs, malformed overrides.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn exit_code(err: &anyhow::Error) -> u8 {
    use triaffine_core::Error as E;
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_) => 1,
                E::Numeric(_) | E::Shape(_) | E::Index(_) => 3,
                E::Precondition(_)
                | E::Vocab(_)
                | E::Load { .. }
                | E::Eval(_)
                | E::Checkpoint(_)
                | E::Io(_)
                | E::Json(_) => 2,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return 2;
        }
    }
    1
}

/// Applies the thread-count variable and describes the outcome.
fn configure_threads() -> anyhow::Result<String> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| Usage(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?;
            rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
            Ok(format!("{n} ({THREADS_ENV}={v})"))
        }
        Err(_) => Ok(format!("{} (default)", rayon::current_num_threads())),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let threads = configure_threads()?;
    match cli.command {
        Command::Gen(a) => commands::gen(a, &threads),
        Command::Train(a) => commands::train(a, &threads),
        Command::Eval(a) => commands::eval(a),
        Command::Predict(a) => commands::predict(a),
        Command::Bench(a) => commands::bench(a, &threads),
        Command::Ablate(a) => commands::ablate(a, &threads),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
