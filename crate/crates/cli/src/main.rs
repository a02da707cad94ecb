//! `hiconform` — conformal prediction sets over label hierarchies.
//!
//! Subcommands wire synthetic data generation, classifier training,
//! conformal calibration (flat split or hierarchy-aware risk control),
//! label-shift correction, prediction, evaluation, and repeated-trial
//! coverage studies into reproducible pipelines.
//!
//! Contract with calling scripts: on success, exactly one line of summary
//! JSON on stdout; on failure, one line of `{"error":{"kind","message"}}`
//! on stderr with exit code 1 (configuration), 2 (data), or 3 (requested
//! calibration statistically infeasible). The `HICONFORM_SEED` environment
//! variable overrides any configured or flagged seed.

mod artifact;
mod commands;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use artifact::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "hiconform",
    version,
    about = "Conformal prediction sets over label hierarchies"
)]
struct Cli {
    /// Cap the worker pool; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a synthetic dataset with a known hierarchical label law.
    Synth(commands::SynthArgs),
    /// Fit the multinomial logit classifier on a labeled feature table.
    Train(commands::TrainArgs),
    /// Calibrate flat split-conformal sets on held-out labeled scores.
    SplitCalibrate(commands::SplitCalibrateArgs),
    /// Calibrate hierarchy-aware sets by conformal risk control.
    CrcCalibrate(commands::CrcCalibrateArgs),
    /// Emit split-conformal prediction sets for new rows.
    SplitPredict(commands::PredictArgs),
    /// Emit hierarchy-aware prediction sets for new rows.
    CrcPredict(commands::PredictArgs),
    /// Re-calibrate under label shift with a resampling correction.
    Correct(commands::CorrectArgs),
    /// Score prediction sets against true labels.
    Evaluate(commands::EvaluateArgs),
    /// Run a repeated-trial coverage study from a scenario file.
    Study(commands::StudyArgs),
    /// One-shot run: split, train, calibrate, correct, predict, evaluate.
    Pipeline(commands::PipelineArgs),
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Synth(args) => commands::synth(args),
        Command::Train(args) => commands::train(args),
        Command::SplitCalibrate(args) => commands::split_calibrate(args),
        Command::CrcCalibrate(args) => commands::crc_calibrate(args),
        Command::SplitPredict(args) => commands::split_predict(args),
        Command::CrcPredict(args) => commands::crc_predict(args),
        Command::Correct(args) => commands::correct(args),
        Command::Evaluate(args) => commands::evaluate(args),
        Command::Study(args) => commands::study(args),
        Command::Pipeline(args) => commands::pipeline(args),
    }
}

fn fail(error: CliError) -> ! {
    eprintln!("{}", error.to_json());
    std::process::exit(error.exit_code());
}

fn main() {
    // clap's own exit code for usage errors is 2, which this tool reserves
    // for data errors; remap everything except --help/--version.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            if matches!(err.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                err.exit();
            }
            fail(CliError::Config(err.to_string()));
        }
    };
    if let Some(threads) = cli.threads {
        // Errors only if a global pool already exists, which cannot happen
        // this early in main; treat as best-effort regardless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    if let Err(error) = run(cli.command) {
        fail(error);
    }
}
