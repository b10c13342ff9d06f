mod commands;
mod config;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use commands::*;

/// Linear self-attention for in-context classification under ℓ∞ attacks.
#[derive(Parser)]
#[command(name = "robust-icl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Adversarially pretrain P and Q on the training mixture.
    Train(TrainArgs),
    /// Clean and robust accuracy of one parameter set on one task.
    Eval(EvalArgs),
    /// Standard and adversarial closed forms on all five Table-1 tasks.
    Table1(Table1Args),
    /// Accuracy of both closed forms along one task axis.
    Sweep(SweepArgs),
    /// Score of every (d', b) configuration.
    ScoreTable(ScoreTableArgs),
    /// Budget thresholds and the optimal configuration per regime.
    VerifyTheory(VerifyArgs),
    /// Centre and label-align one class pair and export it as CSV.
    Preprocess(PreprocessArgs),
    /// Alignment and total-covariance statistics per class pair.
    Stats(StatsArgs),
    /// One prompt before and after the optimal query attack.
    AttackDemo(AttackDemoArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Table1(a) => table1(a),
        Command::Sweep(a) => sweep(a),
        Command::ScoreTable(a) => score_table(a),
        Command::VerifyTheory(a) => verify_theory(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Stats(a) => stats(a),
        Command::AttackDemo(a) => attack_demo(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
