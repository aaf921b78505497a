//! `parody`: command-line driver for the multi-encoder parody experiments.
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage error.
//! Failures print a single `error[<category>]: <message>` line on stderr.

mod args;
mod cmd;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "parody",
    version,
    about = "Multi-encoder parody detection experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic parody, humor and sarcasm corpora with marker-controlled labels.
    GenSynth(cmd::data::GenSynthArgs),
    /// Split a parody corpus into train/dev/test files plus a manifest.
    Split(cmd::data::SplitArgs),
    /// Masked-language-model pretraining of the humor or sarcasm encoder.
    Pretrain(cmd::stages::PretrainArgs),
    /// Binary fine-tuning of the humor or sarcasm encoder on its own task.
    FinetuneAux(cmd::stages::AuxArgs),
    /// Joint fine-tuning of one fusion strategy and encoder subset.
    Train(cmd::train::TrainArgs),
    /// Train every strategy/subset cell of a plan and render the result table.
    Ablate(cmd::ablate::AblateArgs),
    #[command(hide = true)]
    AblateCell(cmd::ablate::CellArgs),
    /// Multi-task training of one shared encoder with per-task heads.
    Mtl(cmd::mtl::MtlArgs),
    /// Score a saved model on a labelled corpus.
    Eval(cmd::eval::EvalArgs),
    /// Compare analytic and numeric gradients of the full model.
    Gradcheck(cmd::gradcheck::GradcheckArgs),
}

/// Bad flag combinations found after parsing. Reported with exit code 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn category(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return "usage";
        }
        if let Some(e) = cause.downcast_ref::<parody_core::Error>() {
            return e.category();
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "runtime"
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::GenSynth(a) => cmd::data::gen_synth(a),
        Command::Split(a) => cmd::data::split(a),
        Command::Pretrain(a) => cmd::stages::pretrain(a),
        Command::FinetuneAux(a) => cmd::stages::finetune_aux(a),
        Command::Train(a) => cmd::train::train(a),
        Command::Ablate(a) => cmd::ablate::ablate(a),
        Command::AblateCell(a) => cmd::ablate::cell(a),
        Command::Mtl(a) => cmd::mtl::mtl(a),
        Command::Eval(a) => cmd::eval::eval(a),
        Command::Gradcheck(a) => cmd::gradcheck::gradcheck(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
            let _ = e.print();
            return ExitCode::from(2);
        }
        Err(e) => {
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!(
                "error[usage]: {}",
                one_line(first.trim_start_matches("error: "))
            );
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let cat = category(&err);
            eprintln!("error[{cat}]: {}", one_line(&format!("{err:#}")));
            ExitCode::from(if cat == "usage" { 2 } else { 1 })
        }
    }
}
