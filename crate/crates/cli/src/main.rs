mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;
use gccn_core::Error;

use args::{Cli, Command};

/// Usage and configuration problems exit with 2, everything else with 1.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("invalid arguments");
            let reason = first.trim_start_matches("error: ");
            eprintln!("error: kind=usage reason={reason}");
            return ExitCode::from(2);
        }
    };
    let result = match &cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::TrainClassify(a) => commands::train_classify(a),
        Command::TrainFewshot(a) => commands::train_fewshot_cmd(a),
        Command::Eval(a) => commands::eval(a),
        Command::ExtractFeatures(a) => commands::extract_features(a),
        Command::ImportRaw(a) => commands::import_raw(a),
        Command::Selftest(a) => match commands::selftest(a) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(1),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let reason = e.reason().replace('\n', " ");
            eprintln!("error: kind={} reason={}", e.kind(), reason);
            ExitCode::from(exit_code(&e))
        }
    }
}
