//! `satmap`: synthetic data, training, ablation, evaluation and figures for
//! satellite-prior vectorized map construction.

mod ablate;
mod args;
mod crop;
mod data;
mod eval;
mod failure;
mod gradcheck;
mod rasterize;
mod synth;
mod train;

use std::io::Write;
use std::process::ExitCode;

use clap::Parser;

use crate::args::{Cli, Command};
use crate::failure::Failure;

fn run(cli: Cli) -> Result<String, Failure> {
    match cli.command {
        Command::Eval(a) => eval::run(a),
        Command::Synth(a) => synth::run(a),
        Command::Train(a) => train::run(a),
        Command::Ablate(a) => ablate::run(a),
        Command::CropSat(a) => crop::run(a),
        Command::Gradcheck(a) => gradcheck::run(a),
        Command::Rasterize(a) => rasterize::run(a),
    }
}

/// Writes a command's JSON document to stdout and reports failures with a
/// `satmap:` prefix on stderr.
fn finish(out: &str, code: u8) -> ExitCode {
    if !out.is_empty() {
        let mut stdout = std::io::stdout().lock();
        if stdout.write_all(out.as_bytes()).and_then(|_| stdout.flush()).is_err() {
            return ExitCode::from(failure::DATA);
        }
    }
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { failure::USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(out) => finish(&out, 0),
        Err(f) => {
            eprintln!("satmap: {f}");
            finish(f.stdout(), f.code())
        }
    }
}
