//! `gatedvlad` command line: data generation, training, evaluation, size
//! accounting and ensembling.
//!
//! Every invocation ends with one JSON summary line on stdout. Exit codes:
//! 0 success, 1 usage error, 2 data or validation error, 3 runtime error.

mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;
use serde_json::{json, Value};

use args::Cli;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let name = cli.command.name();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads.max(1)).build_global() {
        eprintln!("error: {e}");
        return ExitCode::from(3);
    }
    match commands::run(cli.command) {
        Ok(fields) => {
            println!("{}", summary(name, "ok", fields));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = e.exit_code();
            eprintln!("error: {e}");
            println!("{}", summary(name, "error", json!({ "exit_code": code, "error": e.to_string() })));
            ExitCode::from(code)
        }
    }
}

fn summary(command: &str, status: &str, fields: Value) -> Value {
    let mut out = json!({ "command": command, "status": status });
    if let (Some(o), Value::Object(extra)) = (out.as_object_mut(), fields) {
        o.extend(extra);
    }
    out
}
