//! Command-line front end: `split`, `train`, `eval` and `report`.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;
pub mod lock;
pub mod report;

use clap::Parser;

pub use args::{Cli, Command};
pub use error::{CliError, CliResult, EXIT_RUNTIME, EXIT_USAGE};

pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Split(a) => commands::split(a).map(|_| ()),
        Command::Train(a) => commands::train(a).map(|_| ()),
        Command::Eval(a) => commands::eval(a).map(|_| ()),
        Command::Report(a) => {
            let outcome = report::report(&a.runs, &a.out)?;
            for f in &outcome.files {
                eprintln!("wrote {}", f.display());
            }
            Ok(())
        }
    }
}

/// Parses `args` (program name first) and runs; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
