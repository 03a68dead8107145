mod args;
mod commands;
mod config;
mod manifest;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};
use commands::{EXIT_ARGS, EXIT_IO};

fn run(cli: &Cli, threads: usize) -> i32 {
    let result = match &cli.command {
        Command::Train(a) => commands::train_cmd(a, threads),
        Command::Phenotypes(a) => commands::phenotypes_cmd(a, threads),
        Command::Summarize(a) => commands::summarize_cmd(a, threads),
        Command::Eval(a) => commands::eval_cmd(a, threads),
        Command::Coverage(a) => commands::coverage_cmd(a, threads),
        Command::Synth(a) => commands::synth_cmd(a, threads),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("mctm {}: error: {f}", cli.command.name());
            f.exit_code()
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();

    let argv = match config::expand(std::env::args_os().collect()) {
        Ok(a) => a,
        Err((msg, code)) => {
            eprintln!("mctm: error: {msg}");
            return ExitCode::from(code as u8);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_ARGS as u8),
            };
        }
    };

    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        builder = builder.num_threads(n as usize);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("mctm: error: cannot start worker threads: {e}");
            return ExitCode::from(EXIT_IO as u8);
        }
    };
    let threads = pool.current_num_threads();
    let code = pool.install(|| run(&cli, threads));
    ExitCode::from(code as u8)
}
