//! Command-line front end for the relaxed stochastic control library.
//!
//! Exit codes: 0 success, 1 solver error, 2 configuration error, 3 a
//! `verify` run whose certificate verdict is "fail".

mod commands;
mod config;

use clap::{Parser, Subcommand};

use config::CommonArgs;

/// Errors carry their exit code: configuration problems exit 2, runtime
/// (solver or I/O) problems exit 1.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    fn config(msg: String) -> Self {
        CliError::Config(msg)
    }

    fn io(msg: String) -> Self {
        CliError::Runtime(msg)
    }

    /// A library error raised while interpreting user input.
    fn from_config_phase(e: bsdeopt::Error) -> Self {
        CliError::Config(e.to_string())
    }

    /// A library error raised while computing.
    fn solver(e: bsdeopt::Error) -> Self {
        CliError::Runtime(e.to_string())
    }

    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => m,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "bsdeopt",
    version,
    about = "Optimal control of backward stochastic dynamics over relaxed \
             (measure-valued) and strict control schedules"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the controlled backward equation under a fixed schedule
    Solve(CommonArgs),
    /// Minimize the cost over relaxed schedules by conditional gradient
    Optimize(CommonArgs),
    /// Evaluate the Hamiltonian gap (first-order optimality measure)
    Gap(CommonArgs),
    /// Project a relaxed schedule to a fast-switching strict control and
    /// compare values across refinements
    Chatter(CommonArgs),
    /// Issue first-order and convexity certificates for a schedule
    Verify(CommonArgs),
    /// List the registered benchmark problems
    ListProblems,
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Solve(args) => commands::cmd_solve(args),
        Command::Optimize(args) => commands::cmd_optimize(args),
        Command::Gap(args) => commands::cmd_gap(args),
        Command::Chatter(args) => commands::cmd_chatter(args),
        Command::Verify(args) => commands::cmd_verify(args),
        Command::ListProblems => Ok(commands::cmd_list_problems()),
    };
    match result {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {}", e.message());
            std::process::exit(e.exit_code());
        }
    }
}
