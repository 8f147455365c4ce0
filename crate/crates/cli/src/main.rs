//! `distknn`: build two-tier kd-trees over simulated ranks, run k-NN query
//! workloads, check them against a linear scan and benchmark them.

mod commands;
mod config;

use std::fmt;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::CommonArgs;

#[derive(Debug, Parser)]
#[command(
    name = "distknn",
    version,
    about = "Distributed exact k-nearest-neighbor search on simulated ranks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    Gen(commands::GenArgs),
    /// Build the trees and save them as a bundle.
    Build(commands::BuildArgs),
    /// Run queries against a saved bundle.
    Query(commands::QueryArgs),
    /// Run the full pipeline and compare every answer with a linear scan.
    Verify(commands::VerifyArgs),
    /// Time construction and querying over a sweep of settings.
    Bench(commands::BenchArgs),
}

/// A failed command: the message for stderr and the process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub const VERIFY: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const DATA: u8 = 3;

    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: Self::USAGE,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: Self::DATA,
            message: message.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<distknn::Error> for Failure {
    fn from(e: distknn::Error) -> Self {
        use distknn::Error as E;
        let code = match e {
            E::Config(_) | E::RankCount(_) | E::ZeroK => Self::USAGE,
            _ => Self::DATA,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl CommonArgs {
    fn resolve(&self) -> Result<config::RunConfig, Failure> {
        config::RunConfig::resolve(self)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Build(a) => commands::build(a),
        Command::Query(a) => commands::query(a),
        Command::Verify(a) => commands::verify(a),
        Command::Bench(a) => commands::bench(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("distknn: {f}");
            ExitCode::from(f.code)
        }
    }
}
