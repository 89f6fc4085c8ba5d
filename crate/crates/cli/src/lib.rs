//! The `fmpc` command line: closed-loop simulation, gain design, feedback
//! baseline and log verification driven by a JSON configuration.

pub mod commands;
pub mod config;
pub mod output;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde::Serialize;

pub use commands::{resolve, Resolved};
pub use config::{ConfigError, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_GUARANTEE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "fmpc",
    version,
    about = "Funnel MPC for output tracking with arbitrary relative degree"
)]
pub struct Cli {
    /// JSON configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory for CSV and SVG artifacts.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Print the report as JSON.
    #[arg(long, global = true)]
    pub json: bool,
    /// Reserved; runs are deterministic.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the MPC loop and write trajectory.csv, ocp_steps.csv and trajectory.svg.
    Simulate,
    /// Print gamma, gain bounds, the funnel chain and the input bound.
    Gains,
    /// Run the explicit funnel feedback and write baseline.csv and baseline.svg.
    Baseline,
    /// Check the funnel and input guarantees on a stored log.
    Verify {
        /// CSV written by `simulate` or `baseline`.
        log: PathBuf,
    },
}

/// What a command printed and whether its guarantee held.
#[derive(Debug)]
pub struct Outcome {
    pub pass: bool,
    pub text: String,
    pub json: String,
}

fn outcome<T: Serialize>(pass: bool, text: String, report: &T) -> Outcome {
    Outcome {
        pass,
        text,
        json: serde_json::to_string_pretty(report).expect("report serializes"),
    }
}

pub fn execute(cli: &Cli) -> anyhow::Result<Outcome> {
    let config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let res = resolve(&config)?;
    match &cli.command {
        Command::Simulate => {
            let (summary, _) = commands::simulate(&res, &cli.out)?;
            Ok(outcome(summary.pass, summary.render(), &summary))
        }
        Command::Gains => {
            let report = commands::gains(&res)?;
            let pass = report.members.iter().all(|m| m.class_g);
            Ok(outcome(pass, report.render(), &report))
        }
        Command::Baseline => {
            let summary = commands::baseline(&res, &cli.out)?;
            Ok(outcome(summary.pass, summary.render(), &summary))
        }
        Command::Verify { log } => {
            let summary = commands::verify(&res, log)?;
            Ok(outcome(summary.pass, summary.render(), &summary))
        }
    }
}

/// 0 pass, 1 guarantee failure (including an infeasible OCP), 2 bad
/// configuration or log schema, 3 anything else.
pub fn exit_code(result: &anyhow::Result<Outcome>) -> i32 {
    match result {
        Ok(o) if o.pass => EXIT_OK,
        Ok(_) => EXIT_GUARANTEE,
        Err(e) if e.downcast_ref::<ConfigError>().is_some() => EXIT_CONFIG,
        Err(e) => match e.downcast_ref::<fmpc_core::Error>() {
            Some(fmpc_core::Error::RecursiveFeasibilityViolation { .. }) => EXIT_GUARANTEE,
            _ => EXIT_RUNTIME,
        },
    }
}

/// Execute, print, and return the process exit code.
pub fn run(cli: &Cli) -> i32 {
    let result = execute(cli);
    match &result {
        Ok(o) if cli.json => println!("{}", o.json),
        Ok(o) => print!("{}", o.text),
        Err(e) => eprintln!("error: {e:#}"),
    }
    exit_code(&result)
}
