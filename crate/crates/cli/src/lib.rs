//! Library behind the `eqalloc` binary. [`run`] parses arguments, executes a
//! command and returns its report together with the process exit code.

pub mod commands;
pub mod config;
pub mod report;

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use eqalloc::simulator::SimulationError;
use eqalloc::{AllocationError, EigenError, PopulationError};
use thiserror::Error;

pub use config::{Baseline, GenerateConfig, Overrides, ReportFormat, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "eqalloc", version, about = "Equal-precision sample allocation for stratified surveys")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Overrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Validate a frame and evaluate the uniqueness condition
    Check,
    /// Compute the optimal allocation
    Allocate,
    /// Draw repeated samples under the optimal allocation and a baseline
    Simulate,
    /// Write a synthetic unit-level two-stage frame
    Generate,
    /// Print the resolved configuration as TOML
    ShowConfig,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Population(#[from] PopulationError),
    #[error(transparent)]
    Allocation(#[from] AllocationError),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
}

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_CONDITION: u8 = 3;
pub const EXIT_INFEASIBLE: u8 = 4;

fn population_code(e: &PopulationError) -> u8 {
    match e {
        PopulationError::Io { .. } => EXIT_USAGE,
        PopulationError::WrongKind { .. } | PopulationError::InvalidPriority(_) => EXIT_USAGE,
        _ => EXIT_VALIDATION,
    }
}

fn allocation_code(e: &AllocationError) -> u8 {
    match e {
        AllocationError::Eigen(_) => EXIT_CONDITION,
        AllocationError::Population(p) => population_code(p),
        AllocationError::SchemeMismatch(_) | AllocationError::InvalidBudget(_) => EXIT_USAGE,
        AllocationError::BudgetTooLarge { .. }
        | AllocationError::ZeroCell { .. }
        | AllocationError::InfeasibleCap(_) => EXIT_INFEASIBLE,
    }
}

impl CliError {
    /// 1 usage or I/O, 2 frame validation, 3 uniqueness condition or
    /// eigensolver, 4 infeasible budgets or designs.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Io(_) => EXIT_USAGE,
            CliError::Population(e) => population_code(e),
            CliError::Allocation(e) => allocation_code(e),
            CliError::Simulation(e) => match e {
                SimulationError::Allocation(a) => allocation_code(a),
                SimulationError::Population(p) => population_code(p),
                SimulationError::MissingUnits
                | SimulationError::SizeMeasure(_)
                | SimulationError::GammaInfeasible { .. } => EXIT_VALIDATION,
                SimulationError::SampleSize { .. }
                | SimulationError::InclusionOverflow { .. }
                | SimulationError::SingletonStratum { .. } => EXIT_INFEASIBLE,
                SimulationError::InvalidParams(_) | SimulationError::Design(_) => EXIT_USAGE,
            },
        }
    }
}

impl From<EigenError> for CliError {
    fn from(e: EigenError) -> Self {
        CliError::Allocation(e.into())
    }
}

/// A finished command: the report text, where it goes, notes for stderr and
/// the exit code.
#[derive(Debug, Clone, PartialEq)]
pub struct Output {
    pub text: String,
    pub out: Option<PathBuf>,
    pub diagnostics: Vec<String>,
    pub code: u8,
}

impl Output {
    /// Writes the report to its file, or to stdout when there is none.
    pub fn emit(&self) -> Result<(), CliError> {
        match &self.out {
            Some(path) => fs::write(path, &self.text)
                .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display()))),
            None => {
                let mut stdout = io::stdout().lock();
                stdout
                    .write_all(self.text.as_bytes())
                    .and_then(|_| stdout.flush())
                    .map_err(|e| CliError::Io(format!("cannot write to stdout: {e}")))
            }
        }
    }
}

pub fn execute(cli: &Cli) -> Result<Output, CliError> {
    let cfg = RunConfig::resolve(&cli.flags)?;
    match cli.command {
        Command::Check => commands::check(&cfg),
        Command::Allocate => commands::allocate(&cfg),
        Command::Simulate => commands::simulate(&cfg),
        Command::Generate => commands::generate(&cfg),
        Command::ShowConfig => Ok(Output {
            text: cfg.to_toml(),
            out: cfg.out.clone(),
            diagnostics: Vec::new(),
            code: 0,
        }),
    }
}

/// Parses `args` (program name first), executes and emits the report.
/// Returns the exit code; every message meant for a human goes to stderr.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = execute(&cli).and_then(|output| {
        output.emit()?;
        Ok(output)
    });
    match result {
        Ok(output) => {
            for d in &output.diagnostics {
                eprintln!("eqalloc: {d}");
            }
            output.code
        }
        Err(e) => {
            eprintln!("eqalloc: error: {e}");
            e.exit_code()
        }
    }
}
