//! Command-line front end: configuration files, optimization and comparison
//! runs, validation suites and the CSV reports they write.

// range checks are written as `!(x > a)` so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;
mod report;
mod run;
mod validate;

use thiserror::Error;

pub use config::{
    BaselineConfig, IndicatorConfig, Method, NewtonConfig, ProblemConfig, RomConfig, RunConfig, ValidateConfig,
};
pub use report::{format_float, COST_TAUS};
pub use run::{run_compare, run_optimize, BaselineSummary, CompareReport, CostPoint, RunReport};
pub use validate::{run_validate, validate_problem, SuiteResult, ValidationReport};

pub const EXIT_CONVERGED: u8 = 0;
pub const EXIT_FAILED_CHECK: u8 = 1;
pub const EXIT_MAX_ITERATIONS: u8 = 2;
pub const EXIT_SOLVER: u8 = 3;
pub const EXIT_CONFIG: u8 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Solver(_) => EXIT_SOLVER,
            CliError::Io(_) => EXIT_FAILED_CHECK,
        }
    }
}

/// Runs `f` on a dedicated pool; `threads == 0` uses all cores.
pub(crate) fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Config(format!("threads: {e}")))?;
    Ok(pool.install(f))
}
