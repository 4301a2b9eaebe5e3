use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;
use sgrom_cli::{run_compare, run_optimize, run_validate, CliError, RunConfig, EXIT_CONVERGED, EXIT_FAILED_CHECK};

#[derive(Parser)]
#[command(
    name = "sgrom",
    version,
    about = "Sparse-grid reduced-order-model trust-region optimization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration; defaults apply when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for reports.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed of the validation sample draws.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the trust-region method and write the iteration history.
    Optimize,
    /// Run the gradient, quadrature, ROM and bound validation suites.
    Validate,
    /// Run the trust-region method and the tensor-grid baseline side by side.
    Compare,
}

fn load(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        config.out = out.clone();
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(threads) = cli.threads {
        config.threads = threads;
    }
    config.check()?;
    Ok(config)
}

fn run(cli: &Cli) -> Result<u8, CliError> {
    let config = load(cli)?;
    match cli.command {
        Command::Optimize => {
            let report = run_optimize(&config)?;
            println!(
                "{} after {} iterations: |grad| {:e} -> {:e}, {} primal full-order solves",
                report.status,
                report.iterations,
                report.initial_grad_norm,
                report.final_grad_norm,
                report.counters.hdm_primal
            );
            Ok(report.exit_code())
        }
        Command::Validate => {
            let report = run_validate(&config)?;
            for s in &report.suites {
                println!(
                    "{:<16} {}  {}",
                    s.name,
                    if s.passed { "pass" } else { "FAIL" },
                    s.detail
                );
            }
            Ok(if report.passed() {
                EXIT_CONVERGED
            } else {
                EXIT_FAILED_CHECK
            })
        }
        Command::Compare => {
            let report = run_compare(&config)?;
            for (name, hdm, costs) in [
                (
                    "sg-rom-tr",
                    report.trust_region.counters.hdm_primal,
                    &report.trust_region.costs,
                ),
                ("sg-iso", report.baseline.counters.hdm_primal, &report.baseline.costs),
            ] {
                let curve: Vec<String> = costs
                    .iter()
                    .map(|c| format!("C(tau={})={:.1}", c.tau, c.cost))
                    .collect();
                println!("{name:<10} primal full-order solves {hdm:>6}  {}", curve.join("  "));
            }
            println!("primal solve ratio {:.4}", report.hdm_primal_ratio);
            Ok(report.trust_region.exit_code())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
