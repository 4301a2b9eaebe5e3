use std::fs;
use std::path::Path;

use log::info;
use nalgebra::DVector;
use serde::Serialize;
use sgrom_core::oracle::{sg_iso_baseline, BaselineOutcome, CostModel};
use sgrom_core::sparse_grid::MultiIndexSet;
use sgrom_core::{tr_run, Counters, RunOutcome, RunStatus};

use crate::report::{
    baseline_header, baseline_row, event_header, event_row, format_float, history_header, history_row, tau_label,
    CsvFile, COST_TAUS,
};
use crate::{with_pool, CliError, Method, RunConfig, EXIT_CONVERGED, EXIT_MAX_ITERATIONS};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostPoint {
    /// `"1"`, `"10"`, `"100"` or `"inf"`.
    pub tau: String,
    pub cost: f64,
}

fn cost_curve(counters: &Counters) -> Vec<CostPoint> {
    COST_TAUS
        .iter()
        .map(|&tau| CostPoint {
            tau: tau_label(tau),
            cost: CostModel::default().cost(counters, tau),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub status: String,
    pub iterations: usize,
    pub accepted_steps: usize,
    pub initial_grad_norm: f64,
    pub final_grad_norm: f64,
    pub final_mu: Vec<f64>,
    pub events: usize,
    pub counters: Counters,
    pub costs: Vec<CostPoint>,
}

impl RunReport {
    fn new(out: &RunOutcome) -> Self {
        Self {
            status: match out.status {
                RunStatus::Converged => "converged".into(),
                RunStatus::MaxIterations => "max-iterations".into(),
            },
            iterations: out.history.len(),
            accepted_steps: out
                .history
                .iter()
                .filter(|r| r.step.as_ref().is_some_and(|s| s.accepted))
                .count(),
            initial_grad_norm: out.initial_grad_norm,
            final_grad_norm: out.final_grad_norm,
            final_mu: out.mu.iter().copied().collect(),
            events: out.events.len(),
            counters: out.counters,
            costs: cost_curve(&out.counters),
        }
    }

    pub fn exit_code(&self) -> u8 {
        if self.status == "converged" {
            EXIT_CONVERGED
        } else {
            EXIT_MAX_ITERATIONS
        }
    }
}

fn prepare_out(config: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(config.out.join("grids"))?;
    fs::write(config.out.join("config.echo"), config.to_toml())?;
    Ok(())
}

fn write_summary<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = toml::to_string(value).map_err(|e| CliError::Solver(format!("summary: {e}")))?;
    fs::write(path, text)?;
    Ok(())
}

/// Trust-region run writing `history.csv`, `events.csv` and
/// `grids/iter_k.txt` as iterations complete.
fn optimize_into(config: &RunConfig) -> Result<(RunReport, RunOutcome), CliError> {
    let problem = config.problem.build()?;
    let n_mu = config.problem.n_mu();
    let mut history = CsvFile::create(&config.out.join("history.csv"), &history_header(n_mu))?;
    let mut events = CsvFile::create(&config.out.join("events.csv"), &event_header())?;
    let grids = config.out.join("grids");
    let opts = config.adapt_options();
    let mu0 = DVector::from_vec(config.mu0());
    let mut written = 0;
    let mut io_error: Option<std::io::Error> = None;
    let result = with_pool(config.threads, || {
        tr_run(problem.as_ref(), &config.trust_region, &opts, &mu0, |rec, state| {
            info!(
                "k {} |grad| {:.3e} delta {:.3e} grid {} basis {} hdm {}",
                rec.k, rec.grad_norm, rec.delta, rec.grid_size, rec.basis_size, rec.counters.hdm_primal
            );
            let mut write = || -> std::io::Result<()> {
                history.row(&history_row(rec))?;
                // every refinement is followed by a sweep inside its driver,
                // so events are final once their iteration has completed
                for e in &state.tracker.events[written..] {
                    events.row(&event_row(e))?;
                }
                written = state.tracker.events.len();
                fs::write(grids.join(format!("iter_{}.txt", rec.k)), state.pair.grid().to_text())
            };
            if io_error.is_none() {
                io_error = write().err();
            }
        })
    })?;
    if let Some(e) = io_error {
        return Err(e.into());
    }
    let outcome = match result {
        Ok(o) => o,
        Err(e) => {
            fs::write(config.out.join("failure.txt"), format!("{e}\n"))?;
            return Err(CliError::Solver(e.to_string()));
        }
    };
    let report = RunReport::new(&outcome);
    write_summary(&config.out.join("summary.toml"), &report)?;
    Ok((report, outcome))
}

pub fn run_optimize(config: &RunConfig) -> Result<RunReport, CliError> {
    prepare_out(config)?;
    match config.method {
        Method::SgRomTr => Ok(optimize_into(config)?.0),
        Method::SgIso => baseline_into(config),
    }
}

fn run_baseline(config: &RunConfig) -> Result<BaselineOutcome, CliError> {
    let problem = config.problem.build()?;
    let mu0 = DVector::from_vec(config.mu0());
    let bopts = config.baseline_options();
    let newton = config.newton_options();
    let result = with_pool(config.threads, || {
        sg_iso_baseline(problem.as_ref(), &mu0, &bopts, &newton)
    })?;
    let baseline = match result {
        Ok(b) => b,
        Err(e) => {
            fs::write(config.out.join("failure.txt"), format!("baseline: {e}\n"))?;
            return Err(CliError::Solver(format!("baseline: {e}")));
        }
    };
    info!(
        "baseline {} after {} iterations, |grad| {:.3e}, hdm {}",
        baseline.status.as_str(),
        baseline.history.len(),
        baseline.grad_norm,
        baseline.counters.hdm_primal
    );
    Ok(baseline)
}

/// Baseline run in the trust-region report layout: `history.csv` holds the
/// BFGS iterations, `events.csv` stays empty and every `grids/iter_k.txt`
/// is the fixed tensor index set.
fn baseline_into(config: &RunConfig) -> Result<RunReport, CliError> {
    let baseline = run_baseline(config)?;
    let mut history = CsvFile::create(&config.out.join("history.csv"), &baseline_header())?;
    CsvFile::create(&config.out.join("events.csv"), &event_header())?;
    let grid = MultiIndexSet::rectangular(&vec![config.baseline.level; config.problem.n_y()])
        .map_err(|e| CliError::Solver(e.to_string()))?
        .to_text();
    for r in &baseline.history {
        history.row(&baseline_row(r))?;
        fs::write(config.out.join("grids").join(format!("iter_{}.txt", r.k)), &grid)?;
    }
    let report = RunReport {
        status: baseline.status.as_str().into(),
        iterations: baseline.history.len(),
        accepted_steps: baseline.history.len().saturating_sub(1),
        initial_grad_norm: baseline.history.first().map_or(baseline.grad_norm, |r| r.grad_norm),
        final_grad_norm: baseline.grad_norm,
        final_mu: baseline.mu.clone(),
        events: 0,
        counters: baseline.counters,
        costs: cost_curve(&baseline.counters),
    };
    write_summary(&config.out.join("summary.toml"), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BaselineSummary {
    pub status: String,
    pub nodes: usize,
    pub iterations: usize,
    pub final_value: f64,
    pub final_grad_norm: f64,
    pub final_mu: Vec<f64>,
    pub counters: Counters,
    pub costs: Vec<CostPoint>,
}

impl BaselineSummary {
    fn new(out: &BaselineOutcome) -> Self {
        Self {
            status: out.status.as_str().into(),
            nodes: out.nodes,
            iterations: out.history.len(),
            final_value: out.value,
            final_grad_norm: out.grad_norm,
            final_mu: out.mu.clone(),
            counters: out.counters,
            costs: cost_curve(&out.counters),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareReport {
    pub trust_region: RunReport,
    pub baseline: BaselineSummary,
    /// Primal full-order solves of the trust-region run over those of the baseline.
    pub hdm_primal_ratio: f64,
}

/// Trust-region run and tensor-grid BFGS baseline from the same `μ0`, with
/// the joint cost table `compare.csv`.
pub fn run_compare(config: &RunConfig) -> Result<CompareReport, CliError> {
    prepare_out(config)?;
    let (tr, outcome) = optimize_into(config)?;
    let baseline = run_baseline(config)?;
    let mut bfile = CsvFile::create(&config.out.join("baseline.csv"), &baseline_header())?;
    for r in &baseline.history {
        bfile.row(&baseline_row(r))?;
    }

    // one row per iteration and method: objective estimate against cost
    let mut header = vec!["method".to_string(), "k".into(), "objective".into(), "grad_norm".into()];
    header.extend(COST_TAUS.iter().map(|&t| format!("cost_tau_{}", tau_label(t))));
    let mut table = CsvFile::create(&config.out.join("compare.csv"), &header)?;
    let model = CostModel::default();
    let costs = |c: &Counters| {
        COST_TAUS
            .iter()
            .map(|&t| format_float(model.cost(c, t)))
            .collect::<Vec<_>>()
    };
    for r in &outcome.history {
        let objective = r.step.as_ref().map(|s| format_float(s.m_center)).unwrap_or_default();
        let mut row = vec![
            "sg-rom-tr".into(),
            r.k.to_string(),
            objective,
            format_float(r.grad_norm),
        ];
        row.extend(costs(&r.counters));
        table.row(&row)?;
    }
    for r in &baseline.history {
        let mut row = vec![
            "sg-iso".into(),
            r.k.to_string(),
            format_float(r.value),
            format_float(r.grad_norm),
        ];
        row.extend(costs(&r.counters));
        table.row(&row)?;
    }
    let report = CompareReport {
        hdm_primal_ratio: tr.counters.hdm_primal as f64 / baseline.counters.hdm_primal as f64,
        trust_region: tr,
        baseline: BaselineSummary::new(&baseline),
    };
    write_summary(&config.out.join("compare.toml"), &report)?;
    Ok(report)
}
