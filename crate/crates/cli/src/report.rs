use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use sgrom_core::adapt::RefinementEvent;
use sgrom_core::oracle::{BaselineRecord, CostModel};
use sgrom_core::{Counters, IterationRecord};

/// Reduced-query cost ratios of the cost curves.
pub const COST_TAUS: [f64; 4] = [1.0, 10.0, 100.0, f64::INFINITY];

/// Shortest representation that parses back to the same value.
pub fn format_float(x: f64) -> String {
    format!("{x:e}")
}

pub(crate) fn tau_label(tau: f64) -> String {
    if tau.is_infinite() {
        "inf".into()
    } else {
        format!("{tau}")
    }
}

/// Header-first CSV file, flushed after every row.
pub(crate) struct CsvFile {
    out: BufWriter<File>,
}

impl CsvFile {
    pub fn create(path: &Path, header: &[String]) -> std::io::Result<Self> {
        let mut f = Self {
            out: BufWriter::new(File::create(path)?),
        };
        f.row(header)?;
        Ok(f)
    }

    pub fn row(&mut self, fields: &[String]) -> std::io::Result<()> {
        writeln!(self.out, "{}", fields.join(","))?;
        self.out.flush()
    }
}

fn counter_header() -> Vec<String> {
    [
        "hdm_primal",
        "hdm_adjoint",
        "hdm_newton_iters",
        "rom_primal",
        "rom_adjoint",
        "rom_gn_iters",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain(COST_TAUS.iter().map(|&t| format!("cost_tau_{}", tau_label(t))))
    .collect()
}

fn counter_fields(c: &Counters) -> Vec<String> {
    let model = CostModel::default();
    [
        c.hdm_primal,
        c.hdm_adjoint,
        c.hdm_newton_iters,
        c.rom_primal,
        c.rom_adjoint,
        c.rom_gn_iters,
    ]
    .iter()
    .map(|v| v.to_string())
    .chain(COST_TAUS.iter().map(|&t| format_float(model.cost(c, t))))
    .collect()
}

pub(crate) fn history_header(n_mu: usize) -> Vec<String> {
    let fixed = [
        "k",
        "delta",
        "grad_norm",
        "phi",
        "gradient_condition",
        "gradient_steps",
        "grid_size",
        "basis_size",
        "step_norm",
        "cg_iters",
        "beta",
        "m_center",
        "m_trial",
        "psi_center",
        "psi_trial",
        "rho",
        "accepted",
        "radius_update",
        "fraction_of_cauchy",
        "cauchy_fallback",
        "theta",
        "objective_threshold_1",
        "objective_threshold_2",
        "objective_condition",
        "objective_certified",
        "objective_steps",
    ];
    fixed
        .iter()
        .map(|s| s.to_string())
        .chain(counter_header())
        .chain((1..=n_mu).map(|j| format!("mu_{j}")))
        .collect()
}

pub(crate) fn history_row(r: &IterationRecord) -> Vec<String> {
    let f = format_float;
    let mut row = vec![
        r.k.to_string(),
        f(r.delta),
        f(r.grad_norm),
        f(r.phi),
        r.gradient_condition.to_string(),
        r.gradient_steps.to_string(),
        r.grid_size.to_string(),
        r.basis_size.to_string(),
    ];
    match &r.step {
        Some(s) => row.extend([
            f(s.step_norm),
            s.cg_iters.to_string(),
            f(s.beta),
            f(s.m_center),
            f(s.m_trial),
            f(s.psi_center),
            f(s.psi_trial),
            f(s.rho),
            s.accepted.to_string(),
            s.radius_update.as_str().to_string(),
            s.fraction_of_cauchy.to_string(),
            s.cauchy_fallback.to_string(),
            f(s.theta),
            f(s.objective_thresholds[0]),
            f(s.objective_thresholds[1]),
            s.objective_condition.to_string(),
            s.objective_certified.to_string(),
            s.objective_steps.to_string(),
        ]),
        None => row.extend(std::iter::repeat_n(String::new(), 18)),
    }
    row.extend(counter_fields(&r.counters));
    row.extend(r.mu.iter().map(|&v| f(v)));
    row
}

pub(crate) fn event_header() -> Vec<String> {
    [
        "iteration",
        "driver",
        "kind",
        "index",
        "node",
        "mu_slot",
        "before",
        "after",
        "threshold",
        "grid_size",
        "basis_size",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn joined<T: ToString>(values: impl IntoIterator<Item = T>) -> String {
    values.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

pub(crate) fn event_row(e: &RefinementEvent) -> Vec<String> {
    vec![
        e.iteration.to_string(),
        e.driver.as_str().to_string(),
        e.kind.as_str().to_string(),
        e.index.as_ref().map(|i| joined(i.levels())).unwrap_or_default(),
        e.node
            .as_ref()
            .map(|y| joined(y.iter().map(|&v| format_float(v))))
            .unwrap_or_default(),
        e.mu_slot.map(|s| s.to_string()).unwrap_or_default(),
        format_float(e.before),
        e.after.map(format_float).unwrap_or_default(),
        format_float(e.threshold),
        e.grid_size.to_string(),
        e.basis_size.to_string(),
    ]
}

pub(crate) fn baseline_header() -> Vec<String> {
    ["k", "value", "grad_norm", "step_norm"]
        .iter()
        .map(|s| s.to_string())
        .chain(counter_header())
        .collect()
}

pub(crate) fn baseline_row(r: &BaselineRecord) -> Vec<String> {
    let mut row = vec![
        r.k.to_string(),
        format_float(r.value),
        format_float(r.grad_norm),
        format_float(r.step_norm),
    ];
    row.extend(counter_fields(&r.counters));
    row
}
