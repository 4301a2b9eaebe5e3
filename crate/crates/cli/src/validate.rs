use std::collections::BTreeMap;
use std::fs;

use log::warn;
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sgrom_core::hdm::{adjoint_gradient, solve_adjoint, solve_primal, ModelProblem};
use sgrom_core::oracle::{fd_gradient, validate_bounds, BoundReport};
use sgrom_core::rom::{solve_rom_adjoint, solve_rom_primal, ReducedBasis, SnapshotKind};
use sgrom_core::sparse_grid::{cc_node_count, cc_rule, MultiIndexSet, NodeKey, SparseQuadrature};
use sgrom_core::trust_opt::tr_init;

use crate::report::{format_float, CsvFile};
use crate::{with_pool, CliError, RunConfig};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationReport {
    pub seed: u64,
    pub suites: Vec<SuiteResult>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }
}

fn suite(name: &str, f: impl FnOnce() -> Result<(bool, String), String>) -> SuiteResult {
    let (passed, detail) = f().unwrap_or_else(|e| (false, e));
    SuiteResult {
        name: name.into(),
        passed,
        detail,
    }
}

fn draws(n_y: usize, n_mu: usize, n: usize, seed: u64) -> Vec<(Vec<f64>, DVector<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let y = (0..n_y).map(|_| rng.random_range(-1.0..=1.0)).collect();
            let mu = DVector::from_fn(n_mu, |_, _| rng.random_range(-1.0..=1.0));
            (y, mu)
        })
        .collect()
}

/// Combination-technique weights against direct tensor rules on every
/// rectangle up to `{1..4}²`, and polynomial moments of isotropic rules.
fn quadrature_suite() -> Result<(bool, String), String> {
    let mut worst_weight: f64 = 0.0;
    for a in 1..=4u32 {
        for b in 1..=4u32 {
            let q = SparseQuadrature::assemble(&MultiIndexSet::rectangular(&[a, b]).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
            let (ra, rb) = (
                cc_rule(a).map_err(|e| e.to_string())?,
                cc_rule(b).map_err(|e| e.to_string())?,
            );
            let mut direct = BTreeMap::new();
            for (x, wx) in ra.nodes.iter().zip(&ra.weights) {
                for (y, wy) in rb.nodes.iter().zip(&rb.weights) {
                    let key = NodeKey::from_coords(&[*x, *y]).ok_or("node off the grid")?;
                    direct.insert(key, wx * wy);
                }
            }
            for (key, p) in q.iter() {
                let w = direct.get(key).copied().unwrap_or(0.0);
                worst_weight = worst_weight.max((p.weight - w).abs());
            }
            for (key, w) in &direct {
                if !q.contains(key) {
                    worst_weight = worst_weight.max(w.abs());
                }
            }
        }
    }
    let moment = |k: u32| if k % 2 == 1 { 0.0 } else { 1.0 / (k as f64 + 1.0) };
    let mut worst_moment: f64 = 0.0;
    for level in 1..=5u32 {
        let q = SparseQuadrature::tensor(&[level, level]).map_err(|e| e.to_string())?;
        let m = cc_node_count(level) as u32;
        let degree = if m % 2 == 1 { m } else { m - 1 };
        for a in 0..=degree {
            for b in 0..=degree {
                let v: f64 = q
                    .iter()
                    .map(|(_, p)| p.weight * p.coords[0].powi(a as i32) * p.coords[1].powi(b as i32))
                    .sum();
                worst_moment = worst_moment.max((v - moment(a) * moment(b)).abs());
            }
        }
    }
    Ok((
        worst_weight <= 1e-12 && worst_moment <= 1e-10,
        format!(
            "max weight error {}, max moment error {}",
            format_float(worst_weight),
            format_float(worst_moment)
        ),
    ))
}

fn fd_suite<P: ModelProblem + ?Sized>(problem: &P, config: &RunConfig) -> Result<(bool, String), String> {
    let newton = config.newton_options();
    let tol = config.fd_tol();
    let mut worst: f64 = 0.0;
    for (y, mu) in draws(problem.n_y(), problem.n_mu(), config.validate.fd_samples, config.seed) {
        let u = solve_primal(problem, &y, &mu, None, &newton)
            .map_err(|e| e.to_string())?
            .u;
        let lambda = solve_adjoint(problem, &u, &y, &mu).map_err(|e| e.to_string())?.lambda;
        let g = adjoint_gradient(problem, &lambda, &u, &y, &mu).map_err(|e| e.to_string())?;
        let fd = fd_gradient(problem, &y, &mu, config.validate.fd_step, &newton).map_err(|e| e.to_string())?;
        worst = worst.max((&g - &fd).norm() / fd.norm().max(f64::MIN_POSITIVE));
    }
    Ok((
        worst <= tol,
        format!(
            "max relative error {} over {} samples (tolerance {})",
            format_float(worst),
            config.validate.fd_samples,
            format_float(tol)
        ),
    ))
}

/// Interpolation of appended snapshots and monotone primal residuals as the
/// basis grows, from a basis holding the state at `y = 0`, `μ0`.
fn rom_suite<P: ModelProblem + ?Sized>(problem: &P, config: &RunConfig) -> Result<(bool, String), String> {
    let newton = config.newton_options();
    let rom = config.rom_options();
    let err = |e: &dyn std::fmt::Display| e.to_string();
    let y0 = vec![0.0; problem.n_y()];
    let mu0 = DVector::from_vec(config.mu0());
    let u0 = solve_primal(problem, &y0, &mu0, None, &newton).map_err(|e| err(&e))?.u;
    let mut seed_basis = ReducedBasis::new(problem.n_u());
    seed_basis.append(&u0, &y0, &mu0, SnapshotKind::Primal);

    let nodes = draws(
        problem.n_y(),
        problem.n_mu(),
        config.validate.rom_nodes,
        config.seed.wrapping_add(1),
    );
    let mut worst_interp: f64 = 0.0;
    for (y, mu) in &nodes {
        let mut basis = seed_basis.clone();
        let u = solve_primal(problem, y, mu, None, &newton).map_err(|e| err(&e))?.u;
        let lambda = solve_adjoint(problem, &u, y, mu).map_err(|e| err(&e))?.lambda;
        basis.append(&u, y, mu, SnapshotKind::Primal);
        basis.append(&lambda, y, mu, SnapshotKind::Adjoint);
        let r0 = problem.residual(&DVector::zeros(problem.n_u()), y, mu).norm();
        let rp = solve_rom_primal(problem, &basis, y, mu, None, &rom).map_err(|e| err(&e))?;
        let ra = solve_rom_adjoint(problem, &basis, &rp.q, y, mu, &rom).map_err(|e| err(&e))?;
        let b = problem.qoi_du(&basis.reconstruct(&rp.q), y, mu).norm();
        worst_interp = worst_interp.max(rp.residual_norm / r0.max(f64::MIN_POSITIVE));
        worst_interp = worst_interp.max(ra.residual_norm / b.max(f64::MIN_POSITIVE));
    }

    let mut basis = seed_basis;
    let mut last = Vec::new();
    let mut warm = Vec::new();
    for (y, mu) in &nodes {
        let s = solve_rom_primal(problem, &basis, y, mu, None, &rom).map_err(|e| err(&e))?;
        last.push(s.residual_norm);
        warm.push(s.q);
    }
    let mut worst_increase = f64::NEG_INFINITY;
    let appends = draws(
        problem.n_y(),
        problem.n_mu(),
        config.validate.rom_appends,
        config.seed.wrapping_add(2),
    );
    for (y, mu) in &appends {
        let u = solve_primal(problem, y, mu, None, &newton).map_err(|e| err(&e))?.u;
        basis.append(&u, y, mu, SnapshotKind::Primal);
        for (j, (yn, mun)) in nodes.iter().enumerate() {
            let old = warm[j].len();
            let q0 = warm[j].clone().insert_rows(old, basis.dim() - old, 0.0);
            let s = solve_rom_primal(problem, &basis, yn, mun, Some(&q0), &rom).map_err(|e| err(&e))?;
            worst_increase = worst_increase.max(s.residual_norm - last[j]);
            last[j] = s.residual_norm;
            warm[j] = s.q;
        }
    }
    let worst_increase = worst_increase.max(0.0);
    Ok((
        worst_interp <= 1e-8 && worst_increase <= 1e-12,
        format!(
            "max relative residual after append {}, max residual increase {}",
            format_float(worst_interp),
            format_float(worst_increase)
        ),
    ))
}

fn write_bounds(report: &BoundReport, config: &RunConfig) -> std::io::Result<()> {
    let n_y = report.samples.first().map_or(0, |s| s.y.len());
    let n_mu = report.samples.first().map_or(0, |s| s.mu.len());
    let mut header = vec!["id".to_string()];
    header.extend((1..=n_y).map(|j| format!("y_{j}")));
    header.extend((1..=n_mu).map(|j| format!("mu_{j}")));
    header.extend(
        [
            "residual",
            "adjoint_residual",
            "qoi_error",
            "gradient_error",
            "qoi_ratio",
            "gradient_ratio",
            "excluded",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    let mut csv = CsvFile::create(&config.out.join("bounds.csv"), &header)?;
    for s in &report.samples {
        let mut row = vec![s.id.to_string()];
        row.extend(s.y.iter().chain(&s.mu).map(|&v| format_float(v)));
        let ratios = if s.excluded {
            [String::new(), String::new()]
        } else {
            [
                format_float(s.qoi_error / s.residual),
                format_float(s.gradient_error / (s.residual + s.adjoint_residual)),
            ]
        };
        row.extend([
            format_float(s.residual),
            format_float(s.adjoint_residual),
            format_float(s.qoi_error),
            format_float(s.gradient_error),
        ]);
        row.extend(ratios);
        row.push(s.excluded.to_string());
        csv.row(&row)?;
    }
    Ok(())
}

/// Bound ratios for the trust-region seed basis at `μ0`. Boundedness is
/// reported; the suite only requires finite ratios.
fn bound_suite<P: ModelProblem + ?Sized>(problem: &P, config: &RunConfig) -> Result<(bool, String), String> {
    let n = config.validate.bound_samples;
    if n == 0 {
        warn!("bound validation requested with zero samples; nothing to check");
        return Ok((true, "no samples (vacuous)".into()));
    }
    let opts = config.adapt_options();
    let mu0 = DVector::from_vec(config.mu0());
    let state = tr_init(problem, &config.trust_region, &opts, &mu0).map_err(|e| e.to_string())?;
    let report = validate_bounds(problem, state.pair.basis(), n, config.seed, &opts.rom, &opts.newton)
        .map_err(|e| e.to_string())?;
    write_bounds(&report, config).map_err(|e| e.to_string())?;
    let finite = report
        .qoi
        .ratios
        .iter()
        .chain(&report.gradient.ratios)
        .all(|r| r.is_finite() && *r >= 0.0);
    let f = format_float;
    Ok((
        finite,
        format!(
            "basis {} vectors, {} samples, {} excluded; qoi max {} median {}; gradient max {} median {}",
            state.pair.basis().dim(),
            n,
            report.excluded,
            f(report.qoi.max_ratio),
            f(report.qoi.median_ratio),
            f(report.gradient.max_ratio),
            f(report.gradient.median_ratio)
        ),
    ))
}

/// All validation suites on `problem`, writing `bounds.csv` and
/// `validation.toml` into `config.out`.
pub fn validate_problem<P: ModelProblem + ?Sized>(
    problem: &P,
    config: &RunConfig,
) -> Result<ValidationReport, CliError> {
    fs::create_dir_all(&config.out)?;
    let suites = vec![
        suite("quadrature", quadrature_suite),
        suite("fd-gradient", || fd_suite(problem, config)),
        suite("rom-properties", || rom_suite(problem, config)),
        suite("bounds", || bound_suite(problem, config)),
    ];
    let report = ValidationReport {
        seed: config.seed,
        suites,
    };
    let text = toml::to_string(&report).map_err(|e| CliError::Solver(format!("summary: {e}")))?;
    fs::write(config.out.join("validation.toml"), text)?;
    Ok(report)
}

pub fn run_validate(config: &RunConfig) -> Result<ValidationReport, CliError> {
    fs::create_dir_all(&config.out)?;
    fs::write(config.out.join("config.echo"), config.to_toml())?;
    let problem = config.problem.build()?;
    with_pool(config.threads, || validate_problem(problem.as_ref(), config))?
}
