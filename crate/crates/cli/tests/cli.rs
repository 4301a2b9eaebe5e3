use std::fs;
use std::path::Path;
use std::process::{Command, Stdio};

use nalgebra::{DMatrix, DVector};
use sgrom_cli::{run_compare, run_optimize, validate_problem, Method, ProblemConfig, RunConfig};
use sgrom_core::hdm::{BurgersControl, BurgersParams, ModelProblem};

fn small_burgers() -> BurgersParams {
    BurgersParams {
        n_u: 63,
        reference_level: 3,
        ..BurgersParams::default()
    }
}

fn config(out: &Path) -> RunConfig {
    RunConfig {
        problem: ProblemConfig::BurgersControl(small_burgers()),
        out: out.to_path_buf(),
        ..RunConfig::default()
    }
}

fn csv(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn optimize_writes_consistent_reports() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_optimize(&config(dir.path())).unwrap();
    assert_eq!(report.status, "converged");
    assert!(report.accepted_steps >= 1);

    let rows = csv(&dir.path().join("history.csv"));
    let header = &rows[0];
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let ks: Vec<usize> = rows[1..].iter().map(|r| r[col("k")].parse().unwrap()).collect();
    assert!(ks.windows(2).all(|w| w[1] == w[0] + 1));
    assert_eq!(ks.len(), report.iterations);
    for name in ["hdm_primal", "hdm_adjoint", "rom_primal", "rom_adjoint"] {
        let c: Vec<u64> = rows[1..].iter().map(|r| r[col(name)].parse().unwrap()).collect();
        assert!(c.windows(2).all(|w| w[1] >= w[0]), "{name} not monotone");
        assert_eq!(
            *c.last().unwrap(),
            match name {
                "hdm_primal" => report.counters.hdm_primal,
                "hdm_adjoint" => report.counters.hdm_adjoint,
                "rom_primal" => report.counters.rom_primal,
                _ => report.counters.rom_adjoint,
            }
        );
    }
    assert!(rows.iter().all(|r| r.len() == header.len()));

    let events = csv(&dir.path().join("events.csv"));
    assert_eq!(events.len() - 1, report.events);
    for k in &ks {
        assert!(dir.path().join(format!("grids/iter_{k}.txt")).exists());
    }
    let echo = fs::read_to_string(dir.path().join("config.echo")).unwrap();
    assert_eq!(RunConfig::from_toml(&echo).unwrap(), config(dir.path()));
}

#[test]
fn identical_configs_give_identical_histories() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut ca = config(a.path());
    ca.threads = 1;
    let mut cb = config(b.path());
    cb.threads = 4;
    run_optimize(&ca).unwrap();
    run_optimize(&cb).unwrap();
    for f in ["history.csv", "events.csv"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn compare_reports_both_methods() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_compare(&config(dir.path())).unwrap();
    let base = &report.baseline;
    assert_eq!(base.counters.rom_primal + base.counters.rom_adjoint, 0);
    assert!(base.costs.windows(2).all(|w| w[0].cost == w[1].cost));
    assert!(report.trust_region.counters.hdm_primal > 0 && base.counters.hdm_primal > 0);
    let rows = csv(&dir.path().join("compare.csv"));
    assert!(rows[1..].iter().any(|r| r[0] == "sg-rom-tr"));
    assert!(rows[1..].iter().any(|r| r[0] == "sg-iso"));
    assert!(dir.path().join("baseline.csv").exists() && dir.path().join("compare.toml").exists());
}

#[test]
fn baseline_method_makes_no_reduced_queries() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(dir.path());
    c.method = Method::SgIso;
    let report = run_optimize(&c).unwrap();
    assert_eq!(report.counters.rom_primal + report.counters.rom_adjoint, 0);
    assert_eq!(report.events, 0);
    assert!(report.costs.windows(2).all(|w| w[0].cost == w[1].cost));
    let rows = csv(&dir.path().join("history.csv"));
    assert_eq!(rows.len() - 1, report.iterations);
    assert!(dir
        .path()
        .join(format!("grids/iter_{}.txt", report.iterations - 1))
        .exists());
}

#[test]
fn zero_bound_samples_pass_vacuously() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(dir.path());
    c.validate.bound_samples = 0;
    let p = BurgersControl::new(small_burgers()).unwrap();
    let report = validate_problem(&p, &c).unwrap();
    let bounds = report.suites.iter().find(|s| s.name == "bounds").unwrap();
    assert!(bounds.passed && bounds.detail.contains("vacuous"));
    assert!(report.passed());
}

/// Burgers with a perturbed parameter Jacobian: adjoint gradients go wrong
/// while the state equation is unchanged.
struct CorruptedJacobian(BurgersControl);

impl ModelProblem for CorruptedJacobian {
    fn name(&self) -> &str {
        "corrupted"
    }
    fn n_u(&self) -> usize {
        self.0.n_u()
    }
    fn n_y(&self) -> usize {
        self.0.n_y()
    }
    fn n_mu(&self) -> usize {
        self.0.n_mu()
    }
    fn residual(&self, u: &DVector<f64>, y: &[f64], mu: &DVector<f64>) -> DVector<f64> {
        self.0.residual(u, y, mu)
    }
    fn jacobian_u(&self, u: &DVector<f64>, y: &[f64], mu: &DVector<f64>) -> DMatrix<f64> {
        self.0.jacobian_u(u, y, mu)
    }
    fn jacobian_mu(&self, u: &DVector<f64>, y: &[f64], mu: &DVector<f64>) -> DMatrix<f64> {
        self.0.jacobian_mu(u, y, mu) * 1.01
    }
    fn qoi(&self, u: &DVector<f64>, y: &[f64], mu: &DVector<f64>) -> f64 {
        self.0.qoi(u, y, mu)
    }
    fn qoi_du(&self, u: &DVector<f64>, y: &[f64], mu: &DVector<f64>) -> DVector<f64> {
        self.0.qoi_du(u, y, mu)
    }
    fn qoi_dmu(&self, u: &DVector<f64>, y: &[f64], mu: &DVector<f64>) -> DVector<f64> {
        self.0.qoi_dmu(u, y, mu)
    }
}

#[test]
fn corrupted_jacobian_fails_the_fd_suite() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(dir.path());
    c.validate.bound_samples = 5;
    let p = CorruptedJacobian(BurgersControl::new(small_burgers()).unwrap());
    let report = validate_problem(&p, &c).unwrap();
    let fd = report.suites.iter().find(|s| s.name == "fd-gradient").unwrap();
    assert!(!fd.passed, "{}", fd.detail);
    assert!(!report.passed());
}

fn sgrom(args: &[&str], config_text: &str, dir: &Path) -> i32 {
    let path = dir.join("run.toml");
    fs::write(&path, config_text).unwrap();
    let out = dir.join("out");
    Command::new(env!("CARGO_BIN_EXE_sgrom"))
        .args(args)
        .args(["--config", path.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .env("RUST_LOG", "off")
        .stdout(Stdio::null())
        .status()
        .unwrap()
        .code()
        .unwrap()
}

#[test]
fn exit_codes_follow_the_outcome() {
    let dir = tempfile::tempdir().unwrap();
    let small = "[problem]\nname = \"linear-diffusion\"\nn_u = 31\n";
    assert_eq!(sgrom(&["optimize"], small, dir.path()), 0);
    let capped = format!("{small}[trust_region]\nmax_iters = 1\ngtol = 1e-14\n");
    assert_eq!(sgrom(&["optimize"], &capped, dir.path()), 2);
    assert_eq!(sgrom(&["optimize"], "unknown_key = 3\n", dir.path()), 4);
    assert_eq!(sgrom(&["optimize"], "[trust_region]\ngamma = 2.0\n", dir.path()), 4);
    let starved = format!("{small}[newton]\nmax_iters = 1\nptc_max_iters = 0\ntol_abs = 0.0\ntol_rel = 0.0\n");
    assert_eq!(sgrom(&["optimize"], &starved, dir.path()), 3);
    assert!(dir.path().join("out/failure.txt").exists());
}
