//! Verification machinery independent of the adaptive method: finite
//! difference gradients, tensor-grid reference quadrature, the fixed-grid
//! BFGS baseline, empirical residual-bound ratios and the query cost model.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::adapt::Counters;
use crate::hdm::{
    adjoint_gradient, reduced_objective, solve_adjoint, solve_primal, HdmError, ModelProblem, NewtonOptions,
};
use crate::rom::{evaluate_rom, ReducedBasis, RomError, RomOptions};
use crate::sparse_grid::{SparseGridError, SparseQuadrature};

pub const MAX_REFERENCE_LEVEL: u32 = 6;
pub const MAX_REFERENCE_DIM: usize = 3;
/// Samples with a reduced residual below this are excluded from bound ratios.
pub const DEGENERATE_RESIDUAL: f64 = 1e-14;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("invalid oracle input: {0}")]
    Input(String),
    #[error(transparent)]
    SparseGrid(#[from] SparseGridError),
    #[error("full-order solve failed at y = {y:?}: {source}")]
    Hdm {
        y: Vec<f64>,
        #[source]
        source: HdmError,
    },
    #[error("reduced solve failed at y = {y:?}: {source}")]
    Rom {
        y: Vec<f64>,
        #[source]
        source: RomError,
    },
}

fn hdm_err(y: &[f64]) -> impl FnOnce(HdmError) -> OracleError + '_ {
    move |source| OracleError::Hdm { y: y.to_vec(), source }
}

/// Central differences of `F(y, ·)`: `2 n_μ` primal solves.
pub fn fd_gradient<P: ModelProblem + ?Sized>(
    problem: &P,
    y: &[f64],
    mu: &DVector<f64>,
    h: f64,
    newton: &NewtonOptions,
) -> Result<DVector<f64>, OracleError> {
    if !(h > 0.0) {
        return Err(OracleError::Input(format!("step {h} must be positive")));
    }
    let mut g = DVector::zeros(mu.len());
    for j in 0..mu.len() {
        let mut plus = mu.clone();
        plus[j] += h;
        let mut minus = mu.clone();
        minus[j] -= h;
        let fp = reduced_objective(problem, y, &plus, newton).map_err(hdm_err(y))?;
        let fm = reduced_objective(problem, y, &minus, newton).map_err(hdm_err(y))?;
        g[j] = (fp - fm) / (2.0 * h);
    }
    Ok(g)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Reference {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub nodes: usize,
}

struct NodeSolve {
    value: f64,
    gradient: DVector<f64>,
    u: DVector<f64>,
    newton_iters: usize,
}

fn check_reference(n_y: usize, level: u32) -> Result<(), OracleError> {
    if level == 0 || level > MAX_REFERENCE_LEVEL {
        return Err(OracleError::Input(format!(
            "reference level {level} outside 1..={MAX_REFERENCE_LEVEL}"
        )));
    }
    if n_y > MAX_REFERENCE_DIM {
        return Err(OracleError::Input(format!(
            "tensor reference supports at most {MAX_REFERENCE_DIM} stochastic dimensions, got {n_y}"
        )));
    }
    Ok(())
}

/// Primal and adjoint solves at every node, in parallel, results in node
/// order.
fn solve_nodes<P: ModelProblem + ?Sized>(
    problem: &P,
    nodes: &[Vec<f64>],
    mu: &DVector<f64>,
    warm: Option<&[DVector<f64>]>,
    newton: &NewtonOptions,
) -> Result<Vec<NodeSolve>, OracleError> {
    nodes
        .par_iter()
        .enumerate()
        .map(|(i, y)| {
            let u0 = warm.map(|w| &w[i]);
            let sol = solve_primal(problem, y, mu, u0, newton)
                .or_else(|_| solve_primal(problem, y, mu, None, newton))
                .map_err(hdm_err(y))?;
            let value = problem.qoi(&sol.u, y, mu);
            let adj = solve_adjoint(problem, &sol.u, y, mu).map_err(hdm_err(y))?;
            let gradient = adjoint_gradient(problem, &adj.lambda, &sol.u, y, mu).map_err(hdm_err(y))?;
            Ok(NodeSolve {
                value,
                gradient,
                u: sol.u,
                newton_iters: sol.newton_iters,
            })
        })
        .collect()
}

/// Full tensor Clenshaw–Curtis quadrature of `F` and `∇_μ F`.
pub fn tensor_reference<P: ModelProblem + ?Sized>(
    problem: &P,
    mu: &DVector<f64>,
    level: u32,
    newton: &NewtonOptions,
) -> Result<Reference, OracleError> {
    check_reference(problem.n_y(), level)?;
    let quad = SparseQuadrature::tensor(&vec![level; problem.n_y()])?;
    let nodes: Vec<Vec<f64>> = quad.iter().map(|(_, p)| p.coords.clone()).collect();
    let weights: Vec<f64> = quad.iter().map(|(_, p)| p.weight).collect();
    let solves = solve_nodes(problem, &nodes, mu, None, newton)?;
    let mut value = 0.0;
    let mut gradient = DVector::zeros(problem.n_mu());
    for (s, w) in solves.iter().zip(&weights) {
        value += w * s.value;
        gradient += &s.gradient * *w;
    }
    Ok(Reference {
        value,
        gradient: gradient.iter().copied().collect(),
        nodes: nodes.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineStatus {
    Converged,
    MaxIterations,
    LineSearchFailed,
}

impl BaselineStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            BaselineStatus::Converged => "converged",
            BaselineStatus::MaxIterations => "max-iterations",
            BaselineStatus::LineSearchFailed => "line-search-failed",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BaselineRecord {
    pub k: usize,
    pub value: f64,
    pub grad_norm: f64,
    pub step_norm: f64,
    pub counters: Counters,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BaselineOutcome {
    pub mu: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub status: BaselineStatus,
    pub nodes: usize,
    pub counters: Counters,
    pub history: Vec<BaselineRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaselineOptions {
    pub level: u32,
    pub max_iters: usize,
    pub gtol: f64,
    pub armijo: f64,
    pub max_backtracks: usize,
}

impl Default for BaselineOptions {
    fn default() -> Self {
        Self {
            level: 4,
            max_iters: 200,
            gtol: 1e-6,
            armijo: 1e-4,
            max_backtracks: 30,
        }
    }
}

/// BFGS with backtracking on the full tensor-grid objective, full-order solves
/// only. Newton solves are warm-started from the last accepted states.
pub fn sg_iso_baseline<P: ModelProblem + ?Sized>(
    problem: &P,
    mu0: &DVector<f64>,
    opts: &BaselineOptions,
    newton: &NewtonOptions,
) -> Result<BaselineOutcome, OracleError> {
    check_reference(problem.n_y(), opts.level)?;
    if mu0.len() != problem.n_mu() || mu0.iter().any(|v| !v.is_finite()) {
        return Err(OracleError::Input(format!(
            "mu0 must be finite with length {}",
            problem.n_mu()
        )));
    }
    let quad = SparseQuadrature::tensor(&vec![opts.level; problem.n_y()])?;
    let nodes: Vec<Vec<f64>> = quad.iter().map(|(_, p)| p.coords.clone()).collect();
    let weights: Vec<f64> = quad.iter().map(|(_, p)| p.weight).collect();
    let mut counters = Counters::default();

    let evaluate = |mu: &DVector<f64>, warm: Option<&[DVector<f64>]>, counters: &mut Counters| {
        let solves = solve_nodes(problem, &nodes, mu, warm, newton)?;
        counters.hdm_primal += solves.len() as u64;
        counters.hdm_adjoint += solves.len() as u64;
        counters.hdm_newton_iters += solves.iter().map(|s| s.newton_iters as u64).sum::<u64>();
        let value: f64 = solves.iter().zip(&weights).map(|(s, w)| w * s.value).sum();
        let mut g = DVector::zeros(mu.len());
        for (s, w) in solves.iter().zip(&weights) {
            g += &s.gradient * *w;
        }
        let states: Vec<DVector<f64>> = solves.into_iter().map(|s| s.u).collect();
        Ok::<_, OracleError>((value, g, states))
    };

    let mut mu = mu0.clone();
    let (mut value, mut g, mut states) = evaluate(&mu, None, &mut counters)?;
    let mut history = vec![BaselineRecord {
        k: 0,
        value,
        grad_norm: g.norm(),
        step_norm: 0.0,
        counters,
    }];
    let n = mu.len();
    let mut hinv = nalgebra::DMatrix::<f64>::identity(n, n);
    let mut first = true;
    let mut status = BaselineStatus::MaxIterations;
    for k in 1..=opts.max_iters {
        if g.norm() <= opts.gtol {
            status = BaselineStatus::Converged;
            break;
        }
        let mut d = -(&hinv * &g);
        if g.dot(&d) >= 0.0 {
            hinv = nalgebra::DMatrix::identity(n, n);
            d = -g.clone();
        }
        let slope = g.dot(&d);
        let mut t = 1.0;
        // trial gradients come with the trial values so accepted points need
        // no second primal sweep
        let mut accepted = None;
        for _ in 0..=opts.max_backtracks {
            let trial = &mu + &d * t;
            let (v, gt, st) = evaluate(&trial, Some(&states), &mut counters)?;
            if v.is_finite() && v <= value + opts.armijo * t * slope {
                accepted = Some((trial, v, gt, st));
                break;
            }
            t *= 0.5;
        }
        let Some((next, v, g_next, s_next)) = accepted else {
            status = BaselineStatus::LineSearchFailed;
            break;
        };
        let s = &next - &mu;
        let yv = &g_next - &g;
        let sy = s.dot(&yv);
        if sy > f64::EPSILON * s.norm() * yv.norm() {
            if first {
                hinv *= sy / yv.norm_squared();
                first = false;
            }
            let rho = 1.0 / sy;
            let hy = &hinv * &yv;
            let yhy = yv.dot(&hy);
            hinv += (&s * s.transpose()) * (rho * rho * yhy + rho) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        mu = next;
        value = v;
        g = g_next;
        states = s_next;
        history.push(BaselineRecord {
            k,
            value,
            grad_norm: g.norm(),
            step_norm: s.norm(),
            counters,
        });
    }
    if status == BaselineStatus::MaxIterations && g.norm() <= opts.gtol {
        status = BaselineStatus::Converged;
    }
    Ok(BaselineOutcome {
        mu: mu.iter().copied().collect(),
        value,
        grad_norm: g.norm(),
        status,
        nodes: nodes.len(),
        counters,
        history,
    })
}

/// Empirical bound constants from one family of ratios.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundEstimate {
    pub ratios: Vec<f64>,
    pub max_ratio: f64,
    pub median_ratio: f64,
    pub n_samples: usize,
}

impl BoundEstimate {
    pub fn from_ratios(ratios: Vec<f64>) -> Self {
        let mut sorted = ratios.clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median_ratio = match n {
            0 => f64::NAN,
            _ if n % 2 == 1 => sorted[n / 2],
            _ => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
        };
        Self {
            max_ratio: sorted.last().copied().unwrap_or(f64::NAN),
            median_ratio,
            n_samples: n,
            ratios,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.n_samples == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundSample {
    pub id: usize,
    pub y: Vec<f64>,
    pub mu: Vec<f64>,
    pub residual: f64,
    pub adjoint_residual: f64,
    pub qoi_error: f64,
    pub gradient_error: f64,
    pub excluded: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundReport {
    pub seed: u64,
    pub samples: Vec<BoundSample>,
    /// `|F − F_r| / ‖r(Φq)‖`.
    pub qoi: BoundEstimate,
    /// `‖∇_μF − ĝ‖ / (‖r‖ + ‖r^λ‖)`.
    pub gradient: BoundEstimate,
    pub excluded: usize,
}

/// Draws `y ~ U[-1, 1]^{n_y}`, `μ ~ U[-1, 1]^{n_μ}` and compares full-order and
/// reduced QoI and gradient against the reduced residual norms.
pub fn validate_bounds<P: ModelProblem + ?Sized>(
    problem: &P,
    basis: &ReducedBasis,
    n_samples: usize,
    seed: u64,
    rom: &RomOptions,
    newton: &NewtonOptions,
) -> Result<BoundReport, OracleError> {
    if basis.is_empty() {
        return Err(OracleError::Input("basis is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<(Vec<f64>, DVector<f64>)> = (0..n_samples)
        .map(|_| {
            let y: Vec<f64> = (0..problem.n_y()).map(|_| rng.random_range(-1.0..=1.0)).collect();
            let mu = DVector::from_fn(problem.n_mu(), |_, _| rng.random_range(-1.0..=1.0));
            (y, mu)
        })
        .collect();
    let samples: Vec<BoundSample> = draws
        .par_iter()
        .enumerate()
        .map(|(id, (y, mu))| {
            let sol = solve_primal(problem, y, mu, None, newton).map_err(hdm_err(y))?;
            let adj = solve_adjoint(problem, &sol.u, y, mu).map_err(hdm_err(y))?;
            let grad = adjoint_gradient(problem, &adj.lambda, &sol.u, y, mu).map_err(hdm_err(y))?;
            let value = problem.qoi(&sol.u, y, mu);
            let red = evaluate_rom(problem, basis, y, mu, None, rom)
                .map_err(|source| OracleError::Rom { y: y.clone(), source })?;
            let residual = red.primal.residual_norm;
            Ok(BoundSample {
                id,
                y: y.clone(),
                mu: mu.iter().copied().collect(),
                residual,
                adjoint_residual: red.adjoint.residual_norm,
                qoi_error: (value - red.qoi).abs(),
                gradient_error: (grad - &red.gradient).norm(),
                excluded: residual < DEGENERATE_RESIDUAL,
            })
        })
        .collect::<Result<_, OracleError>>()?;
    let kept = || samples.iter().filter(|s| !s.excluded);
    let qoi = BoundEstimate::from_ratios(kept().map(|s| s.qoi_error / s.residual).collect());
    let gradient = BoundEstimate::from_ratios(
        kept()
            .map(|s| s.gradient_error / (s.residual + s.adjoint_residual))
            .collect(),
    );
    Ok(BoundReport {
        seed,
        excluded: samples.iter().filter(|s| s.excluded).count(),
        samples,
        qoi,
        gradient,
    })
}

/// Per-query cost weights: a primal full-order solve costs one unit, a linear
/// solve `1/n̄_h` of it, and reduced queries are `τ` times cheaper.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CostModel {
    pub nbar_h: f64,
    pub nbar_r: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            nbar_h: 5.0,
            nbar_r: 5.0,
        }
    }
}

impl CostModel {
    /// `n_hp + n_ha/n̄_h + (n_rp + n_ra/n̄_r)/τ`; `τ = ∞` drops the reduced term.
    pub fn cost(&self, counters: &Counters, tau: f64) -> f64 {
        let hdm = counters.hdm_primal as f64 + counters.hdm_adjoint as f64 / self.nbar_h;
        if tau.is_infinite() {
            return hdm;
        }
        hdm + (counters.rom_primal as f64 + counters.rom_adjoint as f64 / self.nbar_r) / tau
    }
}

/// Cost with the default `n̄_h = n̄_r = 5`.
pub fn cost_metric(counters: &Counters, tau: f64) -> f64 {
    CostModel::default().cost(counters, tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hdm::LinearDiffusion;

    #[test]
    fn cost_of_full_order_queries() {
        let c = Counters {
            hdm_primal: 10,
            hdm_adjoint: 10,
            ..Counters::default()
        };
        assert_eq!(cost_metric(&c, 1.0), 12.0);
        assert_eq!(cost_metric(&c, f64::INFINITY), 12.0);
        let r = Counters {
            rom_primal: 10,
            rom_adjoint: 5,
            ..c
        };
        assert_eq!(cost_metric(&r, 11.0), 13.0);
        assert_eq!(cost_metric(&r, f64::INFINITY), 12.0);
    }

    #[test]
    fn median_of_even_and_odd() {
        let e = BoundEstimate::from_ratios(vec![3.0, 1.0, 2.0]);
        assert_eq!((e.median_ratio, e.max_ratio), (2.0, 3.0));
        let e = BoundEstimate::from_ratios(vec![4.0, 1.0, 2.0, 3.0]);
        assert_eq!(e.median_ratio, 2.5);
        assert!(BoundEstimate::from_ratios(vec![]).is_empty());
    }

    #[test]
    fn level_one_reference_is_the_origin() {
        let p = LinearDiffusion::new(Default::default());
        let mu = DVector::from_element(8, 0.3);
        let r = tensor_reference(&p, &mu, 1, &NewtonOptions::default()).unwrap();
        let f = reduced_objective(&p, &[0.0, 0.0], &mu, &NewtonOptions::default()).unwrap();
        assert_eq!(r.nodes, 1);
        assert!((r.value - f).abs() <= 1e-15 * f.abs());
    }

    #[test]
    fn reference_rejects_large_levels() {
        let p = LinearDiffusion::new(Default::default());
        assert!(tensor_reference(&p, &DVector::zeros(8), 7, &NewtonOptions::default()).is_err());
    }

    #[test]
    fn fd_rejects_nonpositive_step() {
        let p = LinearDiffusion::new(Default::default());
        assert!(fd_gradient(&p, &[0.0, 0.0], &DVector::zeros(8), 0.0, &NewtonOptions::default()).is_err());
    }
}
