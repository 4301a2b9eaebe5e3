//! Reduced bases and minimum-residual primal/adjoint reduced-order models.
//!
//! The primal ROM minimizes `½‖r(Φq, y, μ)‖²_Θ` over `q` by Gauss–Newton. The
//! adjoint ROM minimizes `‖(∂r/∂u)ᵀ Φ η - (∂f/∂u)ᵀ‖_Θ` at the reconstructed
//! primal state. Both share the trial basis `Φ`.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::hdm::{adjoint_gradient_unchecked, adjoint_residual_unchecked, ModelProblem};

#[derive(Debug, Error)]
pub enum RomError {
    #[error("reduced basis is empty")]
    EmptyBasis,
    #[error("{what} has length {got}, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("Gauss-Newton did not converge after {iters} iterations (stationarity {stationarity:e}, residual {residual_norm:e})")]
    NotConverged {
        iters: usize,
        stationarity: f64,
        residual_norm: f64,
    },
    #[error("rank-deficient reduced {0} operator")]
    RankDeficient(&'static str),
    #[error("non-finite value in reduced {0} solve")]
    NonFinite(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SnapshotKind {
    Primal,
    Adjoint,
    Sensitivity,
}

impl SnapshotKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SnapshotKind::Primal => "primal",
            SnapshotKind::Adjoint => "adjoint",
            SnapshotKind::Sensitivity => "sensitivity",
        }
    }
}

/// Where a snapshot came from and whether it enlarged the basis.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Provenance {
    pub y: Vec<f64>,
    pub mu: Vec<f64>,
    pub kind: SnapshotKind,
    pub appended: bool,
}

/// Exact identity of a sampled `(y, μ)` point.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PointKey {
    y: Vec<u64>,
    mu: Vec<u64>,
}

impl PointKey {
    pub fn new(y: &[f64], mu: &DVector<f64>) -> Self {
        Self {
            y: y.iter().map(|v| v.to_bits()).collect(),
            mu: mu.iter().map(|v| v.to_bits()).collect(),
        }
    }
}

/// Orthonormal trial basis `Φ` with snapshot provenance.
#[derive(Clone, Debug)]
pub struct ReducedBasis {
    columns: DMatrix<f64>,
    provenance: Vec<Provenance>,
    sampled: BTreeSet<PointKey>,
    drop_tol: f64,
    version: u64,
}

impl ReducedBasis {
    pub const DEFAULT_DROP_TOL: f64 = 1e-10;

    pub fn new(n_u: usize) -> Self {
        Self {
            columns: DMatrix::zeros(n_u, 0),
            provenance: Vec::new(),
            sampled: BTreeSet::new(),
            drop_tol: Self::DEFAULT_DROP_TOL,
            version: 0,
        }
    }

    pub fn with_drop_tol(mut self, drop_tol: f64) -> Self {
        self.drop_tol = drop_tol;
        self
    }

    pub fn n_u(&self) -> usize {
        self.columns.nrows()
    }

    /// Number of columns `k`.
    pub fn dim(&self) -> usize {
        self.columns.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.dim() == 0
    }

    pub fn columns(&self) -> &DMatrix<f64> {
        &self.columns
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    /// Incremented whenever a column is appended.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn mark_sampled(&mut self, y: &[f64], mu: &DVector<f64>) {
        self.sampled.insert(PointKey::new(y, mu));
    }

    pub fn is_sampled(&self, y: &[f64], mu: &DVector<f64>) -> bool {
        self.sampled.contains(&PointKey::new(y, mu))
    }

    pub fn n_sampled(&self) -> usize {
        self.sampled.len()
    }

    /// Orthogonalizes `v` against the basis (twice) and appends the normalized
    /// remainder unless it is numerically dependent. Returns whether a column
    /// was added.
    pub fn append(&mut self, v: &DVector<f64>, y: &[f64], mu: &DVector<f64>, kind: SnapshotKind) -> bool {
        assert_eq!(v.len(), self.n_u(), "snapshot length");
        let norm0 = v.norm();
        let mut appended = false;
        if norm0 > 0.0 && norm0.is_finite() && self.dim() < self.n_u() {
            let mut w = v.clone();
            for _ in 0..2 {
                if self.dim() > 0 {
                    let c = self.columns.tr_mul(&w);
                    w -= &self.columns * c;
                }
            }
            let norm = w.norm();
            if norm > self.drop_tol * norm0 {
                let k = self.dim();
                let cols = std::mem::replace(&mut self.columns, DMatrix::zeros(0, 0));
                self.columns = cols.insert_column(k, 0.0);
                self.columns.set_column(k, &(w / norm));
                self.version += 1;
                appended = true;
            }
        }
        self.provenance.push(Provenance {
            y: y.to_vec(),
            mu: mu.iter().copied().collect(),
            kind,
            appended,
        });
        appended
    }

    /// Appends several snapshots in order; returns the number of new columns.
    pub fn append_snapshots<'a, I>(&mut self, snapshots: I, y: &[f64], mu: &DVector<f64>) -> usize
    where
        I: IntoIterator<Item = (&'a DVector<f64>, SnapshotKind)>,
    {
        snapshots
            .into_iter()
            .filter(|(v, kind)| self.append(v, y, mu, *kind))
            .count()
    }

    pub fn reconstruct(&self, q: &DVector<f64>) -> DVector<f64> {
        &self.columns * q
    }

    /// `Φᵀ v`.
    pub fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        self.columns.tr_mul(v)
    }

    /// Largest entry of `|ΦᵀΦ - I|`.
    pub fn orthonormality_defect(&self) -> f64 {
        let g = self.columns.tr_mul(&self.columns) - DMatrix::identity(self.dim(), self.dim());
        g.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RomOptions {
    /// Relative stationarity tolerance of the Gauss–Newton iteration.
    pub stationarity_tol: f64,
    pub max_iters: usize,
    pub max_halvings: usize,
    /// Relative threshold on the diagonal of `R` below which the reduced
    /// operator is declared rank-deficient.
    pub rank_tol: f64,
    /// Diagonal of the residual weighting `Θ`; `None` is the identity.
    pub theta: Option<DVector<f64>>,
    /// Adds the second-order term `Σ r_i ∇²r_i` (by central differences) to
    /// the Gauss–Newton matrix when the result is positive definite. Plain
    /// Gauss–Newton converges only linearly when the optimal residual is large.
    pub second_order: bool,
}

impl Default for RomOptions {
    fn default() -> Self {
        Self {
            stationarity_tol: 1e-12,
            max_iters: 50,
            max_halvings: 30,
            rank_tol: 1e-13,
            theta: None,
            second_order: true,
        }
    }
}

impl RomOptions {
    fn weigh_vec(&self, mut v: DVector<f64>) -> DVector<f64> {
        if let Some(theta) = &self.theta {
            v.iter_mut().zip(theta.iter()).for_each(|(x, t)| *x *= t.sqrt());
        }
        v
    }

    fn weigh_mat(&self, mut m: DMatrix<f64>) -> DMatrix<f64> {
        if let Some(theta) = &self.theta {
            for (i, t) in theta.iter().enumerate() {
                m.row_mut(i).scale_mut(t.sqrt());
            }
        }
        m
    }
}

#[derive(Clone, Debug)]
pub struct RomPrimal {
    pub q: DVector<f64>,
    /// `‖r(Φq)‖_Θ`.
    pub residual_norm: f64,
    pub gn_iters: usize,
    /// `‖(JΦ)ᵀ Θ r‖` at the returned point.
    pub stationarity: f64,
    /// Round-off level of `‖r(Φq)‖_Θ`: residuals below this are noise.
    pub residual_floor: f64,
}

#[derive(Clone, Debug)]
pub struct RomAdjoint {
    pub eta: DVector<f64>,
    /// `‖r^λ(Φη, Φq)‖_Θ`.
    pub residual_norm: f64,
}

/// Least-squares solve `min ‖A x - b‖` by Householder QR.
fn least_squares(
    a: DMatrix<f64>,
    b: &DVector<f64>,
    rank_tol: f64,
    what: &'static str,
) -> Result<DVector<f64>, RomError> {
    let qr = a.qr();
    let r = qr.r();
    let dmax = r.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if dmax == 0.0 || r.diagonal().iter().any(|v| v.abs() <= rank_tol * dmax) {
        return Err(RomError::RankDeficient(what));
    }
    let qtb = qr.q().tr_mul(b);
    let x = r.solve_upper_triangular(&qtb).ok_or(RomError::RankDeficient(what))?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(RomError::NonFinite(what));
    }
    Ok(x)
}

fn check_point<P: ModelProblem + ?Sized>(
    problem: &P,
    basis: &ReducedBasis,
    y: &[f64],
    mu: &DVector<f64>,
) -> Result<(), RomError> {
    if basis.is_empty() {
        return Err(RomError::EmptyBasis);
    }
    let checks = [
        ("basis rows", basis.n_u(), problem.n_u()),
        ("y", y.len(), problem.n_y()),
        ("mu", mu.len(), problem.n_mu()),
    ];
    for (what, got, expected) in checks {
        if got != expected {
            return Err(RomError::DimensionMismatch { what, expected, got });
        }
    }
    Ok(())
}

/// Minimum-residual primal ROM solve by damped Gauss–Newton.
pub fn solve_rom_primal<P: ModelProblem + ?Sized>(
    problem: &P,
    basis: &ReducedBasis,
    y: &[f64],
    mu: &DVector<f64>,
    q0: Option<&DVector<f64>>,
    opts: &RomOptions,
) -> Result<RomPrimal, RomError> {
    check_point(problem, basis, y, mu)?;
    let k = basis.dim();
    let mut q = match q0 {
        Some(q0) if q0.len() == k => q0.clone(),
        Some(q0) => {
            return Err(RomError::DimensionMismatch {
                what: "q0",
                expected: k,
                got: q0.len(),
            })
        }
        None => DVector::zeros(k),
    };
    let phi = basis.columns();
    let mut u = phi * &q;
    let mut r = opts.weigh_vec(problem.residual(&u, y, mu));
    let mut rnorm = r.norm();
    if !rnorm.is_finite() {
        return Err(RomError::NonFinite("primal"));
    }
    let tol = opts.stationarity_tol * (1.0 + rnorm);
    let mut stationarity = f64::INFINITY;
    for iter in 0..=opts.max_iters {
        let a = opts.weigh_mat(problem.jacobian_u_mul(&u, y, mu, phi));
        let grad = a.tr_mul(&r);
        stationarity = grad.norm();
        if stationarity <= tol {
            let floor = residual_floor(&a, &q, &r);
            return Ok(RomPrimal {
                q,
                residual_norm: rnorm,
                gn_iters: iter,
                stationarity,
                residual_floor: floor,
            });
        }
        if iter == opts.max_iters {
            break;
        }
        let gn = least_squares(a.clone(), &(-&r), opts.rank_tol, "primal")?;
        // a Gauss–Newton decrease below round-off means q is stationary to
        // working precision
        let floor = residual_floor(&a, &q, &r);
        if -grad.dot(&gn) <= rnorm * floor {
            return Ok(RomPrimal {
                q,
                residual_norm: rnorm,
                gn_iters: iter,
                stationarity,
                residual_floor: floor,
            });
        }
        let mut directions = Vec::with_capacity(2);
        if opts.second_order {
            if let Some(dn) = newton_direction(problem, phi, &u, &r, &a, &grad, y, mu, opts) {
                directions.push(dn);
            }
        }
        directions.push(gn);
        let mut accepted = false;
        for dq in directions {
            let slope = grad.dot(&dq);
            if slope >= 0.0 {
                continue;
            }
            // below this predicted decrease ½‖r‖² cannot resolve the step, so
            // a full step is taken unless the residual grows beyond round-off
            let floor = residual_floor(&a, &q, &r);
            let unresolved = -slope <= rnorm * floor;
            let mut t = 1.0;
            for _ in 0..=opts.max_halvings {
                let qt = &q + &dq * t;
                let ut = phi * &qt;
                let rt = opts.weigh_vec(problem.residual(&ut, y, mu));
                let nt = rt.norm();
                let armijo = 0.5 * nt * nt <= 0.5 * rnorm * rnorm + 1e-4 * t * slope;
                let flat = unresolved && t == 1.0 && nt <= rnorm + floor;
                if nt.is_finite() && (armijo || flat) {
                    q = qt;
                    u = ut;
                    r = rt;
                    rnorm = nt;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if accepted {
                break;
            }
        }
        if !accepted {
            break;
        }
    }
    Err(RomError::NotConverged {
        iters: opts.max_iters,
        stationarity,
        residual_norm: rnorm,
    })
}

/// Solves `(AᵀA + S) dq = -Aᵀr` where column `j` of `S` is the central
/// difference of `Φᵀ J(u)ᵀ Θ r` along `φ_j`. `None` if not positive definite.
#[allow(clippy::too_many_arguments)]
fn newton_direction<P: ModelProblem + ?Sized>(
    problem: &P,
    phi: &DMatrix<f64>,
    u: &DVector<f64>,
    r: &DVector<f64>,
    a: &DMatrix<f64>,
    grad: &DVector<f64>,
    y: &[f64],
    mu: &DVector<f64>,
    opts: &RomOptions,
) -> Option<DVector<f64>> {
    let k = phi.ncols();
    let w = DMatrix::from_column_slice(r.len(), 1, opts.weigh_vec(r.clone()).as_slice());
    let eps = f64::EPSILON.cbrt() * (1.0 + u.amax());
    let mut h = a.tr_mul(a);
    let mut s = DMatrix::zeros(k, k);
    for j in 0..k {
        let step = phi.column(j) * eps;
        let plus = problem.jacobian_u_tr_mul(&(u + &step), y, mu, &w);
        let minus = problem.jacobian_u_tr_mul(&(u - &step), y, mu, &w);
        let col = phi.tr_mul(&((plus - minus) / (2.0 * eps)));
        s.set_column(j, &col.column(0));
    }
    h += (&s + s.transpose()) * 0.5;
    let dq = h.cholesky()?.solve(&(-grad));
    dq.iter().all(|v| v.is_finite()).then_some(dq)
}

/// Round-off level of a residual `r(Φq) ≈ r0 + JΦ q`: the residual cannot be
/// resolved below a few ulps of the terms that cancel in it.
fn residual_floor(a: &DMatrix<f64>, q: &DVector<f64>, r: &DVector<f64>) -> f64 {
    let aq = a * q;
    let scale = aq.norm() + (r - &aq).norm();
    1e3 * f64::EPSILON * scale
}

/// Minimum-residual adjoint ROM solve at the reduced primal state `Φq`.
pub fn solve_rom_adjoint<P: ModelProblem + ?Sized>(
    problem: &P,
    basis: &ReducedBasis,
    q: &DVector<f64>,
    y: &[f64],
    mu: &DVector<f64>,
    opts: &RomOptions,
) -> Result<RomAdjoint, RomError> {
    check_point(problem, basis, y, mu)?;
    if q.len() != basis.dim() {
        return Err(RomError::DimensionMismatch {
            what: "q",
            expected: basis.dim(),
            got: q.len(),
        });
    }
    let phi = basis.columns();
    let u = phi * q;
    let a = opts.weigh_mat(problem.jacobian_u_tr_mul(&u, y, mu, phi));
    let b = opts.weigh_vec(problem.qoi_du(&u, y, mu));
    let eta = least_squares(a.clone(), &b, opts.rank_tol, "adjoint")?;
    let residual_norm = (a * &eta - b).norm();
    Ok(RomAdjoint { eta, residual_norm })
}

/// `f(Φq, y, μ)`.
pub fn rom_qoi<P: ModelProblem + ?Sized>(
    problem: &P,
    basis: &ReducedBasis,
    q: &DVector<f64>,
    y: &[f64],
    mu: &DVector<f64>,
) -> f64 {
    problem.qoi(&basis.reconstruct(q), y, mu)
}

/// `g^λ(Φη, Φq, y, μ)`, the adjoint-based gradient estimate.
pub fn rom_gradient<P: ModelProblem + ?Sized>(
    problem: &P,
    basis: &ReducedBasis,
    q: &DVector<f64>,
    eta: &DVector<f64>,
    y: &[f64],
    mu: &DVector<f64>,
) -> DVector<f64> {
    adjoint_gradient_unchecked(problem, &basis.reconstruct(eta), &basis.reconstruct(q), y, mu)
}

/// Unweighted `‖r^λ(Φη, Φq)‖`.
pub fn rom_adjoint_residual<P: ModelProblem + ?Sized>(
    problem: &P,
    basis: &ReducedBasis,
    q: &DVector<f64>,
    eta: &DVector<f64>,
    y: &[f64],
    mu: &DVector<f64>,
) -> DVector<f64> {
    adjoint_residual_unchecked(problem, &basis.reconstruct(eta), &basis.reconstruct(q), y, mu)
}

/// Everything the refinement drivers need at one `(y, μ)` point.
#[derive(Clone, Debug)]
pub struct RomEval {
    pub primal: RomPrimal,
    pub adjoint: RomAdjoint,
    pub qoi: f64,
    pub gradient: DVector<f64>,
}

/// Primal solve, adjoint solve, QoI and gradient estimate in one call.
pub fn evaluate_rom<P: ModelProblem + ?Sized>(
    problem: &P,
    basis: &ReducedBasis,
    y: &[f64],
    mu: &DVector<f64>,
    q0: Option<&DVector<f64>>,
    opts: &RomOptions,
) -> Result<RomEval, RomError> {
    let primal = solve_rom_primal(problem, basis, y, mu, q0, opts)?;
    let adjoint = solve_rom_adjoint(problem, basis, &primal.q, y, mu, opts)?;
    let qoi = rom_qoi(problem, basis, &primal.q, y, mu);
    let gradient = rom_gradient(problem, basis, &primal.q, &adjoint.eta, y, mu);
    Ok(RomEval {
        primal,
        adjoint,
        qoi,
        gradient,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hdm::{solve_adjoint, solve_primal, DiffusionParams, LinearDiffusion, NewtonOptions};

    fn e(n: usize, i: usize) -> DVector<f64> {
        DVector::from_fn(n, |j, _| if i == j { 1.0 } else { 0.0 })
    }

    #[test]
    fn append_examples() {
        let mut b = ReducedBasis::new(4);
        let v = DVector::from_vec(vec![3.0, 0.0, 4.0, 0.0]);
        let mu = DVector::zeros(1);
        assert!(b.append(&v, &[0.0], &mu, SnapshotKind::Primal));
        assert_eq!(b.dim(), 1);
        assert!((b.columns().column(0) - &v / 5.0).norm() < 1e-15);
        assert!(!b.append(&v, &[0.0], &mu, SnapshotKind::Primal));
        assert_eq!(b.dim(), 1);
        assert_eq!(b.provenance().len(), 2);
        assert!(!b.provenance()[1].appended);
        assert!(!b.append(&DVector::zeros(4), &[0.0], &mu, SnapshotKind::Adjoint));
        assert_eq!(b.version(), 1);
    }

    #[test]
    fn basis_never_exceeds_state_dimension() {
        let mut b = ReducedBasis::new(3);
        let mu = DVector::zeros(1);
        for i in 0..3 {
            b.append(&e(3, i), &[0.0], &mu, SnapshotKind::Primal);
        }
        assert!(!b.append(&DVector::from_element(3, 1.0), &[0.0], &mu, SnapshotKind::Primal));
        assert_eq!(b.dim(), 3);
        assert!(b.orthonormality_defect() < 1e-15);
    }

    #[test]
    fn linear_problem_converges_in_one_gauss_newton_step() {
        let p = LinearDiffusion::new(DiffusionParams::default());
        let mu = DVector::from_element(8, 0.7);
        let y = [0.2, 0.5];
        let mut b = ReducedBasis::new(63);
        for (i, yy) in [[0.0, 0.0], [0.9, -0.9]].iter().enumerate() {
            let s = solve_primal(&p, yy, &mu, None, &NewtonOptions::default()).unwrap();
            b.append(&s.u, yy, &mu, SnapshotKind::Primal);
            assert_eq!(b.dim(), i + 1);
        }
        let rom = solve_rom_primal(&p, &b, &y, &mu, None, &RomOptions::default()).unwrap();
        assert_eq!(rom.gn_iters, 1);
    }

    #[test]
    fn interpolation_at_sampled_point() {
        let p = LinearDiffusion::new(DiffusionParams::default());
        let mu = DVector::from_fn(8, |j, _| 0.1 * j as f64);
        let y = [-0.3, 0.8];
        let s = solve_primal(&p, &y, &mu, None, &NewtonOptions::default()).unwrap();
        let a = solve_adjoint(&p, &s.u, &y, &mu).unwrap();
        let mut b = ReducedBasis::new(63);
        b.append(&s.u, &y, &mu, SnapshotKind::Primal);
        b.append(&a.lambda, &y, &mu, SnapshotKind::Adjoint);
        let ev = evaluate_rom(&p, &b, &y, &mu, None, &RomOptions::default()).unwrap();
        assert!(ev.primal.residual_norm <= 1e-8 * (1.0 + s.u.norm()));
        assert!(ev.adjoint.residual_norm <= 1e-8 * (1.0 + p.qoi_du(&s.u, &y, &mu).norm()));
        assert!((ev.qoi - p.qoi(&s.u, &y, &mu)).abs() < 1e-12);
    }

    #[test]
    fn full_space_adjoint_reproduces_hdm_adjoint() {
        let p = LinearDiffusion::new(DiffusionParams {
            n_u: 9,
            ..DiffusionParams::default()
        });
        let mu = DVector::from_element(8, 1.0);
        let y = [0.5, 0.5];
        let mut b = ReducedBasis::new(9);
        for i in 0..9 {
            b.append(&e(9, i), &y, &mu, SnapshotKind::Primal);
        }
        let s = solve_primal(&p, &y, &mu, None, &NewtonOptions::default()).unwrap();
        let a = solve_adjoint(&p, &s.u, &y, &mu).unwrap();
        let ev = evaluate_rom(&p, &b, &y, &mu, None, &RomOptions::default()).unwrap();
        assert!((b.reconstruct(&ev.adjoint.eta) - a.lambda).norm() < 1e-12);
    }

    #[test]
    fn mismatched_q0_is_rejected() {
        let p = LinearDiffusion::new(DiffusionParams::default());
        let mu = DVector::zeros(8);
        let mut b = ReducedBasis::new(63);
        b.append(&e(63, 3), &[0.0, 0.0], &mu, SnapshotKind::Primal);
        let q0 = DVector::zeros(2);
        assert!(matches!(
            solve_rom_primal(&p, &b, &[0.0, 0.0], &mu, Some(&q0), &RomOptions::default()),
            Err(RomError::DimensionMismatch { what: "q0", .. })
        ));
        assert!(matches!(
            solve_rom_primal(
                &p,
                &ReducedBasis::new(63),
                &[0.0, 0.0],
                &mu,
                None,
                &RomOptions::default()
            ),
            Err(RomError::EmptyBasis)
        ));
    }
}
