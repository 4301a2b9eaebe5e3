//! The full-order model: a parametrized nonlinear system `r(u, y, μ) = 0`
//! with a scalar quantity of interest `f(u, y, μ)`, together with the primal,
//! adjoint and sensitivity solvers built on top of it.

mod burgers;
mod diffusion;

pub use burgers::{BurgersControl, BurgersParams};
pub use diffusion::{DiffusionParams, LinearDiffusion};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HdmError {
    #[error("{what} has length {got}, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("Newton did not converge after {iters} iterations (residual norm {residual_norm:e})")]
    NotConverged {
        iters: usize,
        residual_norm: f64,
        last: DVector<f64>,
    },
    #[error("singular {0}")]
    Singular(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("parameter index {index} out of range for n_mu = {n_mu}")]
    ParameterIndex { index: usize, n_mu: usize },
}

/// A parametrized discrete system with a scalar quantity of interest.
///
/// Implementations must be deterministic and free of interior mutability so
/// that solves at distinct points may run concurrently.
pub trait ModelProblem: Send + Sync {
    fn name(&self) -> &str;
    fn n_u(&self) -> usize;
    fn n_y(&self) -> usize;
    fn n_mu(&self) -> usize;

    fn residual(&self, u: &DVector<f64>, y: &[f64], mu: &DVector<f64>) -> DVector<f64>;
    /// `∂r/∂u`, `n_u × n_u`.
    fn jacobian_u(&self, u: &DVector<f64>, y: &[f64], mu: &DVector<f64>) -> DMatrix<f64>;
    /// `∂r/∂μ`, `n_u × n_mu`.
    fn jacobian_mu(&self, u: &DVector<f64>, y: &[f64], mu: &DVector<f64>) -> DMatrix<f64>;
    fn qoi(&self, u: &DVector<f64>, y: &[f64], mu: &DVector<f64>) -> f64;
    /// `(∂f/∂u)ᵀ`.
    fn qoi_du(&self, u: &DVector<f64>, y: &[f64], mu: &DVector<f64>) -> DVector<f64>;
    /// `(∂f/∂μ)ᵀ`.
    fn qoi_dmu(&self, u: &DVector<f64>, y: &[f64], mu: &DVector<f64>) -> DVector<f64>;

    /// `(∂r/∂u) V`. Override when the Jacobian is structured.
    fn jacobian_u_mul(&self, u: &DVector<f64>, y: &[f64], mu: &DVector<f64>, v: &DMatrix<f64>) -> DMatrix<f64> {
        self.jacobian_u(u, y, mu) * v
    }

    /// `(∂r/∂u)ᵀ V`. Override when the Jacobian is structured.
    fn jacobian_u_tr_mul(&self, u: &DVector<f64>, y: &[f64], mu: &DVector<f64>, v: &DMatrix<f64>) -> DMatrix<f64> {
        self.jacobian_u(u, y, mu).tr_mul(v)
    }

    /// Spatial coordinates of the state entries, if the state lives on a mesh.
    fn mesh(&self) -> Option<Vec<f64>> {
        None
    }
}

impl<P: ModelProblem + ?Sized> ModelProblem for &P {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn n_u(&self) -> usize {
        (**self).n_u()
    }
    fn n_y(&self) -> usize {
        (**self).n_y()
    }
    fn n_mu(&self) -> usize {
        (**self).n_mu()
    }
    fn residual(&self, u: &DVector<f64>, y: &[f64], mu: &DVector<f64>) -> DVector<f64> {
        (**self).residual(u, y, mu)
    }
    fn jacobian_u(&self, u: &DVector<f64>, y: &[f64], mu: &DVector<f64>) -> DMatrix<f64> {
        (**self).jacobian_u(u, y, mu)
    }
    fn jacobian_mu(&self, u: &DVector<f64>, y: &[f64], mu: &DVector<f64>) -> DMatrix<f64> {
        (**self).jacobian_mu(u, y, mu)
    }
    fn qoi(&self, u: &DVector<f64>, y: &[f64], mu: &DVector<f64>) -> f64 {
        (**self).qoi(u, y, mu)
    }
    fn qoi_du(&self, u: &DVector<f64>, y: &[f64], mu: &DVector<f64>) -> DVector<f64> {
        (**self).qoi_du(u, y, mu)
    }
    fn qoi_dmu(&self, u: &DVector<f64>, y: &[f64], mu: &DVector<f64>) -> DVector<f64> {
        (**self).qoi_dmu(u, y, mu)
    }
    fn jacobian_u_mul(&self, u: &DVector<f64>, y: &[f64], mu: &DVector<f64>, v: &DMatrix<f64>) -> DMatrix<f64> {
        (**self).jacobian_u_mul(u, y, mu, v)
    }
    fn jacobian_u_tr_mul(&self, u: &DVector<f64>, y: &[f64], mu: &DVector<f64>, v: &DMatrix<f64>) -> DMatrix<f64> {
        (**self).jacobian_u_tr_mul(u, y, mu, v)
    }
    fn mesh(&self) -> Option<Vec<f64>> {
        (**self).mesh()
    }
}

/// Multiplies the quantity of interest of a problem by a constant.
#[derive(Clone, Debug)]
pub struct ScaledQoi<P> {
    pub inner: P,
    pub scale: f64,
}

impl<P: ModelProblem> ModelProblem for ScaledQoi<P> {
    fn name(&self) -> &str {
        self.inner.name()
    }
    fn n_u(&self) -> usize {
        self.inner.n_u()
    }
    fn n_y(&self) -> usize {
        self.inner.n_y()
    }
    fn n_mu(&self) -> usize {
        self.inner.n_mu()
    }
    fn residual(&self, u: &DVector<f64>, y: &[f64], mu: &DVector<f64>) -> DVector<f64> {
        self.inner.residual(u, y, mu)
    }
    fn jacobian_u(&self, u: &DVector<f64>, y: &[f64], mu: &DVector<f64>) -> DMatrix<f64> {
        self.inner.jacobian_u(u, y, mu)
    }
    fn jacobian_mu(&self, u: &DVector<f64>, y: &[f64], mu: &DVector<f64>) -> DMatrix<f64> {
        self.inner.jacobian_mu(u, y, mu)
    }
    fn qoi(&self, u: &DVector<f64>, y: &[f64], mu: &DVector<f64>) -> f64 {
        self.scale * self.inner.qoi(u, y, mu)
    }
    fn qoi_du(&self, u: &DVector<f64>, y: &[f64], mu: &DVector<f64>) -> DVector<f64> {
        self.inner.qoi_du(u, y, mu) * self.scale
    }
    fn qoi_dmu(&self, u: &DVector<f64>, y: &[f64], mu: &DVector<f64>) -> DVector<f64> {
        self.inner.qoi_dmu(u, y, mu) * self.scale
    }
    fn jacobian_u_mul(&self, u: &DVector<f64>, y: &[f64], mu: &DVector<f64>, v: &DMatrix<f64>) -> DMatrix<f64> {
        self.inner.jacobian_u_mul(u, y, mu, v)
    }
    fn jacobian_u_tr_mul(&self, u: &DVector<f64>, y: &[f64], mu: &DVector<f64>, v: &DMatrix<f64>) -> DMatrix<f64> {
        self.inner.jacobian_u_tr_mul(u, y, mu, v)
    }
    fn mesh(&self) -> Option<Vec<f64>> {
        self.inner.mesh()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NewtonOptions {
    pub tol_abs: f64,
    pub tol_rel: f64,
    pub max_iters: usize,
    pub max_halvings: usize,
    /// Pseudo-transient fallback iterations; zero disables the fallback.
    pub ptc_max_iters: usize,
    pub ptc_tau0: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol_abs: 1e-12,
            tol_rel: 1e-12,
            max_iters: 50,
            max_halvings: 30,
            ptc_max_iters: 500,
            ptc_tau0: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PrimalSolution {
    pub u: DVector<f64>,
    pub residual_norm: f64,
    pub newton_iters: usize,
}

#[derive(Clone, Debug)]
pub struct AdjointSolution {
    pub lambda: DVector<f64>,
    pub residual_norm: f64,
}

fn check_len(what: &'static str, got: usize, expected: usize) -> Result<(), HdmError> {
    if got == expected {
        Ok(())
    } else {
        Err(HdmError::DimensionMismatch { what, expected, got })
    }
}

fn check_point<P: ModelProblem + ?Sized>(problem: &P, y: &[f64], mu: &DVector<f64>) -> Result<(), HdmError> {
    check_len("y", y.len(), problem.n_y())?;
    check_len("mu", mu.len(), problem.n_mu())
}

fn check_state<P: ModelProblem + ?Sized>(problem: &P, what: &'static str, v: &DVector<f64>) -> Result<(), HdmError> {
    check_len(what, v.len(), problem.n_u())
}

/// `r(u, y, μ)` with dimension checks.
pub fn residual<P: ModelProblem + ?Sized>(
    problem: &P,
    u: &DVector<f64>,
    y: &[f64],
    mu: &DVector<f64>,
) -> Result<DVector<f64>, HdmError> {
    check_point(problem, y, mu)?;
    check_state(problem, "u", u)?;
    Ok(problem.residual(u, y, mu))
}

/// Damped Newton iteration for `r(u, y, μ) = 0`, starting from `u0` or zero.
///
/// If Newton stalls, pseudo-transient continuation restarts from the same
/// initial state: steps solve `(∂r/∂u + I/τ) du = -r` with `τ` grown by the
/// ratio of successive residual norms, which tends to Newton near the solution.
pub fn solve_primal<P: ModelProblem + ?Sized>(
    problem: &P,
    y: &[f64],
    mu: &DVector<f64>,
    u0: Option<&DVector<f64>>,
    opts: &NewtonOptions,
) -> Result<PrimalSolution, HdmError> {
    check_point(problem, y, mu)?;
    let start = match u0 {
        Some(u0) => {
            check_state(problem, "u0", u0)?;
            if u0.iter().any(|x| !x.is_finite()) {
                return Err(HdmError::NonFinite("u0"));
            }
            u0.clone()
        }
        None => DVector::zeros(problem.n_u()),
    };
    let r0 = problem.residual(&start, y, mu).norm();
    let tol = opts.tol_abs + opts.tol_rel * r0;
    match newton(problem, y, mu, start.clone(), tol, opts) {
        Ok(sol) => Ok(sol),
        Err(HdmError::NotConverged { iters, .. }) if opts.ptc_max_iters > 0 => {
            pseudo_transient(problem, y, mu, start, tol, opts).map(|mut sol| {
                sol.newton_iters += iters;
                sol
            })
        }
        Err(e) => Err(e),
    }
}

fn newton<P: ModelProblem + ?Sized>(
    problem: &P,
    y: &[f64],
    mu: &DVector<f64>,
    mut u: DVector<f64>,
    tol: f64,
    opts: &NewtonOptions,
) -> Result<PrimalSolution, HdmError> {
    let mut r = problem.residual(&u, y, mu);
    let mut rnorm = r.norm();
    for iter in 0..opts.max_iters {
        if rnorm <= tol {
            return Ok(PrimalSolution {
                u,
                residual_norm: rnorm,
                newton_iters: iter,
            });
        }
        let jac = problem.jacobian_u(&u, y, mu);
        let du = jac.lu().solve(&(-&r)).ok_or(HdmError::Singular("state Jacobian"))?;
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let trial = &u + &du * step;
            let rt = problem.residual(&trial, y, mu);
            let nt = rt.norm();
            if nt.is_finite() && nt < rnorm {
                accepted = Some((trial, rt, nt));
                break;
            }
            step *= 0.5;
        }
        let Some((trial, rt, nt)) = accepted else {
            return Err(HdmError::NotConverged {
                iters: iter + 1,
                residual_norm: rnorm,
                last: u,
            });
        };
        u = trial;
        r = rt;
        rnorm = nt;
    }
    if rnorm <= tol {
        return Ok(PrimalSolution {
            u,
            residual_norm: rnorm,
            newton_iters: opts.max_iters,
        });
    }
    Err(HdmError::NotConverged {
        iters: opts.max_iters,
        residual_norm: rnorm,
        last: u,
    })
}

fn pseudo_transient<P: ModelProblem + ?Sized>(
    problem: &P,
    y: &[f64],
    mu: &DVector<f64>,
    mut u: DVector<f64>,
    tol: f64,
    opts: &NewtonOptions,
) -> Result<PrimalSolution, HdmError> {
    let n = problem.n_u();
    let mut r = problem.residual(&u, y, mu);
    let mut rnorm = r.norm();
    let mut tau = opts.ptc_tau0;
    for iter in 0..opts.ptc_max_iters {
        if rnorm <= tol {
            return Ok(PrimalSolution {
                u,
                residual_norm: rnorm,
                newton_iters: iter,
            });
        }
        let a = problem.jacobian_u(&u, y, mu) + DMatrix::identity(n, n) / tau;
        let du = a
            .lu()
            .solve(&(-&r))
            .ok_or(HdmError::Singular("pseudo-transient operator"))?;
        u += du;
        r = problem.residual(&u, y, mu);
        let next = r.norm();
        if !next.is_finite() {
            return Err(HdmError::NonFinite("pseudo-transient iterate"));
        }
        tau = (tau * rnorm / next).min(1e12);
        rnorm = next;
    }
    if rnorm <= tol {
        return Ok(PrimalSolution {
            u,
            residual_norm: rnorm,
            newton_iters: opts.ptc_max_iters,
        });
    }
    Err(HdmError::NotConverged {
        iters: opts.ptc_max_iters,
        residual_norm: rnorm,
        last: u,
    })
}

/// `r^λ = (∂r/∂u)ᵀ λ − (∂f/∂u)ᵀ`.
pub fn adjoint_residual<P: ModelProblem + ?Sized>(
    problem: &P,
    lambda: &DVector<f64>,
    u: &DVector<f64>,
    y: &[f64],
    mu: &DVector<f64>,
) -> Result<DVector<f64>, HdmError> {
    check_point(problem, y, mu)?;
    check_state(problem, "u", u)?;
    check_state(problem, "lambda", lambda)?;
    Ok(adjoint_residual_unchecked(problem, lambda, u, y, mu))
}

pub(crate) fn adjoint_residual_unchecked<P: ModelProblem + ?Sized>(
    problem: &P,
    lambda: &DVector<f64>,
    u: &DVector<f64>,
    y: &[f64],
    mu: &DVector<f64>,
) -> DVector<f64> {
    let lam = DMatrix::from_column_slice(lambda.len(), 1, lambda.as_slice());
    let jt_lam = problem.jacobian_u_tr_mul(u, y, mu, &lam);
    DVector::from_column_slice(jt_lam.as_slice()) - problem.qoi_du(u, y, mu)
}

/// Solves `(∂r/∂u)ᵀ λ = (∂f/∂u)ᵀ` at a converged primal state.
pub fn solve_adjoint<P: ModelProblem + ?Sized>(
    problem: &P,
    u: &DVector<f64>,
    y: &[f64],
    mu: &DVector<f64>,
) -> Result<AdjointSolution, HdmError> {
    check_point(problem, y, mu)?;
    check_state(problem, "u", u)?;
    let jt = problem.jacobian_u(u, y, mu).transpose();
    let rhs = problem.qoi_du(u, y, mu);
    let lambda = jt.lu().solve(&rhs).ok_or(HdmError::Singular("adjoint operator"))?;
    if lambda.iter().any(|x| !x.is_finite()) {
        return Err(HdmError::Singular("adjoint operator"));
    }
    let residual_norm = adjoint_residual_unchecked(problem, &lambda, u, y, mu).norm();
    Ok(AdjointSolution { lambda, residual_norm })
}

/// `g^λ = (∂f/∂μ)ᵀ − (∂r/∂μ)ᵀ λ`.
pub fn adjoint_gradient<P: ModelProblem + ?Sized>(
    problem: &P,
    lambda: &DVector<f64>,
    u: &DVector<f64>,
    y: &[f64],
    mu: &DVector<f64>,
) -> Result<DVector<f64>, HdmError> {
    check_point(problem, y, mu)?;
    check_state(problem, "u", u)?;
    check_state(problem, "lambda", lambda)?;
    Ok(adjoint_gradient_unchecked(problem, lambda, u, y, mu))
}

pub(crate) fn adjoint_gradient_unchecked<P: ModelProblem + ?Sized>(
    problem: &P,
    lambda: &DVector<f64>,
    u: &DVector<f64>,
    y: &[f64],
    mu: &DVector<f64>,
) -> DVector<f64> {
    problem.qoi_dmu(u, y, mu) - problem.jacobian_mu(u, y, mu).tr_mul(lambda)
}

/// Solves `(∂r/∂u) s_j = −(∂r/∂μ) e_j`.
pub fn primal_sensitivity<P: ModelProblem + ?Sized>(
    problem: &P,
    u: &DVector<f64>,
    y: &[f64],
    mu: &DVector<f64>,
    j: usize,
) -> Result<DVector<f64>, HdmError> {
    check_point(problem, y, mu)?;
    check_state(problem, "u", u)?;
    if j >= problem.n_mu() {
        return Err(HdmError::ParameterIndex {
            index: j,
            n_mu: problem.n_mu(),
        });
    }
    let rhs = -problem.jacobian_mu(u, y, mu).column(j).into_owned();
    problem
        .jacobian_u(u, y, mu)
        .lu()
        .solve(&rhs)
        .ok_or(HdmError::Singular("state Jacobian"))
}

/// The reduced functional `F(y, μ) = f(u⋆(y, μ), y, μ)`.
pub fn reduced_objective<P: ModelProblem + ?Sized>(
    problem: &P,
    y: &[f64],
    mu: &DVector<f64>,
    opts: &NewtonOptions,
) -> Result<f64, HdmError> {
    let sol = solve_primal(problem, y, mu, None, opts)?;
    Ok(problem.qoi(&sol.u, y, mu))
}

/// Hat function `j` (0-based) of `n`, centered at `(j + 1) / (n + 1)`.
pub(crate) fn hat(x: f64, j: usize, n: usize) -> f64 {
    let width = 1.0 / (n as f64 + 1.0);
    let center = (j as f64 + 1.0) * width;
    (1.0 - (x - center).abs() / width).max(0.0)
}

/// Tridiagonal `(lower, diag, upper)` times a dense block.
pub(crate) fn tridiag_mul(lower: &[f64], diag: &[f64], upper: &[f64], v: &DMatrix<f64>) -> DMatrix<f64> {
    let n = diag.len();
    let mut out = DMatrix::zeros(n, v.ncols());
    for c in 0..v.ncols() {
        let col = v.column(c);
        for i in 0..n {
            let mut s = diag[i] * col[i];
            if i > 0 {
                s += lower[i] * col[i - 1];
            }
            if i + 1 < n {
                s += upper[i] * col[i + 1];
            }
            out[(i, c)] = s;
        }
    }
    out
}

/// Dense form of a tridiagonal matrix. `lower[0]` and `upper[n-1]` are unused.
pub(crate) fn tridiag_dense(lower: &[f64], diag: &[f64], upper: &[f64]) -> DMatrix<f64> {
    let n = diag.len();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = diag[i];
        if i > 0 {
            m[(i, i - 1)] = lower[i];
        }
        if i + 1 < n {
            m[(i, i + 1)] = upper[i];
        }
    }
    m
}

/// Transpose of a tridiagonal matrix in the same `(lower, diag, upper)` layout.
pub(crate) fn tridiag_transpose(lower: &[f64], diag: &[f64], upper: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = diag.len();
    let mut lt = vec![0.0; n];
    let mut ut = vec![0.0; n];
    for i in 0..n {
        if i > 0 {
            lt[i] = upper[i - 1];
        }
        if i + 1 < n {
            ut[i] = lower[i + 1];
        }
    }
    (lt, diag.to_vec(), ut)
}
