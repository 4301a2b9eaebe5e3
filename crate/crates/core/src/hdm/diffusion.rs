use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{hat, tridiag_dense, tridiag_mul, ModelProblem};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionParams {
    pub n_u: usize,
    pub n_mu: usize,
    /// 1 or 2 stochastic coefficients in the conductivity.
    pub n_y: usize,
    pub amplitude1: f64,
    pub amplitude2: f64,
    pub alpha: f64,
}

impl Default for DiffusionParams {
    fn default() -> Self {
        Self {
            n_u: 63,
            n_mu: 8,
            n_y: 2,
            amplitude1: 0.5,
            amplitude2: 0.25,
            alpha: 0.1,
        }
    }
}

/// `-(κ(x, y) p')' = Σ_j μ_j b_j(x)` on `(0, 1)` with `p(0) = p(1) = 0`,
/// `κ = 1 + a1 y1 sin(πx) + a2 y2 cos(2πx)`, and the tracking objective
/// `½∫(p - p_ref)² + (α/2)|μ|²` with `p_ref = x(1 - x)/2`.
///
/// Rows are scaled by the mesh width so that residual norms approximate
/// continuous norms. The residual is affine in `p` and the Jacobian symmetric.
#[derive(Clone, Debug)]
pub struct LinearDiffusion {
    params: DiffusionParams,
    h: f64,
    x: Vec<f64>,
    target: DVector<f64>,
    /// `b_j(x_i)`, `n_u × n_mu`.
    loads: DMatrix<f64>,
}

impl LinearDiffusion {
    pub fn new(params: DiffusionParams) -> Self {
        assert!(params.n_u >= 1 && params.n_mu >= 1);
        assert!(params.n_y == 1 || params.n_y == 2, "n_y must be 1 or 2");
        let h = 1.0 / (params.n_u as f64 + 1.0);
        let x: Vec<f64> = (0..params.n_u).map(|i| (i as f64 + 1.0) * h).collect();
        let target = DVector::from_iterator(params.n_u, x.iter().map(|&x| 0.5 * x * (1.0 - x)));
        let loads = DMatrix::from_fn(params.n_u, params.n_mu, |i, j| hat(x[i], j, params.n_mu));
        Self {
            params,
            h,
            x,
            target,
            loads,
        }
    }

    /// One stochastic variable with zero amplitude: a deterministic quadratic
    /// optimization problem.
    pub fn deterministic(n_u: usize, n_mu: usize, alpha: f64) -> Self {
        Self::new(DiffusionParams {
            n_u,
            n_mu,
            n_y: 1,
            amplitude1: 0.0,
            amplitude2: 0.0,
            alpha,
        })
    }

    pub fn params(&self) -> &DiffusionParams {
        &self.params
    }

    pub fn target(&self) -> &DVector<f64> {
        &self.target
    }

    /// Conductivity at the `n_u + 1` cell midpoints.
    fn kappa(&self, y: &[f64]) -> Vec<f64> {
        let pi = std::f64::consts::PI;
        (0..=self.params.n_u)
            .map(|m| {
                let xm = (m as f64 + 0.5) * self.h;
                let mut k = 1.0 + self.params.amplitude1 * y[0] * (pi * xm).sin();
                if self.params.n_y > 1 {
                    k += self.params.amplitude2 * y[1] * (2.0 * pi * xm).cos();
                }
                k
            })
            .collect()
    }

    fn stiffness(&self, y: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let k = self.kappa(y);
        let n = self.params.n_u;
        let mut lower = vec![0.0; n];
        let mut diag = vec![0.0; n];
        let mut upper = vec![0.0; n];
        for i in 0..n {
            diag[i] = (k[i] + k[i + 1]) / self.h;
            lower[i] = -k[i] / self.h;
            upper[i] = -k[i + 1] / self.h;
        }
        (lower, diag, upper)
    }
}

impl ModelProblem for LinearDiffusion {
    fn name(&self) -> &str {
        "linear-diffusion"
    }
    fn n_u(&self) -> usize {
        self.params.n_u
    }
    fn n_y(&self) -> usize {
        self.params.n_y
    }
    fn n_mu(&self) -> usize {
        self.params.n_mu
    }

    fn residual(&self, u: &DVector<f64>, y: &[f64], mu: &DVector<f64>) -> DVector<f64> {
        let (l, d, up) = self.stiffness(y);
        let uu = DMatrix::from_column_slice(u.len(), 1, u.as_slice());
        let au = tridiag_mul(&l, &d, &up, &uu);
        DVector::from_column_slice(au.as_slice()) - (&self.loads * mu) * self.h
    }

    fn jacobian_u(&self, _u: &DVector<f64>, y: &[f64], _mu: &DVector<f64>) -> DMatrix<f64> {
        let (l, d, up) = self.stiffness(y);
        tridiag_dense(&l, &d, &up)
    }

    fn jacobian_mu(&self, _u: &DVector<f64>, _y: &[f64], _mu: &DVector<f64>) -> DMatrix<f64> {
        &self.loads * (-self.h)
    }

    fn qoi(&self, u: &DVector<f64>, _y: &[f64], mu: &DVector<f64>) -> f64 {
        0.5 * self.h * (u - &self.target).norm_squared() + 0.5 * self.params.alpha * mu.norm_squared()
    }

    fn qoi_du(&self, u: &DVector<f64>, _y: &[f64], _mu: &DVector<f64>) -> DVector<f64> {
        (u - &self.target) * self.h
    }

    fn qoi_dmu(&self, _u: &DVector<f64>, _y: &[f64], mu: &DVector<f64>) -> DVector<f64> {
        mu * self.params.alpha
    }

    fn jacobian_u_mul(&self, _u: &DVector<f64>, y: &[f64], _mu: &DVector<f64>, v: &DMatrix<f64>) -> DMatrix<f64> {
        let (l, d, up) = self.stiffness(y);
        tridiag_mul(&l, &d, &up, v)
    }

    fn jacobian_u_tr_mul(&self, u: &DVector<f64>, y: &[f64], mu: &DVector<f64>, v: &DMatrix<f64>) -> DMatrix<f64> {
        self.jacobian_u_mul(u, y, mu, v)
    }

    fn mesh(&self) -> Option<Vec<f64>> {
        Some(self.x.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hdm::{solve_adjoint, solve_primal, NewtonOptions};

    #[test]
    fn residual_is_affine_in_state() {
        let p = LinearDiffusion::new(DiffusionParams::default());
        let y = [0.3, -0.7];
        let mu = DVector::from_fn(8, |j, _| j as f64 * 0.1 - 0.2);
        let u = DVector::from_fn(63, |i, _| ((i * 7) % 11) as f64 / 11.0);
        let r0 = p.residual(&DVector::zeros(63), &y, &mu);
        let lhs = p.residual(&u, &y, &mu) - r0;
        let rhs = p.jacobian_u(&u, &y, &mu) * &u;
        assert!((lhs - rhs).norm() < 1e-12);
    }

    #[test]
    fn jacobian_is_symmetric_and_adjoint_solves_it() {
        let p = LinearDiffusion::new(DiffusionParams::default());
        let y = [-0.4, 0.9];
        let mu = DVector::from_element(8, 0.5);
        let jac = p.jacobian_u(&DVector::zeros(63), &y, &mu);
        assert_eq!(jac, jac.transpose());
        let sol = solve_primal(&p, &y, &mu, None, &NewtonOptions::default()).unwrap();
        let adj = solve_adjoint(&p, &sol.u, &y, &mu).unwrap();
        let rhs = p.qoi_du(&sol.u, &y, &mu);
        assert!((&jac * &adj.lambda - rhs).norm() < 1e-12);
    }

    #[test]
    fn newton_takes_one_step() {
        let p = LinearDiffusion::new(DiffusionParams::default());
        let mu = DVector::from_element(8, 1.0);
        let sol = solve_primal(&p, &[0.1, 0.2], &mu, None, &NewtonOptions::default()).unwrap();
        assert_eq!(sol.newton_iters, 1);
        assert!(sol.residual_norm < 1e-12);
    }

    #[test]
    fn conductivity_stays_positive() {
        let p = LinearDiffusion::new(DiffusionParams::default());
        for y in [[-1.0, -1.0], [-1.0, 1.0], [1.0, -1.0], [1.0, 1.0]] {
            assert!(p.kappa(&y).iter().all(|&k| k >= 0.25));
        }
    }
}
