use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{hat, solve_primal, tridiag_dense, tridiag_mul, tridiag_transpose, HdmError, ModelProblem, NewtonOptions};
use crate::sparse_grid::SparseQuadrature;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BurgersParams {
    pub n_u: usize,
    pub n_mu: usize,
    /// `1/ν = inv_nu_left (1 - y1) + inv_nu_right (1 + y1)`.
    pub inv_nu_left: f64,
    pub inv_nu_right: f64,
    /// `u(0) = inflow_base + inflow_amplitude y2`.
    pub inflow_base: f64,
    pub inflow_amplitude: f64,
    pub alpha: f64,
    /// Tensor level used to compute the uncontrolled mean target.
    pub reference_level: u32,
}

impl Default for BurgersParams {
    fn default() -> Self {
        Self {
            n_u: 127,
            n_mu: 8,
            inv_nu_left: 5.0,
            inv_nu_right: 30.0,
            inflow_base: 1.0,
            inflow_amplitude: 0.25,
            alpha: 0.1,
            reference_level: 4,
        }
    }
}

/// Steady viscous Burgers boundary control on `(0, 1)`:
/// `-ν(y1) u'' + u u' = Σ_j μ_j b_j(x)`, `u(0) = g(y2)`, `u(1) = 0`,
/// with the tracking objective `½∫(u - u_ref)² + (α/2)|μ|²`.
///
/// The target `u_ref` is the mean of the uncontrolled (`μ = 0`) state,
/// computed once by tensor Clenshaw–Curtis quadrature. Central differences,
/// rows scaled by the mesh width.
#[derive(Clone, Debug)]
pub struct BurgersControl {
    params: BurgersParams,
    h: f64,
    x: Vec<f64>,
    target: DVector<f64>,
    loads: DMatrix<f64>,
}

impl BurgersControl {
    pub fn new(params: BurgersParams) -> Result<Self, HdmError> {
        let mut p = Self::with_target(params.clone(), DVector::zeros(params.n_u));
        let quad =
            SparseQuadrature::tensor(&[params.reference_level; 2]).expect("reference level within the supported range");
        let zero = DVector::zeros(params.n_mu);
        let mut mean = DVector::zeros(params.n_u);
        for (_, pt) in quad.iter() {
            let sol = solve_primal(&p, &pt.coords, &zero, None, &NewtonOptions::default())?;
            mean += sol.u * pt.weight;
        }
        p.target = mean;
        Ok(p)
    }

    /// Uses an explicit target state instead of the uncontrolled mean.
    pub fn with_target(params: BurgersParams, target: DVector<f64>) -> Self {
        assert!(params.n_u >= 2 && params.n_mu >= 1);
        assert_eq!(target.len(), params.n_u);
        let h = 1.0 / (params.n_u as f64 + 1.0);
        let x: Vec<f64> = (0..params.n_u).map(|i| (i as f64 + 1.0) * h).collect();
        let loads = DMatrix::from_fn(params.n_u, params.n_mu, |i, j| hat(x[i], j, params.n_mu));
        Self {
            params,
            h,
            x,
            target,
            loads,
        }
    }

    pub fn params(&self) -> &BurgersParams {
        &self.params
    }

    pub fn target(&self) -> &DVector<f64> {
        &self.target
    }

    pub fn viscosity(&self, y: &[f64]) -> f64 {
        1.0 / (self.params.inv_nu_left * (1.0 - y[0]) + self.params.inv_nu_right * (1.0 + y[0]))
    }

    fn inflow(&self, y: &[f64]) -> f64 {
        self.params.inflow_base + self.params.inflow_amplitude * y[1]
    }

    fn jacobian_bands(&self, u: &DVector<f64>, y: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = self.params.n_u;
        let d = self.viscosity(y) / self.h;
        let g = self.inflow(y);
        let mut lower = vec![0.0; n];
        let mut diag = vec![0.0; n];
        let mut upper = vec![0.0; n];
        for i in 0..n {
            let left = if i == 0 { g } else { u[i - 1] };
            let right = if i + 1 == n { 0.0 } else { u[i + 1] };
            diag[i] = 2.0 * d + 0.5 * (right - left);
            lower[i] = -d - 0.5 * u[i];
            upper[i] = -d + 0.5 * u[i];
        }
        (lower, diag, upper)
    }
}

impl ModelProblem for BurgersControl {
    fn name(&self) -> &str {
        "burgers-control"
    }
    fn n_u(&self) -> usize {
        self.params.n_u
    }
    fn n_y(&self) -> usize {
        2
    }
    fn n_mu(&self) -> usize {
        self.params.n_mu
    }

    fn residual(&self, u: &DVector<f64>, y: &[f64], mu: &DVector<f64>) -> DVector<f64> {
        let n = self.params.n_u;
        let d = self.viscosity(y) / self.h;
        let g = self.inflow(y);
        let src = &self.loads * mu;
        DVector::from_fn(n, |i, _| {
            let left = if i == 0 { g } else { u[i - 1] };
            let right = if i + 1 == n { 0.0 } else { u[i + 1] };
            d * (2.0 * u[i] - left - right) + 0.5 * u[i] * (right - left) - self.h * src[i]
        })
    }

    fn jacobian_u(&self, u: &DVector<f64>, y: &[f64], _mu: &DVector<f64>) -> DMatrix<f64> {
        let (l, d, up) = self.jacobian_bands(u, y);
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

    fn jacobian_u_mul(&self, u: &DVector<f64>, y: &[f64], _mu: &DVector<f64>, v: &DMatrix<f64>) -> DMatrix<f64> {
        let (l, d, up) = self.jacobian_bands(u, y);
        tridiag_mul(&l, &d, &up, v)
    }

    fn jacobian_u_tr_mul(&self, u: &DVector<f64>, y: &[f64], _mu: &DVector<f64>, v: &DMatrix<f64>) -> DMatrix<f64> {
        let (l, d, up) = self.jacobian_bands(u, y);
        let (l, d, up) = tridiag_transpose(&l, &d, &up);
        tridiag_mul(&l, &d, &up, v)
    }

    fn mesh(&self) -> Option<Vec<f64>> {
        Some(self.x.clone())
    }
}
