#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgrom_core::hdm::ModelProblem;

/// `(y, μ)` draws with `y ~ U[-1, 1]^{n_y}` and `μ ~ U[-1, 1]^{n_μ}`.
pub fn random_points(n_y: usize, n_mu: usize, n: usize, seed: u64) -> Vec<(Vec<f64>, DVector<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let y = (0..n_y).map(|_| rng.random_range(-1.0..=1.0)).collect();
            let mu = DVector::from_fn(n_mu, |_, _| rng.random_range(-1.0..=1.0));
            (y, mu)
        })
        .collect()
}

pub fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

/// Central differences of `v ↦ g(v)` in every coordinate direction.
pub fn fd_jacobian(x: &DVector<f64>, h: f64, g: impl Fn(&DVector<f64>) -> DVector<f64>) -> DMatrix<f64> {
    let m = g(x).len();
    let mut jac = DMatrix::zeros(m, x.len());
    for j in 0..x.len() {
        let mut p = x.clone();
        p[j] += h;
        let mut q = x.clone();
        q[j] -= h;
        jac.set_column(j, &((g(&p) - g(&q)) / (2.0 * h)));
    }
    jac
}

/// Scalar state `u = p(y) + μ_0` with `f = u`: `F(y, μ)` is the polynomial
/// `Π_j y_j^{a_j} + μ_0`, and `∇_μF = e_0`.
pub struct Monomial {
    pub powers: Vec<u32>,
    pub n_mu: usize,
}

impl Monomial {
    fn p(&self, y: &[f64]) -> f64 {
        y.iter().zip(&self.powers).map(|(&v, &a)| v.powi(a as i32)).product()
    }
}

impl ModelProblem for Monomial {
    fn name(&self) -> &str {
        "monomial"
    }
    fn n_u(&self) -> usize {
        1
    }
    fn n_y(&self) -> usize {
        self.powers.len()
    }
    fn n_mu(&self) -> usize {
        self.n_mu
    }
    fn residual(&self, u: &DVector<f64>, y: &[f64], mu: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, u[0] - self.p(y) - mu[0])
    }
    fn jacobian_u(&self, _u: &DVector<f64>, _y: &[f64], _mu: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, 1.0)
    }
    fn jacobian_mu(&self, _u: &DVector<f64>, _y: &[f64], _mu: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(1, self.n_mu, |_, j| if j == 0 { -1.0 } else { 0.0 })
    }
    fn qoi(&self, u: &DVector<f64>, _y: &[f64], _mu: &DVector<f64>) -> f64 {
        u[0]
    }
    fn qoi_du(&self, _u: &DVector<f64>, _y: &[f64], _mu: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, 1.0)
    }
    fn qoi_dmu(&self, _u: &DVector<f64>, _y: &[f64], _mu: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(self.n_mu)
    }
}
