mod common;

use common::{random_points, rel_err, Monomial};
use nalgebra::{DMatrix, DVector};
use sgrom_core::adapt::AdaptOptions;
use sgrom_core::hdm::{
    adjoint_gradient, reduced_objective, solve_adjoint, solve_primal, BurgersControl, BurgersParams, LinearDiffusion,
    ModelProblem, NewtonOptions, ScaledQoi,
};
use sgrom_core::oracle::{
    cost_metric, fd_gradient, sg_iso_baseline, tensor_reference, validate_bounds, BaselineOptions, BaselineStatus,
    CostModel,
};
use sgrom_core::rom::{ReducedBasis, RomOptions, SnapshotKind};
use sgrom_core::sparse_grid::{cc_node_count, MultiIndexSet, SparseQuadrature};
use sgrom_core::trust_opt::{tr_init, TrustRegionConfig};
use sgrom_core::Counters;

fn burgers() -> BurgersControl {
    BurgersControl::new(BurgersParams {
        n_u: 63,
        reference_level: 3,
        ..BurgersParams::default()
    })
    .unwrap()
}

fn full_basis(n: usize, n_mu: usize) -> ReducedBasis {
    let mut b = ReducedBasis::new(n);
    for i in 0..n {
        let e = DVector::from_fn(n, |k, _| if k == i { 1.0 } else { 0.0 });
        b.append(&e, &[0.0, 0.0], &DVector::zeros(n_mu), SnapshotKind::Primal);
    }
    b
}

fn quadratic_minimizer(p: &LinearDiffusion, alpha: f64) -> DVector<f64> {
    let (u, y, mu) = (DVector::zeros(p.n_u()), [0.0], DVector::zeros(p.n_mu()));
    let b = p
        .jacobian_u(&u, &y, &mu)
        .lu()
        .solve(&(-p.jacobian_mu(&u, &y, &mu)))
        .unwrap();
    let h = 1.0 / (p.n_u() as f64 + 1.0);
    let lhs = b.transpose() * &b * h + DMatrix::identity(p.n_mu(), p.n_mu()) * alpha;
    lhs.lu().solve(&(b.transpose() * p.target() * h)).unwrap()
}

#[test]
fn fd_gradient_agrees_with_the_adjoint_gradient() {
    let p = LinearDiffusion::new(Default::default());
    let newton = NewtonOptions::default();
    for (y, mu) in random_points(2, 8, 20, 17) {
        let u = solve_primal(&p, &y, &mu, None, &newton).unwrap().u;
        let lambda = solve_adjoint(&p, &u, &y, &mu).unwrap().lambda;
        let g = adjoint_gradient(&p, &lambda, &u, &y, &mu).unwrap();
        let fd = fd_gradient(&p, &y, &mu, 1e-5, &newton).unwrap();
        assert!(rel_err(&fd, &g) <= 1e-6, "{:e}", rel_err(&fd, &g));
    }
}

#[test]
fn tensor_reference_is_exact_for_low_degree_monomials() {
    let newton = NewtonOptions::default();
    let mu = DVector::from_vec(vec![0.25, -1.0]);
    for level in 1..=4 {
        // symmetric rules with an odd node count are exact one degree higher
        let degree = cc_node_count(level) as u32;
        for a in 0..=degree {
            for b in 0..=degree.min(3) {
                let p = Monomial {
                    powers: vec![a, b],
                    n_mu: 2,
                };
                let r = tensor_reference(&p, &mu, level, &newton).unwrap();
                let moment = |k: u32| if k % 2 == 1 { 0.0 } else { 1.0 / (k as f64 + 1.0) };
                let exact = moment(a) * moment(b) + mu[0];
                assert!(
                    (r.value - exact).abs() <= 1e-12,
                    "level {level} ({a},{b}): {} vs {exact}",
                    r.value
                );
                assert!((r.gradient[0] - 1.0).abs() <= 1e-12 && r.gradient[1].abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn tensor_reference_matches_rectangular_sparse_grid() {
    let p = burgers();
    let newton = NewtonOptions::default();
    let mu = DVector::from_element(8, 0.6);
    let r = tensor_reference(&p, &mu, 3, &newton).unwrap();
    let quad = SparseQuadrature::assemble(&MultiIndexSet::rectangular(&[3, 3]).unwrap()).unwrap();
    let v = quad.integrate(|_, y| reduced_objective(&p, y, &mu, &newton)).unwrap();
    assert!((r.value - v).abs() <= 1e-12 * v.abs(), "{} vs {v}", r.value);
    assert_eq!(r.nodes, 25);
}

#[test]
fn baseline_solves_the_deterministic_quadratic() {
    let p = LinearDiffusion::deterministic(63, 8, 0.1);
    let star = quadratic_minimizer(&p, 0.1);
    let opts = BaselineOptions {
        level: 2,
        gtol: 1e-10,
        ..BaselineOptions::default()
    };
    let out = sg_iso_baseline(&p, &DVector::zeros(8), &opts, &NewtonOptions::default()).unwrap();
    assert_eq!(out.status, BaselineStatus::Converged);
    assert!((DVector::from_vec(out.mu.clone()) - &star).norm() <= 1e-6);
    assert_eq!(out.counters.rom_primal + out.counters.rom_adjoint, 0);

    let still = sg_iso_baseline(
        &p,
        &star,
        &BaselineOptions { gtol: 1e-8, ..opts },
        &NewtonOptions::default(),
    )
    .unwrap();
    assert_eq!(still.history.len(), 1);
    assert_eq!(still.mu, star.iter().copied().collect::<Vec<_>>());
    assert_eq!(still.counters.hdm_primal, still.nodes as u64);
}

#[test]
fn full_basis_reproduces_full_order_values() {
    let p = LinearDiffusion::new(Default::default());
    let report = validate_bounds(
        &p,
        &full_basis(p.n_u(), 8),
        10,
        1,
        &RomOptions::default(),
        &NewtonOptions::default(),
    )
    .unwrap();
    assert_eq!(report.samples.len(), 10);
    for s in &report.samples {
        assert!(
            s.residual <= 1e-10 && s.qoi_error <= 1e-12 && s.gradient_error <= 1e-10,
            "{s:?}"
        );
    }
}

#[test]
fn bound_ratios_scale_with_the_quantity_of_interest() {
    let opts = AdaptOptions::default();
    let mu0 = DVector::from_element(8, 1.0);
    let state = tr_init(&burgers(), &TrustRegionConfig::default(), &opts, &mu0).unwrap();
    let basis = state.pair.basis();
    let base = validate_bounds(&burgers(), basis, 12, 9, &opts.rom, &opts.newton).unwrap();
    let scaled = ScaledQoi {
        inner: burgers(),
        scale: 10.0,
    };
    let big = validate_bounds(&scaled, basis, 12, 9, &opts.rom, &opts.newton).unwrap();
    assert_eq!(base.excluded, 0);
    assert!(base.qoi.ratios.iter().all(|r| r.is_finite() && *r > 0.0));
    for (a, b) in base.qoi.ratios.iter().zip(&big.qoi.ratios) {
        assert!((b / a - 10.0).abs() <= 1e-6, "{a} {b}");
    }
}

#[test]
fn no_samples_gives_empty_estimates() {
    let p = LinearDiffusion::new(Default::default());
    let mut basis = ReducedBasis::new(p.n_u());
    basis.append(
        &DVector::from_element(p.n_u(), 1.0),
        &[0.0, 0.0],
        &DVector::zeros(8),
        SnapshotKind::Primal,
    );
    let report = validate_bounds(&p, &basis, 0, 4, &RomOptions::default(), &NewtonOptions::default()).unwrap();
    assert!(report.samples.is_empty() && report.qoi.is_empty() && report.gradient.is_empty());
}

#[test]
fn cost_model_weights_queries() {
    let c = Counters {
        hdm_primal: 10,
        hdm_adjoint: 20,
        rom_primal: 1000,
        rom_adjoint: 500,
        ..Counters::default()
    };
    let model = CostModel::default();
    assert_eq!(model.cost(&c, f64::INFINITY), 14.0);
    assert_eq!(model.cost(&c, 100.0), 14.0 + 1100.0 / 100.0);
    assert_eq!(cost_metric(&c, 1.0), model.cost(&c, 1.0));
}
