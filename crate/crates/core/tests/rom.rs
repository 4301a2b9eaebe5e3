mod common;

use common::random_points;
use nalgebra::DVector;
use proptest::prelude::*;
use sgrom_core::hdm::{
    reduced_objective, solve_adjoint, solve_primal, BurgersControl, BurgersParams, LinearDiffusion, ModelProblem,
    NewtonOptions,
};
use sgrom_core::rom::{evaluate_rom, solve_rom_adjoint, solve_rom_primal, ReducedBasis, RomOptions, SnapshotKind};

fn burgers() -> BurgersControl {
    BurgersControl::new(BurgersParams {
        n_u: 63,
        reference_level: 3,
        ..BurgersParams::default()
    })
    .unwrap()
}

fn seeded_basis<P: ModelProblem + ?Sized>(p: &P, y: &[f64], mu: &DVector<f64>) -> ReducedBasis {
    let u = solve_primal(p, y, mu, None, &NewtonOptions::default()).unwrap().u;
    let mut b = ReducedBasis::new(p.n_u());
    b.append(&u, y, mu, SnapshotKind::Primal);
    b
}

#[test]
fn snapshots_are_interpolated() {
    let opts = RomOptions::default();
    let cases: [&dyn ModelProblem; 2] = [&LinearDiffusion::new(Default::default()), &burgers()];
    for p in cases {
        for (y, mu) in random_points(p.n_y(), p.n_mu(), 4, 11) {
            let mut basis = seeded_basis(p, &[0.0, 0.0], &DVector::from_element(p.n_mu(), 0.5));
            let sol = solve_primal(p, &y, &mu, None, &NewtonOptions::default()).unwrap();
            let adj = solve_adjoint(p, &sol.u, &y, &mu).unwrap();
            basis.append(&sol.u, &y, &mu, SnapshotKind::Primal);
            basis.append(&adj.lambda, &y, &mu, SnapshotKind::Adjoint);
            let r0 = p.residual(&DVector::zeros(p.n_u()), &y, &mu).norm();
            let rp = solve_rom_primal(p, &basis, &y, &mu, None, &opts).unwrap();
            assert!(
                rp.residual_norm <= 1e-8 * r0,
                "{} primal {}",
                p.name(),
                rp.residual_norm / r0
            );
            let ra = solve_rom_adjoint(p, &basis, &rp.q, &y, &mu, &opts).unwrap();
            let b = p.qoi_du(&basis.reconstruct(&rp.q), &y, &mu).norm();
            assert!(
                ra.residual_norm <= 1e-8 * b.max(1e-300),
                "{} adjoint {}",
                p.name(),
                ra.residual_norm / b
            );
        }
    }
}

#[test]
fn primal_residual_is_monotone_in_the_basis() {
    let p = burgers();
    let opts = RomOptions::default();
    let nodes = random_points(2, 8, 5, 21);
    let mut basis = seeded_basis(&p, &[0.0, 0.0], &DVector::from_element(8, 0.5));
    let mut last: Vec<f64> = nodes
        .iter()
        .map(|(y, mu)| solve_rom_primal(&p, &basis, y, mu, None, &opts).unwrap().residual_norm)
        .collect();
    let mut warm: Vec<DVector<f64>> = nodes
        .iter()
        .map(|(y, mu)| solve_rom_primal(&p, &basis, y, mu, None, &opts).unwrap().q)
        .collect();
    for (y, mu) in random_points(2, 8, 10, 22) {
        let u = solve_primal(&p, &y, &mu, None, &NewtonOptions::default()).unwrap().u;
        basis.append(&u, &y, &mu, SnapshotKind::Primal);
        for (j, (yn, mun)) in nodes.iter().enumerate() {
            let old = warm[j].len();
            let q0 = warm[j].clone().insert_rows(old, basis.dim() - old, 0.0);
            let now = solve_rom_primal(&p, &basis, yn, mun, Some(&q0), &opts).unwrap();
            assert!(
                now.residual_norm <= last[j] + 1e-12,
                "node {j}: {} > {}",
                now.residual_norm,
                last[j]
            );
            last[j] = now.residual_norm;
            warm[j] = now.q;
        }
    }
}

#[test]
fn full_basis_reproduces_the_full_order_model() {
    let p = LinearDiffusion::new(Default::default());
    let mut basis = ReducedBasis::new(p.n_u());
    for i in 0..p.n_u() {
        basis.append(
            &DVector::from_fn(p.n_u(), |k, _| if k == i { 1.0 } else { 0.0 }),
            &[0.0, 0.0],
            &DVector::zeros(8),
            SnapshotKind::Primal,
        );
    }
    assert_eq!(basis.dim(), p.n_u());
    let newton = NewtonOptions::default();
    for (y, mu) in random_points(2, 8, 3, 5) {
        let ev = evaluate_rom(&p, &basis, &y, &mu, None, &RomOptions::default()).unwrap();
        let f = reduced_objective(&p, &y, &mu, &newton).unwrap();
        assert!((ev.qoi - f).abs() <= 1e-10 * f.abs());
    }
}

#[test]
fn dependent_snapshots_are_dropped() {
    let mut b = ReducedBasis::new(4);
    let mu = DVector::zeros(1);
    let v = DVector::from_vec(vec![1.0, 2.0, 0.0, 0.0]);
    assert!(b.append(&v, &[0.0], &mu, SnapshotKind::Primal));
    assert!(!b.append(&(&v * 3.0), &[0.0], &mu, SnapshotKind::Adjoint));
    assert!(!b.append(&DVector::zeros(4), &[0.0], &mu, SnapshotKind::Adjoint));
    assert_eq!(b.dim(), 1);
    assert_eq!(b.provenance().len(), 3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn basis_stays_orthonormal(snaps in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 20), 1..25)) {
        let mut b = ReducedBasis::new(20);
        let mu = DVector::zeros(1);
        for s in &snaps {
            b.append(&DVector::from_column_slice(s), &[0.0], &mu, SnapshotKind::Primal);
        }
        prop_assert!(b.dim() <= snaps.len().min(20));
        prop_assert!(b.orthonormality_defect() <= 1e-12);
    }

    #[test]
    fn projection_is_idempotent(v in prop::collection::vec(-1.0f64..1.0, 12), w in prop::collection::vec(-1.0f64..1.0, 12)) {
        let mut b = ReducedBasis::new(12);
        let mu = DVector::zeros(1);
        b.append(&DVector::from_column_slice(&v), &[0.0], &mu, SnapshotKind::Primal);
        let x = DVector::from_column_slice(&w);
        let once = b.reconstruct(&b.project(&x));
        let twice = b.reconstruct(&b.project(&once));
        prop_assert!((once - twice).norm() <= 1e-12 * (1.0 + x.norm()));
    }
}
