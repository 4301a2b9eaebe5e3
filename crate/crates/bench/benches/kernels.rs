use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use nalgebra::DVector;
use sgrom_core::hdm::{solve_adjoint, solve_primal, BurgersControl, ModelProblem, NewtonOptions};
use sgrom_core::rom::{evaluate_rom, ReducedBasis, RomOptions, SnapshotKind};
use sgrom_core::sparse_grid::{MultiIndexSet, SparseQuadrature};

fn quadrature(c: &mut Criterion) {
    let plane = MultiIndexSet::rectangular(&[5, 5]).unwrap();
    let cube = MultiIndexSet::rectangular(&[3, 3, 3, 3]).unwrap();
    c.bench_function("assemble_rectangular_5x5", |b| {
        b.iter(|| SparseQuadrature::assemble(black_box(&plane)).unwrap())
    });
    c.bench_function("assemble_rectangular_3x3x3x3", |b| {
        b.iter(|| SparseQuadrature::assemble(black_box(&cube)).unwrap())
    });
}

fn full_order(c: &mut Criterion) {
    let p = BurgersControl::new(Default::default()).unwrap();
    let opts = NewtonOptions::default();
    let (y, mu) = (vec![0.3, -0.4], DVector::from_element(p.n_mu(), 1.0));
    c.bench_function("burgers_primal_solve", |b| {
        b.iter(|| solve_primal(&p, black_box(&y), &mu, None, &opts).unwrap())
    });
}

fn reduced_order(c: &mut Criterion) {
    let p = BurgersControl::new(Default::default()).unwrap();
    let newton = NewtonOptions::default();
    let mu = DVector::from_element(p.n_mu(), 1.0);
    let mut basis = ReducedBasis::new(p.n_u());
    for y in [[0.0, 0.0], [0.8, -0.5], [-0.6, 0.9], [0.2, 0.2]] {
        let u = solve_primal(&p, &y, &mu, None, &newton).unwrap().u;
        let lambda = solve_adjoint(&p, &u, &y, &mu).unwrap().lambda;
        basis.append(&u, &y, &mu, SnapshotKind::Primal);
        basis.append(&lambda, &y, &mu, SnapshotKind::Adjoint);
    }
    let opts = RomOptions::default();
    let y = [0.3, -0.4];
    c.bench_function("burgers_rom_evaluate", |b| {
        b.iter(|| evaluate_rom(&p, &basis, black_box(&y), &mu, None, &opts).unwrap())
    });
}

criterion_group!(benches, quadrature, full_order, reduced_order);
criterion_main!(benches);
