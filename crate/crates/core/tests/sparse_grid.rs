use proptest::prelude::*;
use sgrom_core::sparse_grid::{
    cc_node_count, cc_rule, key_coordinate, MultiIndex, MultiIndexSet, NodeKey, SparseQuadrature,
};

/// `∫ Π y_j^{a_j} dy / 2^d` over `[-1, 1]^d`.
fn uniform_moment(powers: &[u32]) -> f64 {
    powers
        .iter()
        .map(|&a| if a % 2 == 1 { 0.0 } else { 1.0 / (a as f64 + 1.0) })
        .product()
}

fn monomial(coords: &[f64], powers: &[u32]) -> f64 {
    coords.iter().zip(powers).map(|(&y, &a)| y.powi(a as i32)).product()
}

/// Direct tensorization of the one-dimensional rules, no combination.
fn direct_tensor(levels: &[u32]) -> Vec<(Vec<f64>, f64)> {
    let rules: Vec<_> = levels.iter().map(|&l| cc_rule(l).unwrap()).collect();
    let mut out = vec![(Vec::new(), 1.0)];
    for rule in &rules {
        let mut next = Vec::new();
        for (coords, w) in &out {
            for (x, v) in rule.nodes.iter().zip(&rule.weights) {
                let mut c: Vec<f64> = coords.clone();
                c.push(*x);
                next.push((c, w * v));
            }
        }
        out = next;
    }
    out
}

/// Grows an admissible set by inserting neighbors chosen by `picks`.
fn grow(dim: usize, picks: &[usize]) -> MultiIndexSet {
    let mut set = MultiIndexSet::unit(dim).with_max_level(6);
    for &p in picks {
        let n: Vec<MultiIndex> = set
            .neighbors()
            .unwrap()
            .into_iter()
            .filter(|i| i.max_level() <= set.max_level())
            .collect();
        if n.is_empty() {
            break;
        }
        set.insert_neighbor(n[p % n.len()].clone()).unwrap();
    }
    set
}

#[test]
fn rectangular_sets_match_direct_tensor_rules() {
    for a in 1..=4 {
        for b in 1..=4 {
            let q = SparseQuadrature::assemble(&MultiIndexSet::rectangular(&[a, b]).unwrap()).unwrap();
            let direct = direct_tensor(&[a, b]);
            let mut nonzero = 0;
            for (coords, w) in &direct {
                let key = NodeKey::from_coords(coords).unwrap();
                let got = q.get(&key).map_or(0.0, |p| p.weight);
                assert!((got - w).abs() <= 1e-12, "({a},{b}) at {coords:?}: {got} vs {w}");
                nonzero += 1;
            }
            assert_eq!(q.iter().filter(|(_, p)| p.weight.abs() > 1e-12).count(), nonzero);
        }
    }
}

#[test]
fn node_counts_follow_the_doubling_rule() {
    assert_eq!(cc_node_count(1), 1);
    assert_eq!(cc_node_count(2), 3);
    assert_eq!(cc_node_count(5), 17);
}

#[test]
fn key_coordinates_reproduce_rule_nodes() {
    for level in 1..=8 {
        let rule = cc_rule(level).unwrap();
        for x in &rule.nodes {
            let key = NodeKey::from_coords(&[*x]).unwrap();
            assert!((key_coordinate(key.positions()[0]) - x).abs() <= 1e-15);
        }
    }
}

#[test]
fn isotropic_rules_integrate_moments() {
    for level in 1..=5u32 {
        let q = SparseQuadrature::assemble(&MultiIndexSet::rectangular(&[level, level]).unwrap()).unwrap();
        let m = cc_node_count(level) as u32;
        let exact_degree = if m % 2 == 1 { m } else { m - 1 };
        for a in 0..=exact_degree {
            for b in 0..=exact_degree {
                let v = q
                    .integrate(|_, y| Ok::<_, std::convert::Infallible>(monomial(y, &[a, b])))
                    .unwrap();
                assert!(
                    (v - uniform_moment(&[a, b])).abs() <= 1e-10,
                    "level {level} powers ({a},{b})"
                );
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn grown_sets_stay_admissible(dim in 1usize..4, picks in prop::collection::vec(0usize..100, 0..12)) {
        let set = grow(dim, &picks);
        prop_assert!(set.is_admissible());
        for n in set.neighbors().unwrap() {
            prop_assert!(!set.contains(&n));
            for j in 0..dim {
                if let Some(b) = n.backward(j) {
                    prop_assert!(set.contains(&b));
                }
            }
        }
    }

    #[test]
    fn weights_sum_to_one(dim in 1usize..4, picks in prop::collection::vec(0usize..100, 0..12)) {
        let q = SparseQuadrature::assemble(&grow(dim, &picks)).unwrap();
        prop_assert!((q.weight_sum() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn exact_on_each_index_polynomial_space(
        dim in 1usize..4,
        picks in prop::collection::vec(0usize..100, 0..12),
        which in 0usize..1000,
        raw in prop::collection::vec(0u32..40, 3),
    ) {
        let set = grow(dim, &picks);
        let idx: Vec<&MultiIndex> = set.iter().collect();
        let i = idx[which % idx.len()];
        let powers: Vec<u32> = i
            .levels()
            .iter()
            .zip(&raw)
            .map(|(&l, &r)| r % (cc_node_count(l) as u32))
            .collect();
        let q = SparseQuadrature::assemble(&set).unwrap();
        let v = q.integrate(|_, y| Ok::<_, std::convert::Infallible>(monomial(y, &powers))).unwrap();
        prop_assert!((v - uniform_moment(&powers)).abs() <= 1e-11, "{} {:?}: {}", i, powers, v);
    }

    #[test]
    fn set_text_round_trips(dim in 1usize..4, picks in prop::collection::vec(0usize..100, 0..12)) {
        let set = grow(dim, &picks);
        let back = MultiIndexSet::from_text(&set.to_text()).unwrap();
        prop_assert_eq!(back.iter().collect::<Vec<_>>(), set.iter().collect::<Vec<_>>());
    }

    #[test]
    fn node_keys_round_trip(levels in prop::collection::vec(1u32..7, 1..4)) {
        let q = SparseQuadrature::tensor(&levels).unwrap();
        for (key, p) in q.iter() {
            prop_assert_eq!(&NodeKey::from_coords(&p.coords).unwrap(), key);
            prop_assert_eq!(key.coords(), p.coords.clone());
        }
    }
}
