use std::sync::Arc;

use hklab_core::dirichlet::{
    dirichlet_form, energy_measure, killed_kernel, resolvent_with_stats, verify_form_identities, VertexFunction,
};
use hklab_core::kernel::{heavy_tailed_kernel, nearest_neighbor_kernel};
use hklab_core::{build_graph, GraphSpec, WeightedGraph};
use proptest::prelude::*;

/// A path with random conductances plus a few random chords.
fn random_graph(n: usize, weights: &[f64], chords: &[(usize, usize)]) -> Arc<WeightedGraph> {
    let mut edges: Vec<(usize, usize, f64)> = (0..n - 1).map(|i| (i, i + 1, weights[i % weights.len()])).collect();
    for &(a, b) in chords {
        let (a, b) = (a % n, b % n);
        let (a, b) = (a.min(b), a.max(b));
        if b > a + 1 && !edges.iter().any(|e| e.0 == a && e.1 == b) {
            edges.push((a, b, weights[(a + b) % weights.len()]));
        }
    }
    let positions = (0..n).map(|i| [i as f64, 0.0]).collect();
    Arc::new(WeightedGraph::from_edges(n, edges, vec![0, n - 1], positions, None, 1.0, 2.0).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn identities_hold_on_random_weighted_graphs(
        n in 6usize..30,
        weights in prop::collection::vec(0.2f64..5.0, 1..8),
        chords in prop::collection::vec((0usize..30, 0usize..30), 0..10),
        beta in 0.3f64..1.9,
        seed in any::<u64>(),
    ) {
        let g = random_graph(n, &weights, &chords);
        let k = heavy_tailed_kernel(g, beta).unwrap();
        let report = verify_form_identities(&k, 6, seed).unwrap();
        prop_assert!(report.max_identity_error() <= 1e-10, "{:?}", report.identity_errors);
        prop_assert!(report.min_slack() >= -1e-12, "{:?}", report.inequality_slacks);
    }

    #[test]
    fn energy_measure_is_nonnegative_and_sums_to_the_form(
        values in prop::collection::vec(-3.0f64..3.0, 25),
        radius in 0.0f64..6.0,
    ) {
        let g = Arc::new(build_graph(&GraphSpec::Lattice { dim: 2, side: 5 }).unwrap());
        let k = heavy_tailed_kernel(Arc::clone(&g), 1.0).unwrap();
        let f = VertexFunction::new(&g, values).unwrap();
        let full = energy_measure(&k, &f, &f, None).unwrap();
        let truncated = energy_measure(&k, &f, &f, Some(radius)).unwrap();
        for (a, b) in full.values().iter().zip(truncated.values()) {
            prop_assert!(*b >= -1e-15);
            prop_assert!(*b <= *a + 1e-12);
        }
        let total: f64 = full.values().iter().sum();
        let form = dirichlet_form(&k, &f, &f).unwrap();
        prop_assert!((total - form).abs() <= 1e-10 * total.abs().max(1.0));
    }

    #[test]
    fn killed_resolvent_is_positive_and_submarkov(lambda in 0.01f64..5.0, radius in 2.0f64..6.0) {
        let g = Arc::new(build_graph(&GraphSpec::Gasket { level: 4 }).unwrap());
        let k = nearest_neighbor_kernel(Arc::clone(&g), 0.5).unwrap();
        let x = g.deepest_vertex();
        let ball = g.ball(x, radius).unwrap();
        let one = VertexFunction::constant(&g, 1.0);
        let (u, _) = resolvent_with_stats(&k, &ball, lambda, &one).unwrap();
        for (y, v) in u.values().iter().enumerate() {
            if ball.contains(&y) {
                prop_assert!(*v > 0.0);
                // G = (I − K_D/(1+λ))^{-1}, so G1 ≤ (1+λ)/λ
                let scaled = lambda / (1.0 + lambda) * v;
                prop_assert!(scaled <= 1.0 + 1e-9, "scaled G1 = {scaled} at {y}");
            } else {
                prop_assert_eq!(*v, 0.0);
            }
        }
    }
}

#[test]
fn killed_kernel_is_supported_on_the_set() {
    let g = Arc::new(build_graph(&GraphSpec::Gasket { level: 3 }).unwrap());
    let k = heavy_tailed_kernel(Arc::clone(&g), 1.5).unwrap();
    let set = g.ball(g.deepest_vertex(), 2.0).unwrap();
    let killed = killed_kernel(&k, &set).unwrap();
    for x in 0..g.n_vertices() {
        for y in 0..g.n_vertices() {
            let v = killed.value(x, y);
            if set.contains(&x) && set.contains(&y) {
                assert_eq!(v, k.value(x, y));
            } else {
                assert_eq!(v, 0.0);
            }
        }
    }
    assert!(killed.row_masses().iter().all(|m| *m <= 1.0 + 1e-12));
}

#[test]
fn constants_have_zero_energy() {
    let g = Arc::new(build_graph(&GraphSpec::Vicsek { level: 2 }).unwrap());
    let k = heavy_tailed_kernel(Arc::clone(&g), 1.0).unwrap();
    let c = VertexFunction::constant(&g, 2.5);
    assert!(dirichlet_form(&k, &c, &c).unwrap().abs() < 1e-12);
}

#[test]
fn mismatched_lengths_are_rejected() {
    let g = Arc::new(build_graph(&GraphSpec::Lattice { dim: 1, side: 8 }).unwrap());
    let k = heavy_tailed_kernel(g, 1.0).unwrap();
    let short = VertexFunction::from_values(vec![1.0; 5]).unwrap();
    assert!(dirichlet_form(&k, &short, &short).is_err());
    assert!(energy_measure(&k, &short, &short, None).is_err());
}
