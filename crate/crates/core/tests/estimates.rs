use std::sync::{Arc, OnceLock};

use hklab_core::cutoff::TestFunction;
use hklab_core::davies::{meyer_split, perturbed_kernel, perturbed_semigroup, total_jump_rate, verify_davies_inequality};
use hklab_core::dirichlet::VertexFunction;
use hklab_core::estimates::{
    ball_family, hkp_envelope, mc_exit_time, nash_constant, ratio_spread, sub_gaussian_envelope,
};
use hklab_core::kernel::{heavy_tailed_kernel, inner, nearest_neighbor_kernel, propagate_rows, semigroup_rows};
use hklab_core::{build_graph, GraphSpec, MarkovKernel};
use ndarray::ArrayView1;
use proptest::prelude::*;

fn gasket6() -> &'static MarkovKernel {
    static K: OnceLock<MarkovKernel> = OnceLock::new();
    K.get_or_init(|| {
        let g = Arc::new(build_graph(&GraphSpec::Gasket { level: 6 }).unwrap());
        heavy_tailed_kernel(g, 1.5).unwrap()
    })
}

fn gasket4_small() -> &'static MarkovKernel {
    static K: OnceLock<MarkovKernel> = OnceLock::new();
    K.get_or_init(|| {
        let g = Arc::new(build_graph(&GraphSpec::Gasket { level: 4 }).unwrap());
        let k = heavy_tailed_kernel(g, 1.2).unwrap();
        meyer_split(&k, 3.0).unwrap().0
    })
}

#[test]
fn lazy_walk_on_the_line_decays_like_inverse_square_root() {
    let g = Arc::new(build_graph(&GraphSpec::Lattice { dim: 1, side: 1025 }).unwrap());
    let k = nearest_neighbor_kernel(Arc::clone(&g), 0.5).unwrap();
    let x = g.deepest_vertex();
    let mut scaled = Vec::new();
    propagate_rows(&k, &[x], 256, |n, rows| {
        if n >= 4 {
            scaled.push(rows[[0, x]] * (n as f64).sqrt());
        }
    });
    let lo = scaled.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = scaled.iter().cloned().fold(0.0, f64::max);
    assert!(lo > 0.0 && hi / lo < 1.2, "range [{lo}, {hi}]");
}

#[test]
fn discrete_and_continuous_kernels_agree_up_to_constants() {
    let k = gasket6();
    let g = k.graph();
    let x = g.deepest_vertex();
    let dist = g.distances_from(x).unwrap();
    let near: Vec<usize> = (0..k.n()).filter(|&y| dist[y] <= 12).collect();
    let mut discrete = Vec::new();
    propagate_rows(k, &[x], 32, |n, rows| {
        if n.is_power_of_two() && n >= 4 {
            discrete.push((n, rows.row(0).to_owned()));
        }
    });
    for (n, row) in discrete {
        let cont = semigroup_rows(k, &[x], n as f64, 1e-12).unwrap();
        for &y in &near {
            let spread = ratio_spread(row[y], cont[[0, y]]);
            assert!(spread <= 4.0, "n={n} y={y}: {} vs {}", row[y], cont[[0, y]]);
        }
    }
}

#[test]
fn exit_time_estimates_ignore_the_thread_count() {
    let k = gasket6();
    let x = k.graph().deepest_vertex();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let rep = pool.install(|| mc_exit_time(k, x, 8, &[0.1, 0.5], 2000, 42).unwrap());
        serde_json::to_string(&rep).unwrap()
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn exit_time_rejects_small_trial_counts() {
    let k = gasket6();
    assert!(mc_exit_time(k, k.graph().deepest_vertex(), 8, &[0.5], 999, 1).is_err());
}

#[test]
fn meyer_large_jump_rate_scales_like_a_power() {
    let k = gasket6();
    let beta = k.nominal_beta();
    let scaled: Vec<f64> = [4.0, 8.0, 16.0]
        .iter()
        .map(|&l| {
            let (_, large) = meyer_split(k, l).unwrap();
            total_jump_rate(&large) * f64::powf(l, beta)
        })
        .collect();
    for w in scaled.windows(2) {
        assert!(ratio_spread(w[0], w[1]) <= 2.0, "{scaled:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn envelopes_decrease_with_distance(
        n in 1u64..10_000,
        d in 0u64..500,
        beta in 0.2f64..2.3,
        df in 1.0f64..2.0,
    ) {
        let near = hkp_envelope(n, d, df, beta);
        let far = hkp_envelope(n, d + 1, df, beta);
        prop_assert!(far <= near);
        prop_assert!(near <= hkp_envelope(n, 0, df, beta));
        let dw = 2.0 + beta.min(0.3);
        prop_assert!(sub_gaussian_envelope(n, d + 1, df, dw, 1.0) <= sub_gaussian_envelope(n, d, df, dw, 1.0));
    }

    #[test]
    fn nash_ratio_is_scale_invariant(scale in 0.01f64..100.0) {
        let k = gasket6();
        let g = k.graph();
        let family = ball_family(g, g.deepest_vertex(), &[2, 4, 8]).unwrap();
        let scaled: Vec<TestFunction> = family
            .iter()
            .map(|tf| TestFunction { id: tf.id.clone(), values: tf.values.map(|v| v * scale).unwrap() })
            .collect();
        let (df, beta) = (g.nominal_df(), k.nominal_beta());
        let a = nash_constant(k, df, beta, &family).unwrap();
        let b = nash_constant(k, df, beta, &scaled).unwrap();
        prop_assert!((a.constant - b.constant).abs() <= 1e-9 * a.constant);
        prop_assert_eq!(a.witness, b.witness);
    }

    #[test]
    fn perturbed_semigroups_are_dual(
        seed_values in prop::collection::vec(-1.0f64..1.0, 3),
        t in 0.1f64..4.0,
    ) {
        let k = gasket4_small();
        let g = k.graph();
        let n = k.n();
        let wave = |a: f64, b: f64| -> VertexFunction {
            VertexFunction::new(g, (0..n).map(|i| a * (i as f64 * b).sin()).collect()).unwrap()
        };
        let psi = wave(seed_values[0], 0.37);
        let neg = psi.map(|v| -v).unwrap();
        let f = wave(1.0, seed_values[1] + 1.3);
        let h = wave(1.0, seed_values[2] + 2.1);
        let pf = perturbed_semigroup(k, &psi, t, &f).unwrap();
        let ph = perturbed_semigroup(k, &neg, t, &h).unwrap();
        let mu = g.measure();
        let view = |v: &VertexFunction| ArrayView1::from(v.values()).to_owned();
        let lhs = inner(mu, view(&pf).view(), view(&h).view());
        let rhs = inner(mu, view(&f).view(), view(&ph).view());
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (lhs.abs() + rhs.abs()).max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn perturbed_kernels_are_positive(amp in 0.0f64..2.0, t in 0.1f64..8.0) {
        let k = gasket4_small();
        let g = k.graph();
        let psi = VertexFunction::new(g, (0..k.n()).map(|i| amp * (i as f64 * 0.11).cos()).collect()).unwrap();
        let m = perturbed_kernel(k, &psi, t).unwrap();
        prop_assert!(m.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn davies_inequality_holds_on_random_instances(
        fs in prop::collection::vec(0.0f64..1.0, 15),
        amp in 0.0f64..0.5,
        p in prop::sample::select(vec![1.0, 1.5, 2.0, 4.0]),
    ) {
        let k = gasket4_small();
        let g = k.graph();
        let n = k.n();
        let f = VertexFunction::new(g, (0..n).map(|i| fs[i % fs.len()]).collect()).unwrap();
        let psi = VertexFunction::new(g, (0..n).map(|i| amp * fs[(i * 7 + 3) % fs.len()]).collect()).unwrap();
        let rep = verify_davies_inequality(k, &f, &psi, p, 3.0).unwrap();
        prop_assert!(rep.holds, "{rep:?}");
    }
}
