use std::fs;
use std::path::Path;
use std::sync::Arc;

use hklab_core::experiment::{
    cached_kernel, emit_summary, run_experiment, CacheOutcome, ExperimentConfig, Grids, KernelConfig, KernelSpec,
    Perturbation, Tag, Tolerances,
};
use hklab_core::{build_graph, Error, GraphSpec};
use proptest::prelude::*;

fn config(tag: Tag, cache: &Path) -> ExperimentConfig {
    ExperimentConfig {
        tag,
        seed: 3,
        out: None,
        cache_dir: Some(cache.to_path_buf()),
        graph: GraphSpec::Gasket { level: 4 },
        kernel: KernelConfig {
            spec: KernelSpec::DirectHeavyTail { beta: 1.5 },
            perturbation: None,
        },
        grids: Grids {
            samples: 4,
            steps: vec![1, 2, 4, 8],
            max_distance: 4,
            radii: Some(vec![2, 4]),
            ..Grids::default()
        },
        tolerances: Tolerances::default(),
    }
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn identities_run_passes_and_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let cache = tmp.path().join("cache");
    let c = config(Tag::Identities, &cache);
    let first = run_experiment(&c, &tmp.path().join("a")).unwrap();
    assert!(first.all_checks_pass(), "{:?}", first.checks);
    assert!(tmp.path().join("a/summary.json").is_file());
    assert!(tmp.path().join("a/identities.csv").is_file());
    run_experiment(&c, &tmp.path().join("b")).unwrap();
    assert_eq!(read_all(&tmp.path().join("a")), read_all(&tmp.path().join("b")));
}

#[test]
fn stale_cache_files_are_replaced() {
    let tmp = tempfile::tempdir().unwrap();
    let g = Arc::new(build_graph(&GraphSpec::Gasket { level: 3 }).unwrap());
    let spec = KernelConfig {
        spec: KernelSpec::DirectHeavyTail { beta: 1.1 },
        perturbation: Some(Perturbation { seed: 4, amplitude: 1.5 }),
    };
    let (fresh, fp, outcome) = cached_kernel(&g, &spec, Some(tmp.path())).unwrap();
    assert_eq!(outcome, CacheOutcome::Built);
    let (_, _, outcome) = cached_kernel(&g, &spec, Some(tmp.path())).unwrap();
    assert_eq!(outcome, CacheOutcome::Hit);

    let path = tmp.path().join(format!("{fp}.hklb"));
    fs::write(&path, b"not a kernel").unwrap();
    let (reloaded, _, outcome) = cached_kernel(&g, &spec, Some(tmp.path())).unwrap();
    assert_eq!(outcome, CacheOutcome::Replaced);
    assert_eq!(reloaded.to_dense(), fresh.to_dense());
    let (_, _, outcome) = cached_kernel(&g, &spec, Some(tmp.path())).unwrap();
    assert_eq!(outcome, CacheOutcome::Hit);
}

#[test]
fn nearest_neighbor_kernels_skip_the_cache() {
    let tmp = tempfile::tempdir().unwrap();
    let g = Arc::new(build_graph(&GraphSpec::Gasket { level: 3 }).unwrap());
    let spec = KernelConfig {
        spec: KernelSpec::NearestNeighbor { lazy: 0.5 },
        perturbation: None,
    };
    let (_, _, outcome) = cached_kernel(&g, &spec, Some(tmp.path())).unwrap();
    assert_eq!(outcome, CacheOutcome::Skipped);
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 0);
}

#[test]
fn bad_parameters_map_to_exit_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = config(Tag::Hkp, tmp.path());
    c.kernel.spec = KernelSpec::DirectHeavyTail { beta: 2.5 };
    assert_eq!(run_experiment(&c, &tmp.path().join("out")).unwrap_err().exit_code(), 2);

    let mut c = config(Tag::Identities, tmp.path());
    c.kernel.spec = KernelSpec::NearestNeighbor { lazy: 1.5 };
    assert_eq!(run_experiment(&c, &tmp.path().join("out")).unwrap_err().exit_code(), 2);

    let mut c = config(Tag::Hkp, tmp.path());
    c.grids.sources = vec![10_000];
    assert_eq!(run_experiment(&c, &tmp.path().join("out")).unwrap_err().exit_code(), 2);

    let err = ExperimentConfig::from_toml_str("tag = \"hkp\"\n[graph]\ngenerator = \"torus\"\n").unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn seeds_beyond_the_toml_range_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = config(Tag::Identities, tmp.path());
    c.seed = u64::MAX;
    assert_eq!(c.validate().unwrap_err().exit_code(), 2);
}

#[test]
fn exit_codes_follow_the_error_kind() {
    assert_eq!(Error::NumericalFailure("x".into()).exit_code(), 3);
    assert_eq!(Error::ResourceLimit("x".into()).exit_code(), 3);
    assert_eq!(Error::InvariantViolation("x".into()).exit_code(), 4);
    assert_eq!(Error::BoundaryContamination("x".into()).exit_code(), 2);
    assert_eq!(Error::InvalidGeometry("x".into()).exit_code(), 2);
}

#[test]
fn summaries_merge_into_one_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cache = tmp.path().join("cache");
    let a = run_experiment(&config(Tag::Identities, &cache), &tmp.path().join("a")).unwrap();
    let b = run_experiment(&config(Tag::Volume, &cache), &tmp.path().join("b")).unwrap();
    let (doc, csv) = emit_summary(&[a, b]).unwrap();
    assert_eq!(doc.experiments.len(), 2);
    assert!(csv.starts_with("tag,report,series,x,y"));
    let json = serde_json::to_string(&doc).unwrap();
    assert!(json.contains("identities") && json.contains("volume"));
}

fn arb_config() -> impl Strategy<Value = ExperimentConfig> {
    (
        prop::sample::select(vec![Tag::Hkp, Tag::Csj, Tag::Nash, Tag::Exit, Tag::Davies, Tag::Identities]),
        0..=i64::MAX as u64,
        0.1f64..1.9,
        prop::option::of((0..=i64::MAX as u64, 1.0f64..4.0)),
        prop::collection::vec(1u64..512, 1..6),
        prop::option::of(prop::collection::vec(1u32..64, 1..4)),
        1000u64..100_000,
    )
        .prop_map(|(tag, seed, beta, perturb, steps, radii, trials)| ExperimentConfig {
            tag,
            seed,
            out: None,
            cache_dir: None,
            graph: GraphSpec::Gasket { level: 5 },
            kernel: KernelConfig {
                spec: KernelSpec::Subordinated { beta, n_terms: None },
                perturbation: perturb.map(|(seed, amplitude)| Perturbation { seed, amplitude }),
            },
            grids: Grids {
                steps,
                radii,
                trials,
                ..Grids::default()
            },
            tolerances: Tolerances::default(),
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn configs_round_trip_through_toml_and_json(c in arb_config()) {
        let toml = c.to_toml_string().unwrap();
        prop_assert_eq!(&ExperimentConfig::from_toml_str(&toml).unwrap(), &c);
        let json = serde_json::to_string(&c).unwrap();
        prop_assert_eq!(&ExperimentConfig::from_json_str(&json).unwrap(), &c);
        prop_assert!(c.validate().is_ok());
    }

    #[test]
    fn config_hash_ignores_output_locations(c in arb_config(), dir in "[a-z]{1,8}") {
        let mut moved = c.clone();
        moved.out = Some(dir.clone().into());
        moved.cache_dir = Some(dir.into());
        prop_assert_eq!(moved.hash(), c.hash());
        let mut reseeded = c.clone();
        reseeded.seed = c.seed ^ 1;
        prop_assert_ne!(reseeded.hash(), c.hash());
    }
}
