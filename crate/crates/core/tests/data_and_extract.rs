use std::path::Path;

use proptest::collection::vec;
use proptest::prelude::*;

use involute::extract::{mc_mesh, FieldGrid, DEFAULT_BOUND};
use involute::geometry::vec3::norm;
use involute::scansynth::{
    build_dataset, decode_observation, encode_observation, primitive_sources, Dataset, DatasetConfig, Family,
    PartialObservation, Split, GT_VIEW,
};
use involute::Execution;

fn tiny(family: Family) -> DatasetConfig {
    DatasetConfig {
        family,
        instances: 3,
        views: 6,
        train_views: 4,
        test_views: 2,
        n_surface: 48,
        n_near: 40,
        n_uniform: 8,
        n_gt: 64,
        seed: 11,
        ..DatasetConfig::default()
    }
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["obs", "gt", "meshes"] {
        let mut names: Vec<_> = std::fs::read_dir(root.join(sub)).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        for p in names {
            out.push((p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()));
        }
    }
    out
}

#[test]
fn corpus_is_identical_across_execution_modes() {
    for family in [Family::Box, Family::Ellipsoid, Family::CapsuleCouch] {
        let cfg = tiny(family);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        build_dataset(&primitive_sources(&cfg), &cfg, a.path(), Execution::Sequential).unwrap();
        build_dataset(&primitive_sources(&cfg), &cfg, b.path(), Execution::default()).unwrap();
        assert_eq!(tree_bytes(a.path()), tree_bytes(b.path()), "{family}");
    }
}

#[test]
fn loaded_corpus_keeps_views_apart() {
    let cfg = tiny(Family::Box);
    let dir = tempfile::tempdir().unwrap();
    build_dataset(&primitive_sources(&cfg), &cfg, dir.path(), Execution::default()).unwrap();
    let ds = Dataset::load(dir.path(), Execution::default()).unwrap();
    assert_eq!(ds.split(Split::Train).len(), 12);
    assert_eq!(ds.split(Split::Test).len(), 6);
    for t in ds.split(Split::Test) {
        assert!(!ds.split(Split::Train).iter().any(|o| o.instance_id == t.instance_id && o.view_id == t.view_id));
        assert_ne!(t.view_id, GT_VIEW);
        assert!(t.udf.iter().all(|s| s[3] >= 0.0));
        assert!(t.surface.iter().all(|p| norm(*p) <= 1.0 + 1e-9));
    }
    assert_eq!(ds.num_instances(), 3);
}

fn point() -> impl Strategy<Value = [f64; 3]> {
    [-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn observation_encoding_round_trips(
        surface in vec(point(), 1..30),
        udf in vec((point(), 0.0f64..2.0), 0..30),
        cam in point(),
        ids in (0u32..100, 0u32..100),
    ) {
        let o = PartialObservation {
            instance_id: ids.0,
            view_id: ids.1,
            camera: cam,
            surface,
            udf: udf.into_iter().map(|(p, d)| [p[0], p[1], p[2], d]).collect(),
        };
        let bytes = encode_observation(&o);
        prop_assert_eq!(decode_observation(&bytes, Path::new("x.pudf")).unwrap(), o);
        let cut = decode_observation(&bytes[..bytes.len() - 1], Path::new("x.pudf"));
        prop_assert!(cut.is_err());
    }

    #[test]
    fn marching_cubes_is_execution_independent(
        c in point(),
        r in 0.2f64..0.6,
        eps in 0.06f64..0.15,
    ) {
        let c = c.map(|v| v * 0.3);
        let grid = FieldGrid::from_fn(24, DEFAULT_BOUND, |p| (norm([p[0] - c[0], p[1] - c[1], p[2] - c[2]]) - r).abs(), Execution::Sequential).unwrap();
        let s = mc_mesh(&grid, eps, Execution::Sequential).unwrap();
        let p = mc_mesh(&grid, eps, Execution::default()).unwrap();
        prop_assert_eq!(&s.mesh, &p.mesh);
        prop_assert!(!s.empty);
        prop_assert!(s.mesh.is_watertight());
    }
}
