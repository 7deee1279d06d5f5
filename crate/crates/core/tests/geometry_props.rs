use proptest::collection::vec;
use proptest::prelude::*;

use involute::geometry::vec3::dist2;
use involute::geometry::{
    chamfer_bi, chamfer_bi_with, chamfer_single, f1_score, fidelity, fps, mmd, nearest_all, nearest_brute, KdTree,
    Point3,
};
use involute::Execution;

fn point() -> impl Strategy<Value = Point3> {
    [-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0]
}

fn cloud(max: usize) -> impl Strategy<Value = Vec<Point3>> {
    vec(point(), 1..max)
}

fn rotate<T: Clone>(v: &[T], k: usize) -> Vec<T> {
    let k = k % v.len();
    v[k..].iter().chain(&v[..k]).cloned().collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chamfer_is_symmetric_and_zero_on_self(a in cloud(40), b in cloud(40)) {
        prop_assert!((chamfer_bi(&a, &b).unwrap() - chamfer_bi(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert_eq!(chamfer_bi(&a, &a).unwrap(), 0.0);
        prop_assert!(chamfer_single(&a, &b).unwrap() >= 0.0);
    }

    #[test]
    fn chamfer_ignores_point_order(a in cloud(40), b in cloud(40), k in 0usize..40) {
        let ra = rotate(&a, k);
        let rb = rotate(&b, k / 2);
        prop_assert!((chamfer_bi(&a, &b).unwrap() - chamfer_bi(&ra, &rb).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn single_sided_splits_bidirectional(a in cloud(40), b in cloud(40)) {
        let sum = chamfer_single(&a, &b).unwrap() + chamfer_single(&b, &a).unwrap();
        prop_assert!((chamfer_bi(&a, &b).unwrap() - sum).abs() < 1e-12);
        prop_assert_eq!(fidelity(&a, &b).unwrap(), chamfer_single(&a, &b).unwrap());
    }

    #[test]
    fn subset_has_zero_one_sided_distance(a in cloud(40), k in 1usize..40) {
        let sub: Vec<Point3> = a.iter().take(k).cloned().collect();
        prop_assert_eq!(chamfer_single(&sub, &a).unwrap(), 0.0);
    }

    #[test]
    fn kdtree_matches_linear_scan(refs in cloud(200), qs in cloud(50)) {
        let tree = KdTree::build(&refs);
        for q in qs {
            let (i, d) = tree.nearest(q);
            let (_, bd) = nearest_brute(&refs, q);
            prop_assert!((d - bd).abs() < 1e-12);
            prop_assert!((dist2(refs[i], q) - bd).abs() < 1e-12);
        }
    }

    #[test]
    fn execution_modes_agree(a in cloud(300), b in cloud(300)) {
        let s = nearest_all(&a, &b, Execution::Sequential);
        let p = nearest_all(&a, &b, Execution::default());
        prop_assert_eq!(s, p);
        prop_assert_eq!(
            chamfer_bi_with(&a, &b, Execution::Sequential).unwrap(),
            chamfer_bi_with(&a, &b, Execution::default()).unwrap()
        );
    }

    #[test]
    fn f1_is_bounded_and_perfect_on_identity(a in cloud(40), b in cloud(40), tau in 0.01f64..1.0) {
        let f = f1_score(&a, &b, tau).unwrap();
        prop_assert!((0.0..=100.0).contains(&f));
        prop_assert_eq!(f1_score(&a, &a, tau).unwrap(), 100.0);
    }

    #[test]
    fn fps_selects_distinct_points_starting_at_seed(a in cloud(60), frac in 0.0f64..1.0) {
        let k = 1 + ((a.len() - 1) as f64 * frac) as usize;
        let idx = fps(&a, k, 0).unwrap();
        prop_assert_eq!(idx.len(), k);
        prop_assert_eq!(idx[0], 0);
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), k);
        // Each prefix is itself an FPS result.
        prop_assert_eq!(&fps(&a, (k + 1) / 2, 0).unwrap()[..], &idx[..(k + 1) / 2]);
    }

    #[test]
    fn mmd_is_min_over_references(a in cloud(30), refs in vec(cloud(30), 1..6)) {
        let m = mmd(&a, &refs).unwrap();
        let best = refs.iter().map(|r| chamfer_bi(&a, r).unwrap()).fold(f64::INFINITY, f64::min);
        prop_assert_eq!(m, best);
        let mut with_self = refs.clone();
        with_self.push(a.clone());
        prop_assert_eq!(mmd(&a, &with_self).unwrap(), 0.0);
    }
}

#[test]
fn empty_sets_are_rejected() {
    let a = vec![[0.0; 3]];
    assert!(chamfer_bi(&a, &[]).is_err());
    assert!(f1_score(&[], &a, 0.03).is_err());
    assert!(fps(&a, 2, 0).is_err());
}
