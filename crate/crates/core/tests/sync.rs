//! Permutation and segmentation synchronization properties.

use mbsync::cloud::{ordered_pairs, unordered_pairs};
use mbsync::frontend::RelativeSegmentation;
use mbsync::perm_sync::{
    build_weighted_gcl, induced_flow, soft_assignment_from_flow, symmetrize_pairs, sync_energy,
    synchronize_permutations, SoftAssignment, SyncConfig,
};
use mbsync::seg_sync::{
    build_stacked, estimate_part_count, label_stack, normalize_relative, synchronize_segmentation,
    weighted_scaling_oracle,
};
use mbsync::{Error, FlowField, PairTable, PointCloud, Vec3};
use ndarray::{s, Array2};
use proptest::prelude::*;

fn permutation(order: &[usize]) -> Array2<f64> {
    let n = order.len();
    let mut p = Array2::zeros((n, n));
    for (i, &j) in order.iter().enumerate() {
        p[[i, j]] = 1.0;
    }
    p
}

/// Assignments `Pᵏˡ = Πᵏ Πˡᵀ` from absolute orderings, so every cycle is consistent.
fn consistent(orders: &[Vec<usize>]) -> PairTable<SoftAssignment<f64>> {
    let k = orders.len();
    let mut t = PairTable::new(k);
    for (a, b) in ordered_pairs(k) {
        let m = permutation(&orders[a]).dot(&permutation(&orders[b]).t());
        t.insert(a, b, SoftAssignment { source: a, target: b, matrix: m });
    }
    t
}

fn shuffled(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<usize>>()).prop_shuffle()
}

fn orders(k: usize, n: usize) -> impl Strategy<Value = Vec<Vec<usize>>> {
    proptest::collection::vec(shuffled(n), k)
}

proptest! {
    #[test]
    fn consistent_permutations_are_recovered(
        (k, n, ords) in (2usize..5, 1usize..7).prop_flat_map(|(k, n)| (Just(k), Just(n), orders(k, n))),
        w in proptest::collection::vec(0.2f64..1.0, 6),
    ) {
        let assignments = consistent(&ords);
        let mut weights = PairTable::new(k);
        for (i, (a, b)) in unordered_pairs(k).enumerate() {
            weights.insert(a, b, w[i]);
            weights.insert(b, a, w[i]);
        }
        let gcl = build_weighted_gcl(&assignments, &weights, k, n).unwrap();
        let synced = synchronize_permutations(&gcl, k, n).unwrap();
        for (a, b) in ordered_pairs(k) {
            let expect = &assignments.get(a, b).unwrap().matrix / k as f64;
            let got = synced.block(a, b);
            for (x, y) in got.iter().zip(expect.iter()) {
                prop_assert!((x - y).abs() < 1e-10);
            }
        }
        let e = sync_energy(synced.embedding.view(), &assignments, &weights).unwrap();
        prop_assert!(e.abs() < 1e-10);
    }

    #[test]
    fn energy_equals_laplacian_quadratic_form(
        (k, n, ords) in (2usize..5, 1usize..7).prop_flat_map(|(k, n)| {
            (Just(k), Just(n), proptest::collection::vec(shuffled(n), k * (k - 1) / 2))
        }),
        w in proptest::collection::vec(0.1f64..2.0, 6),
        pbar in proptest::collection::vec(-1.0f64..1.0, 4 * 6 * 6),
    ) {
        // Independent random permutations: generally inconsistent.
        let mut assignments = PairTable::new(k);
        let mut weights = PairTable::new(k);
        for (i, (a, b)) in unordered_pairs(k).enumerate() {
            let p = permutation(&ords[i]);
            assignments.insert(b, a, SoftAssignment { source: b, target: a, matrix: p.t().to_owned() });
            assignments.insert(a, b, SoftAssignment { source: a, target: b, matrix: p });
            weights.insert(a, b, w[i]);
            weights.insert(b, a, w[i]);
        }
        let x = Array2::from_shape_vec((k * n, n), pbar[..k * n * n].to_vec()).unwrap();
        let l = build_weighted_gcl(&assignments, &weights, k, n).unwrap();
        let quad = 2.0 * x.t().dot(&l.entries().dot(&x)).diag().sum();
        let e = sync_energy(x.view(), &assignments, &weights).unwrap();
        prop_assert!((e - quad).abs() <= 1e-9 * (1.0 + e.abs()));
    }

    #[test]
    fn soft_assignment_rows_are_distributions(
        pts in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0), 1..12),
        shift in (-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0),
        tau in 1e-4f64..1.0,
    ) {
        let xs: Vec<Vec3<f64>> = pts.iter().map(|&(a, b, c)| Vec3::new(a, b, c)).collect();
        let ys: Vec<Vec3<f64>> = xs.iter().rev().map(|&p| p * 0.5).collect();
        let xk = PointCloud::new(xs.clone(), 0).unwrap();
        let xl = PointCloud::new(ys, 1).unwrap();
        let flow = FlowField::new(0, 1, vec![Vec3::new(shift.0, shift.1, shift.2); xs.len()]).unwrap();
        let cfg = SyncConfig { tau, ..SyncConfig::default() };
        let p = soft_assignment_from_flow(&xk, &xl, &flow, &cfg).unwrap();
        for row in p.matrix.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn normalization_is_idempotent(entries in proptest::collection::vec(0.0f64..1.0, 16)) {
        prop_assume!(entries.iter().sum::<f64>() > 1e-6);
        let z = RelativeSegmentation { source: 0, target: 1, zhat: Array2::from_shape_vec((4, 4), entries).unwrap() };
        let once = normalize_relative(&z).unwrap();
        let twice = normalize_relative(&once).unwrap();
        prop_assert!((once.zhat.mean().unwrap() - 1.0).abs() < 1e-9);
        for (a, b) in once.zhat.iter().zip(twice.zhat.iter()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn scaling_oracle_solves_the_weighted_stack(
        (k, n, s) in (2usize..5, 4usize..10, 1usize..4),
        seed_labels in proptest::collection::vec(0usize..3, 40),
        sig in proptest::collection::vec(0.5f64..2.0, 6),
    ) {
        prop_assume!(s <= n);
        let labels: Vec<Vec<usize>> = (0..k)
            .map(|a| (0..n).map(|i| if i < s { i } else { seed_labels[(a * n + i) % 40] % s }).collect())
            .collect();
        let mut sigmas = PairTable::new(k);
        for (i, (a, b)) in unordered_pairs(k).enumerate() {
            sigmas.insert(a, b, sig[i]);
            sigmas.insert(b, a, sig[i]);
        }
        let r = weighted_scaling_oracle(&labels, &sigmas).unwrap();
        prop_assert!(r.residual <= 1e-9);
        // Every block of the weighted stack is (1/σ) G Gᵀ.
        let plain = label_stack::<f64>(&labels, None, false).unwrap();
        for (a, b) in ordered_pairs(k) {
            let want = plain.slice(s![a * n..(a + 1) * n, b * n..(b + 1) * n]).mapv(|x| x / sigmas.get(a, b).unwrap());
            let got = r.z.slice(s![a * n..(a + 1) * n, b * n..(b + 1) * n]);
            for (x, y) in got.iter().zip(want.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

fn stacked_from_labels(labels: &[Vec<usize>]) -> mbsync::seg_sync::StackedSegmentation<f64> {
    let (k, n) = (labels.len(), labels[0].len());
    let full = label_stack::<f64>(labels, None, false).unwrap();
    let mut blocks = PairTable::new(k);
    for (a, b) in unordered_pairs(k) {
        let zhat = full.slice(s![a * n..(a + 1) * n, b * n..(b + 1) * n]).to_owned();
        blocks.insert(a, b, RelativeSegmentation { source: a, target: b, zhat });
    }
    build_stacked(&blocks, k, n).unwrap()
}

#[test]
fn noiseless_segmentation_is_reproduced() {
    // Three scans, parts of distinct total sizes 9, 6 and 3.
    let base = [0, 0, 0, 1, 1, 2];
    let labels: Vec<Vec<usize>> = [[0, 1, 2, 3, 4, 5], [5, 3, 0, 1, 4, 2], [2, 4, 1, 5, 0, 3]]
        .iter()
        .map(|perm| perm.iter().map(|&i| base[i]).collect())
        .collect();
    let z = stacked_from_labels(&labels);
    assert_eq!(estimate_part_count(&z, 0.15).unwrap(), 3);
    let seg = synchronize_segmentation(&z, 3).unwrap();
    // Equal per-scan sizes n_s = (3, 2, 1): Z G = G diag((K-1) n_s), so the
    // leading eigenvalues are 6, 4, 2 and Γ Γᵀ = (K-1)/K · G Gᵀ.
    for (got, want) in seg.eigenvalues.iter().zip([6.0, 4.0, 2.0]) {
        assert!((got - want).abs() < 1e-10);
    }
    let g = seg.raw.dot(&seg.raw.t());
    let n = 6;
    for a in 0..3 {
        for b in (0..3).filter(|&b| b != a) {
            let want = z.block(a, b).mapv(|x| x * 2.0 / 3.0);
            let got = g.slice(s![a * n..(a + 1) * n, b * n..(b + 1) * n]);
            for (x, y) in got.iter().zip(want.iter()) {
                assert!((x - y).abs() < 1e-6, "{x} vs {y}");
            }
        }
    }
    let flat: Vec<usize> = labels.concat();
    assert_eq!(mbsync::metrics::rand_index(&seg.hard_labels, &flat).unwrap(), 1.0);
    for row in seg.fuzzy.rows() {
        assert!((row.sum() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn missing_reverse_direction_is_filled_in() {
    let p = permutation(&[1, 0, 2]);
    let mut assignments = PairTable::new(2);
    assignments.insert(0, 1, SoftAssignment { source: 0, target: 1, matrix: p.clone() });
    let mut weights = PairTable::new(2);
    weights.insert(0, 1, 0.4);
    weights.insert(1, 0, 0.8);
    symmetrize_pairs(&mut assignments, &mut weights).unwrap();
    assert_eq!(assignments.get(1, 0).unwrap().matrix, p.t());
    assert!((weights.get(0, 1).unwrap() - 0.6).abs() < 1e-15);
    assert_eq!(weights.get(0, 1), weights.get(1, 0));
}

#[test]
fn disconnected_pairs_are_rejected() {
    let ords = vec![vec![0, 1], vec![1, 0], vec![0, 1]];
    let assignments = consistent(&ords);
    let mut weights = PairTable::new(3);
    for (a, b) in ordered_pairs(3) {
        weights.insert(a, b, if a == 2 || b == 2 { 0.0 } else { 1.0 });
    }
    let gcl = build_weighted_gcl(&assignments, &weights, 3, 2).unwrap();
    assert!(matches!(synchronize_permutations(&gcl, 3, 2), Err(Error::DisconnectedGraph)));
}

#[test]
fn induced_flow_follows_the_synchronized_match() {
    let xk = PointCloud::new(vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0)], 0).unwrap();
    let xl = PointCloud::new(vec![Vec3::new(5.0, 0.0, 0.0), Vec3::new(0.0, 5.0, 0.0)], 1).unwrap();
    let block = permutation(&[1, 0]) * 0.5;
    let f = induced_flow(block.view(), &xk, &xl, &SyncConfig::default()).unwrap();
    assert!((f.vectors[0] - Vec3::new(0.0, 5.0, 0.0)).norm() < 1e-12);
    assert!((f.vectors[1] - Vec3::new(4.0, 0.0, 0.0)).norm() < 1e-12);
}
