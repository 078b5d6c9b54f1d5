use proptest::prelude::*;

use chartfuse::assoc::{box_iou, evaluate, hungarian, CostMatrix, FrameEval, GroundTruthPair, PredictedPair};
use chartfuse::camera::BoundingBox;

/// Best (finite pairs, total cost) over all partial injections of rows into
/// columns, skipping infinite entries.
fn brute_force(c: &[Vec<f64>]) -> (usize, f64) {
    fn go(c: &[Vec<f64>], row: usize, used: &mut Vec<bool>, pairs: usize, cost: f64, best: &mut (usize, f64)) {
        if row == c.len() {
            if pairs > best.0 || (pairs == best.0 && cost < best.1) {
                *best = (pairs, cost);
            }
            return;
        }
        go(c, row + 1, used, pairs, cost, best);
        for j in 0..used.len() {
            if !used[j] && c[row][j].is_finite() {
                used[j] = true;
                go(c, row + 1, used, pairs + 1, cost + c[row][j], best);
                used[j] = false;
            }
        }
    }
    let cols = c.first().map_or(0, Vec::len);
    let mut best = (0, f64::INFINITY);
    go(c, 0, &mut vec![false; cols], 0, 0.0, &mut best);
    if best.0 == 0 {
        best.1 = 0.0;
    }
    best
}

/// Integer-valued costs keep sums exact regardless of summation order.
fn matrix(max: usize, inf_prob: f64) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1..=max, 1..=max).prop_flat_map(move |(r, c)| {
        prop::collection::vec(
            prop::collection::vec(
                (0u32..50, 0.0..1.0f64).prop_map(move |(v, u)| if u < inf_prob { f64::INFINITY } else { v as f64 }),
                c,
            ),
            r,
        )
    })
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|j| format!("m{j}")).collect()
}

fn bbox(cx: f64) -> BoundingBox {
    BoundingBox::normalized(cx, 0.5, 0.1, 0.1).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn hungarian_matches_exhaustive_search(rows in matrix(5, 0.3)) {
        let m = CostMatrix::with_ids(rows.len(), rows.concat(), ids(rows[0].len())).unwrap();
        let r = hungarian(&m);
        let (pairs, cost) = brute_force(&rows);
        prop_assert_eq!(r.pairs.len(), pairs);
        prop_assert_eq!(r.total_cost(), cost);
        prop_assert_eq!(r.pairs.len() + r.unmatched_preds.len(), rows.len());
        prop_assert_eq!(r.pairs.len() + r.unmatched_markers.len(), rows[0].len());
        prop_assert!(r.pairs.iter().all(|p| p.cost.is_finite()));
    }

    #[test]
    fn total_cost_invariant_under_permutation(rows in matrix(6, 0.2), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (n, k) = (rows.len(), rows[0].len());
        let mut rp: Vec<usize> = (0..n).collect();
        let mut cp: Vec<usize> = (0..k).collect();
        rp.shuffle(&mut rng);
        cp.shuffle(&mut rng);
        let permuted: Vec<f64> = rp.iter().flat_map(|&i| cp.iter().map(move |&j| (i, j))).map(|(i, j)| rows[i][j]).collect();
        let a = hungarian(&CostMatrix::with_ids(n, rows.concat(), ids(k)).unwrap());
        let col_ids: Vec<String> = cp.iter().map(|j| format!("m{j}")).collect();
        let b = hungarian(&CostMatrix::with_ids(n, permuted, col_ids).unwrap());
        prop_assert_eq!(a.pairs.len(), b.pairs.len());
        prop_assert_eq!(a.total_cost(), b.total_cost());
    }

    #[test]
    fn iou_is_symmetric_and_bounded(
        a in (0.2..0.8f64, 0.2..0.8f64, 0.01..0.3f64, 0.01..0.3f64),
        b in (0.2..0.8f64, 0.2..0.8f64, 0.01..0.3f64, 0.01..0.3f64),
    ) {
        let a = BoundingBox::normalized(a.0, a.1, a.2, a.3).unwrap();
        let b = BoundingBox::normalized(b.0, b.1, b.2, b.3).unwrap();
        let (ab, ba) = (box_iou(&a, &b), box_iou(&b, &a));
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(box_iou(&a, &a), 1.0);
        if a != b {
            prop_assert!(ab < 1.0);
        }
    }

    #[test]
    fn adding_a_true_positive_never_lowers_f1(
        n_gt in 1usize..8,
        hits in prop::collection::vec(any::<bool>(), 8),
        wrong in 0usize..4,
    ) {
        let gt: Vec<GroundTruthPair> = (0..n_gt)
            .map(|i| GroundTruthPair { marker_id: format!("m{i}"), bbox: bbox(0.1 + 0.1 * i as f64), distance: 100.0 })
            .collect();
        let pred = |i: usize| PredictedPair { marker_id: format!("m{i}"), bbox: bbox(0.1 + 0.1 * i as f64), distance: None };
        let mut predictions: Vec<PredictedPair> = (0..n_gt).filter(|&i| hits[i]).map(pred).collect();
        predictions.extend((0..wrong).map(|i| PredictedPair { marker_id: format!("x{i}"), bbox: bbox(0.5), distance: None }));
        let before = evaluate(&[FrameEval { predictions: predictions.clone(), ground_truth: gt.clone() }], 0.5, 1000.0).unwrap();
        if let Some(missing) = (0..n_gt).find(|&i| !hits[i]) {
            predictions.push(pred(missing));
            let after = evaluate(&[FrameEval { predictions, ground_truth: gt }], 0.5, 1000.0).unwrap();
            prop_assert!(after.f1 >= before.f1);
            prop_assert_eq!(after.tp, before.tp + 1);
        }
    }
}
