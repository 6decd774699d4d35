use std::collections::BTreeSet;

use maskadapt::evaluation::{boundary_f1, compare_runs, ConfusionMatrix, EvalMetrics, RunLog};
use maskadapt::{Error, IGNORE_INDEX};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_grid(n: usize, k: u8, ignore_share: f64, rng: &mut ChaCha8Rng) -> Vec<u8> {
    (0..n)
        .map(|_| if rng.random::<f64>() < ignore_share { IGNORE_INDEX } else { rng.random_range(0..k) })
        .collect()
}

/// IoU from pixel index sets, independent of the confusion matrix.
fn set_oracle(pred: &[u8], truth: &[u8], k: u8) -> (Vec<Option<f64>>, f64) {
    let valid: Vec<usize> = (0..truth.len()).filter(|&i| truth[i] != IGNORE_INDEX).collect();
    let per: Vec<Option<f64>> = (0..k)
        .map(|c| {
            let p: BTreeSet<usize> = valid.iter().copied().filter(|&i| pred[i] == c).collect();
            let t: BTreeSet<usize> = valid.iter().copied().filter(|&i| truth[i] == c).collect();
            let union = p.union(&t).count();
            (union > 0).then(|| p.intersection(&t).count() as f64 / union as f64)
        })
        .collect();
    let defined: Vec<f64> = per.iter().flatten().copied().collect();
    (per.clone(), defined.iter().sum::<f64>() / defined.len() as f64)
}

#[test]
fn matches_set_oracle_on_random_grids() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..100 {
        let k = rng.random_range(2..=5u8);
        let n = rng.random_range(16..=256);
        let truth = random_grid(n, k, 0.1, &mut rng);
        let pred = random_grid(n, k, 0.0, &mut rng);
        let mut cm = ConfusionMatrix::new(k as usize);
        cm.accumulate(&pred, &truth, IGNORE_INDEX).unwrap();
        let report = cm.iou().unwrap();
        let (per, miou) = set_oracle(&pred, &truth, k);
        for (a, b) in report.per_class.iter().zip(&per) {
            match (a, b) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9, "case {case}"),
                (None, None) => {}
                _ => panic!("case {case}: definedness differs {a:?} vs {b:?}"),
            }
        }
        assert!((report.miou - miou).abs() < 1e-9, "case {case}");
    }
}

#[test]
fn counts_match_pixel_loop_on_8x8() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let truth = random_grid(64, 3, 0.1, &mut rng);
    let pred = random_grid(64, 3, 0.0, &mut rng);
    let mut cm = ConfusionMatrix::new(3);
    cm.accumulate(&pred, &truth, IGNORE_INDEX).unwrap();
    for t in 0..3u8 {
        for p in 0..3u8 {
            let want = (0..64).filter(|&i| truth[i] == t && pred[i] == p).count() as u64;
            assert_eq!(cm.get(t as usize, p as usize), want);
        }
    }
    assert_eq!(cm.total(), truth.iter().filter(|&&t| t != IGNORE_INDEX).count() as u64);
}

#[test]
fn all_ignored_leaves_matrix_unchanged() {
    let mut cm = ConfusionMatrix::new(3);
    cm.accumulate(&[0, 1, 2], &[IGNORE_INDEX; 3], IGNORE_INDEX).unwrap();
    assert_eq!(cm.total(), 0);
    assert!(matches!(cm.iou(), Err(Error::EmptyEvaluation)));
}

#[test]
fn dilated_prediction_scores_higher_at_wider_radius() {
    let (h, w) = (16, 16);
    let square = |lo: usize, hi: usize| -> Vec<u8> {
        (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                ((lo..hi).contains(&y) && (lo..hi).contains(&x)) as u8
            })
            .collect()
    };
    let truth = square(5, 11);
    let pred = square(4, 12);
    let r1 = boundary_f1(&pred, &truth, h, w, 1).unwrap();
    let r2 = boundary_f1(&pred, &truth, h, w, 2).unwrap();
    assert!(r2 > r1, "{r1} {r2}");
    assert_eq!(boundary_f1(&truth, &truth, h, w, 1).unwrap(), 1.0);
    assert_eq!(boundary_f1(&vec![0; h * w], &truth, h, w, 3).unwrap(), 0.0);
    assert!(boundary_f1(&truth, &truth, h, w, 0).is_err());
}

fn log(variant: &str, seed: u64, miou: f64, iters: &[usize]) -> RunLog {
    RunLog {
        variant: variant.into(),
        seed,
        evals: iters
            .iter()
            .map(|&iteration| EvalMetrics {
                iteration,
                iou: vec![Some(miou); 3],
                miou,
                boundary_f1: 0.5,
            })
            .collect(),
    }
}

#[test]
fn table_std_matches_direct_formula() {
    let values = [0.61, 0.55, 0.70];
    let logs: Vec<RunLog> = values.iter().enumerate().map(|(i, &m)| log("full", i as u64, m, &[10, 20])).collect();
    let table = compare_runs(&logs).unwrap();
    let mean = values.iter().sum::<f64>() / 3.0;
    let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 2.0).sqrt();
    let row = table.row("full").unwrap();
    assert_eq!(row.runs, 3);
    assert!((row.miou_mean - mean).abs() < 1e-12);
    assert!((row.miou_std - std).abs() < 1e-12);
}

#[test]
fn three_variant_table_and_csv_header() {
    let logs: Vec<RunLog> = ["baseline", "fusion", "fusion_grad"]
        .iter()
        .flat_map(|v| (0..3).map(move |s| log(v, s, 0.5 + s as f64 * 0.01, &[5])))
        .collect();
    let table = compare_runs(&logs).unwrap();
    assert_eq!(table.rows.len(), 3);
    let csv = table.runs_csv();
    assert_eq!(csv.lines().next().unwrap(), "variant,seed,iou_background,iou_crop,iou_weed,miou,boundary_f1");
    assert_eq!(csv.lines().count(), 10);
}

#[test]
fn mismatched_schedules_rejected() {
    let logs = vec![log("a", 0, 0.5, &[10, 20]), log("b", 0, 0.5, &[10, 30])];
    assert!(matches!(compare_runs(&logs), Err(Error::Validation(_))));
}

proptest! {
    #[test]
    fn iou_invariant_under_class_relabeling(seed in any::<u64>(), perm_seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = random_grid(100, 4, 0.05, &mut rng);
        let pred = random_grid(100, 4, 0.0, &mut rng);
        let mut perm: Vec<u8> = (0..4).collect();
        let mut prng = ChaCha8Rng::seed_from_u64(perm_seed);
        for i in (1..4).rev() {
            perm.swap(i, prng.random_range(0..=i));
        }
        let relabel = |g: &[u8]| g.iter().map(|&l| if l == IGNORE_INDEX { l } else { perm[l as usize] }).collect::<Vec<_>>();
        let mut a = ConfusionMatrix::new(4);
        a.accumulate(&pred, &truth, IGNORE_INDEX).unwrap();
        let mut b = ConfusionMatrix::new(4);
        b.accumulate(&relabel(&pred), &relabel(&truth), IGNORE_INDEX).unwrap();
        let (ra, rb) = (a.iou().unwrap(), b.iou().unwrap());
        for c in 0..4 {
            prop_assert_eq!(ra.per_class[c], rb.per_class[perm[c] as usize]);
        }
        prop_assert!((ra.miou - rb.miou).abs() < 1e-12);
    }

    #[test]
    fn accumulate_is_partition_independent(seed in any::<u64>(), cuts in prop::collection::vec(0usize..200, 0..6)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = random_grid(200, 3, 0.1, &mut rng);
        let pred = random_grid(200, 3, 0.0, &mut rng);
        let mut whole = ConfusionMatrix::new(3);
        whole.accumulate(&pred, &truth, IGNORE_INDEX).unwrap();
        let mut bounds: Vec<usize> = cuts;
        bounds.extend([0, 200]);
        bounds.sort();
        let mut sharded = ConfusionMatrix::new(3);
        for win in bounds.windows(2).rev() {
            let mut part = ConfusionMatrix::new(3);
            part.accumulate(&pred[win[0]..win[1]], &truth[win[0]..win[1]], IGNORE_INDEX).unwrap();
            sharded.merge(&part).unwrap();
        }
        prop_assert_eq!(whole, sharded);
    }

    #[test]
    fn iou_bounds(seed in any::<u64>(), k in 2u8..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = random_grid(64, k, 0.2, &mut rng);
        let pred = random_grid(64, k, 0.0, &mut rng);
        let mut cm = ConfusionMatrix::new(k as usize);
        cm.accumulate(&pred, &truth, IGNORE_INDEX).unwrap();
        if let Ok(r) = cm.iou() {
            let max = r.per_class.iter().flatten().copied().fold(0.0, f64::max);
            prop_assert!(r.per_class.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(r.miou <= max + 1e-12);
        }
    }

    #[test]
    fn table_ignores_input_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut logs: Vec<RunLog> = (0..6).map(|i| log(["x", "y"][i % 2], i as u64, rng.random(), &[1, 2])).collect();
        let a = compare_runs(&logs).unwrap();
        for i in (1..logs.len()).rev() {
            logs.swap(i, rng.random_range(0..=i));
        }
        let b = compare_runs(&logs).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn boundary_f1_in_unit_interval(seed in any::<u64>(), radius in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_grid(64, 2, 0.0, &mut rng);
        let b = random_grid(64, 2, 0.0, &mut rng);
        let f = boundary_f1(&a, &b, 8, 8, radius).unwrap();
        prop_assert!((0.0..=1.0).contains(&f));
    }
}
