use dap::metrics::{
    ap_from_ranked, average_precision, evaluate, match_boxes, nds, scale_error, tp_errors, SampleBoxes, TpErrors,
};
use dap::sim::{generate_scene, scene_seed, Attribute, ObjectBox, ObjectClass, SimConfig};
use proptest::prelude::*;

const V: ObjectClass = ObjectClass::Vehicle;

fn bx(x: f64, y: f64, score: f64) -> ObjectBox {
    ObjectBox {
        class_id: V,
        center: [x, y, 0.8],
        size: [4.5, 1.9, 1.6],
        yaw: 0.3,
        velocity: [1.0, 0.0],
        attribute: Attribute::Moving,
        score: Some(score),
    }
}

fn dist(a: &ObjectBox, b: &ObjectBox) -> f64 {
    ((a.center[0] - b.center[0]).powi(2) + (a.center[1] - b.center[1]).powi(2)).sqrt()
}

/// Every injective partial assignment; keeps the one whose per-prediction
/// distances, in descending-score order, are lexicographically smallest
/// (unmatched counts as infinity).
fn brute_force_match(preds: &[ObjectBox], gts: &[ObjectBox], th: f64) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.partial_cmp(&preds[a].score).unwrap().then(a.cmp(&b)));
    let mut best: Option<(Vec<f64>, Vec<Option<usize>>)> = None;
    let mut assign = vec![None; preds.len()];
    fn rec(
        k: usize,
        order: &[usize],
        preds: &[ObjectBox],
        gts: &[ObjectBox],
        th: f64,
        used: &mut Vec<bool>,
        assign: &mut Vec<Option<usize>>,
        best: &mut Option<(Vec<f64>, Vec<Option<usize>>)>,
    ) {
        if k == order.len() {
            let key: Vec<f64> = order
                .iter()
                .map(|&i| assign[i].map_or(f64::INFINITY, |j| dist(&preds[i], &gts[j])))
                .collect();
            if best.as_ref().map_or(true, |(b, _)| key < *b) {
                *best = Some((key, assign.clone()));
            }
            return;
        }
        let i = order[k];
        assign[i] = None;
        rec(k + 1, order, preds, gts, th, used, assign, best);
        for j in 0..gts.len() {
            if !used[j] && dist(&preds[i], &gts[j]) < th {
                used[j] = true;
                assign[i] = Some(j);
                rec(k + 1, order, preds, gts, th, used, assign, best);
                used[j] = false;
                assign[i] = None;
            }
        }
    }
    let mut used = vec![false; gts.len()];
    rec(0, &order, preds, gts, th, &mut used, &mut assign, &mut best);
    best.unwrap().1
}

fn greedy_as_assignment(preds: &[ObjectBox], gts: &[ObjectBox], th: f64) -> Vec<Option<usize>> {
    let m = match_boxes(preds, gts, th, V);
    let mut out = vec![None; preds.len()];
    for (i, j) in m.pairs {
        out[i] = Some(j);
    }
    out
}

#[test]
fn competing_predictions_match_brute_force() {
    // both predictions are nearest to gt 0; the lower-scored one falls back to gt 1
    let gts = [bx(0.0, 0.0, 1.0), bx(1.5, 0.0, 1.0)];
    let preds = [bx(0.5, 0.0, 0.6), bx(0.3, 0.0, 0.9)];
    let greedy = greedy_as_assignment(&preds, &gts, 2.0);
    assert_eq!(greedy, vec![Some(1), Some(0)]);
    assert_eq!(greedy, brute_force_match(&preds, &gts, 2.0));
}

#[test]
fn duplicates_yield_one_true_positive() {
    let gts = [bx(0.0, 0.0, 1.0)];
    let preds = [bx(0.1, 0.0, 0.9), bx(0.0, 0.1, 0.8), bx(0.0, 0.0, 0.7)];
    let m = match_boxes(&preds, &gts, 2.0, V);
    assert_eq!(m.pairs, vec![(0, 0)]);
    assert_eq!(m.unmatched_preds, vec![1, 2]);
}

/// Precision/recall after each ranked prediction, then sampled on the 101
/// recall points by walking the curve segment by segment.
fn ap_oracle(tp: &[bool], n_gt: usize) -> f64 {
    let mut pts: Vec<(f64, f64)> = Vec::new();
    let mut hits = 0.0;
    for (k, &t) in tp.iter().enumerate() {
        if t {
            hits += 1.0;
        }
        pts.push((hits / n_gt as f64, hits / (k + 1) as f64));
    }
    let sample = |r: f64| -> f64 {
        if r < pts[0].0 {
            return pts[0].1;
        }
        let last = pts.len() - 1;
        if r > pts[last].0 {
            return 0.0;
        }
        if r == pts[last].0 {
            return pts[last].1;
        }
        let mut seg = 0;
        while !(pts[seg].0 <= r && r < pts[seg + 1].0) {
            seg += 1;
        }
        let (a, b) = (pts[seg], pts[seg + 1]);
        a.1 + (b.1 - a.1) * (r - a.0) / (b.0 - a.0)
    };
    let mut total = 0.0;
    for i in 11..=100 {
        total += (sample(i as f64 / 100.0) - 0.1).max(0.0);
    }
    total / 90.0 / 0.9
}

#[test]
fn half_recall_example() {
    let ap = ap_from_ranked(&[true, false], 2);
    assert!((ap - ap_oracle(&[true, false], 2)).abs() < 1e-12);
    assert!((ap - 35.5 / 81.0).abs() < 1e-12, "{ap}");
}

#[test]
fn ap_over_samples_uses_global_ranking() {
    let s = vec![
        SampleBoxes {
            id: "a".into(),
            preds: vec![bx(0.0, 0.0, 0.9)],
            gts: vec![bx(0.0, 0.0, 1.0)],
        },
        SampleBoxes {
            id: "b".into(),
            preds: vec![bx(9.0, 9.0, 0.95)],
            gts: vec![bx(0.0, 0.0, 1.0)],
        },
    ];
    // ranked: FP (0.95), TP (0.9); 2 GT
    let ap = average_precision(&s, 2.0, V);
    assert!((ap - ap_oracle(&[false, true], 2)).abs() < 1e-12);
}

#[test]
fn nds_reference_rows() {
    let e = |a, s, o, v, t| TpErrors {
        ate: a,
        ase: s,
        aoe: o,
        ave: v,
        aae: t,
    };
    assert!((nds(0.402, &e(0.530, 0.271, 0.431, 0.276, 0.201)) - 0.530).abs() < 5e-4);
    assert!((nds(0.362, &e(0.617, 0.274, 0.480, 0.393, 0.203)) - 0.484).abs() < 5e-4);
    assert_eq!(nds(1.0, &e(0.0, 0.0, 0.0, 0.0, 0.0)), 1.0);
}

#[test]
fn aligned_iou_closed_form() {
    assert!((scale_error(&[4.0, 2.0, 1.5], &[4.0, 2.0, 3.0]) - 0.5).abs() < 1e-15);
}

#[test]
fn simulator_ground_truth_scores_perfectly() {
    let cfg = SimConfig::default();
    let samples: Vec<SampleBoxes> = (0..12)
        .map(|i| {
            let scene = generate_scene(&cfg, scene_seed(cfg.seed, i));
            let gts = scene.ground_truth(&cfg.grid);
            let preds = gts.iter().cloned().map(|mut b| {
                b.score = Some(1.0);
                b
            });
            SampleBoxes {
                id: format!("{i}"),
                preds: preds.collect(),
                gts,
            }
        })
        .collect();
    let r = evaluate(&samples);
    assert_eq!(r.map, 1.0);
    assert_eq!(r.mean_tp().as_array(), [0.0; 5]);
    assert_eq!(r.nds, 1.0);
}

#[test]
fn empty_predictions_score_zero_map() {
    let cfg = SimConfig::default();
    let scene = generate_scene(&cfg, 7);
    let r = evaluate(&[SampleBoxes {
        id: "x".into(),
        preds: vec![],
        gts: scene.ground_truth(&cfg.grid),
    }]);
    assert_eq!(r.map, 0.0);
    assert_eq!(r.mean_tp(), TpErrors::MISSING);
    assert_eq!(r.nds, 0.0);
}

fn arb_boxes(max: usize) -> impl Strategy<Value = Vec<ObjectBox>> {
    prop::collection::vec((-4.0f64..4.0, -4.0f64..4.0, 0.0f64..1.0), 0..=max)
        .prop_map(|v| v.into_iter().map(|(x, y, s)| bx(x, y, s)).collect())
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn greedy_equals_lexicographic_optimum(preds in arb_boxes(4), gts in arb_boxes(4), th in 0.5f64..4.0) {
        prop_assert_eq!(greedy_as_assignment(&preds, &gts, th), brute_force_match(&preds, &gts, th));
    }

    #[test]
    fn matches_are_one_to_one_and_within_threshold(preds in arb_boxes(8), gts in arb_boxes(8), th in 0.5f64..4.0) {
        let m = match_boxes(&preds, &gts, th, V);
        let mut seen_p = vec![false; preds.len()];
        let mut seen_g = vec![false; gts.len()];
        for (&(i, j), &d) in m.pairs.iter().zip(&m.distances) {
            prop_assert!(!seen_p[i] && !seen_g[j]);
            seen_p[i] = true;
            seen_g[j] = true;
            prop_assert!(d <= th);
        }
        prop_assert_eq!(m.pairs.len() + m.unmatched_preds.len(), preds.len());
        prop_assert_eq!(m.pairs.len() + m.unmatched_gts.len(), gts.len());
    }

    #[test]
    fn ap_matches_oracle(tp in prop::collection::vec(any::<bool>(), 1..30), extra in 0usize..5) {
        let n_gt = tp.iter().filter(|t| **t).count() + extra;
        prop_assume!(n_gt > 0);
        let ap = ap_from_ranked(&tp, n_gt);
        prop_assert!((ap - ap_oracle(&tp, n_gt)).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&ap));
    }

    #[test]
    fn ap_depends_only_on_ranking(preds in arb_boxes(6), gts in arb_boxes(6)) {
        let a = SampleBoxes { id: "s".into(), preds: preds.clone(), gts: gts.clone() };
        let warped: Vec<ObjectBox> = preds.into_iter().map(|mut b| {
            b.score = b.score.map(|s| (3.0 * s).exp() - 7.0);
            b
        }).collect();
        let b = SampleBoxes { id: "s".into(), preds: warped, gts };
        for th in [0.5, 1.0, 2.0, 4.0] {
            prop_assert_eq!(average_precision(&[a.clone()], th, V), average_precision(&[b.clone()], th, V));
        }
    }

    #[test]
    fn nds_is_monotone(map in 0.0f64..1.0, errs in prop::array::uniform5(0.0f64..2.0), k in 0usize..5, d in 0.0f64..0.5) {
        let e = |a: [f64; 5]| TpErrors { ate: a[0], ase: a[1], aoe: a[2], ave: a[3], aae: a[4] };
        let base = nds(map, &e(errs));
        let mut worse = errs;
        worse[k] += d;
        prop_assert!(nds(map, &e(worse)) <= base + 1e-15);
        prop_assert!(nds((map + d).min(1.0), &e(errs)) >= base - 1e-15);
        prop_assert!((0.0..=1.0).contains(&base));
    }

    #[test]
    fn tp_errors_vanish_on_identity(x in -10.0f64..10.0, yaw in -3.0f64..3.0) {
        let mut b = bx(x, 0.0, 1.0);
        b.yaw = yaw;
        prop_assert_eq!(tp_errors(&[(b.clone(), b)]).as_array(), [0.0; 5]);
    }
}
