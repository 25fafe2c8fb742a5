//! Center-distance detection metrics: greedy matching, truncated AP, the
//! five true-positive errors and the detection score NDS.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::sim::{ObjectBox, ObjectClass};

/// Matching thresholds for AP, in meters.
pub const DISTANCE_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
/// Threshold whose matches feed the TP errors.
pub const TP_THRESHOLD: f64 = 2.0;
pub const MIN_RECALL: f64 = 0.1;
pub const MIN_PRECISION: f64 = 0.1;
const RECALL_POINTS: usize = 101;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchResult {
    /// `(prediction, gt)` index pairs into the input slices, in match order.
    pub pairs: Vec<(usize, usize)>,
    pub distances: Vec<f64>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

pub fn center_distance(a: &ObjectBox, b: &ObjectBox) -> f64 {
    (a.center[0] - b.center[0]).hypot(a.center[1] - b.center[1])
}

fn score(b: &ObjectBox) -> f64 {
    b.score.unwrap_or(1.0)
}

/// Indices of `preds` of class `class`, best score first, ties by index.
fn ranked(preds: &[ObjectBox], class: ObjectClass) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..preds.len()).filter(|&i| preds[i].class_id == class).collect();
    idx.sort_by(|&a, &b| score(&preds[b]).total_cmp(&score(&preds[a])).then(a.cmp(&b)));
    idx
}

/// Nearest unclaimed GT of `class` strictly closer than `threshold`.
fn nearest(p: &ObjectBox, gts: &[ObjectBox], taken: &[bool], class: ObjectClass, threshold: f64) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (j, gt) in gts.iter().enumerate() {
        if taken[j] || gt.class_id != class {
            continue;
        }
        let d = center_distance(p, gt);
        if d < threshold && best.map_or(true, |(_, bd)| d < bd) {
            best = Some((j, d));
        }
    }
    best
}

/// Greedy matching of one class in a single sample.
pub fn match_boxes(preds: &[ObjectBox], gts: &[ObjectBox], threshold: f64, class: ObjectClass) -> MatchResult {
    let mut taken = vec![false; gts.len()];
    let mut out = MatchResult::default();
    for i in ranked(preds, class) {
        match nearest(&preds[i], gts, &taken, class, threshold) {
            Some((j, d)) => {
                taken[j] = true;
                out.pairs.push((i, j));
                out.distances.push(d);
            }
            None => out.unmatched_preds.push(i),
        }
    }
    out.unmatched_gts = (0..gts.len()).filter(|&j| !taken[j] && gts[j].class_id == class).collect();
    out
}

/// Predictions and ground truth for one sample.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleBoxes {
    pub id: String,
    pub preds: Vec<ObjectBox>,
    pub gts: Vec<ObjectBox>,
}

/// Ranked outcome of one class over a set of samples.
#[derive(Clone, Debug, Default)]
struct Curve {
    /// TP flag per prediction, best score first.
    tp: Vec<bool>,
    n_gt: usize,
    /// Matched `(pred, gt)` boxes.
    matches: Vec<(ObjectBox, ObjectBox)>,
}

fn accumulate(samples: &[SampleBoxes], class: ObjectClass, threshold: f64) -> Curve {
    let mut all: Vec<(f64, usize, usize)> = Vec::new();
    for (s, sample) in samples.iter().enumerate() {
        for (i, p) in sample.preds.iter().enumerate() {
            if p.class_id == class {
                all.push((score(p), s, i));
            }
        }
    }
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut taken: Vec<Vec<bool>> = samples.iter().map(|s| vec![false; s.gts.len()]).collect();
    let mut curve = Curve {
        n_gt: samples.iter().flat_map(|s| &s.gts).filter(|g| g.class_id == class).count(),
        ..Curve::default()
    };
    for (_, s, i) in all {
        let p = &samples[s].preds[i];
        match nearest(p, &samples[s].gts, &taken[s], class, threshold) {
            Some((j, _)) => {
                taken[s][j] = true;
                curve.tp.push(true);
                curve.matches.push((p.clone(), samples[s].gts[j].clone()));
            }
            None => curve.tp.push(false),
        }
    }
    curve
}

/// Linear interpolation with `numpy.interp` semantics: `xp` non-decreasing,
/// left of range clamps to `fp[0]`, right of range gives `right`.
fn interp(x: f64, xp: &[f64], fp: &[f64], right: f64) -> f64 {
    if x < xp[0] {
        return fp[0];
    }
    let last = xp.len() - 1;
    if x > xp[last] {
        return right;
    }
    if x == xp[last] {
        return fp[last];
    }
    let k = xp.partition_point(|&v| v <= x);
    let (x0, x1) = (xp[k - 1], xp[k]);
    if x1 == x0 {
        return fp[k - 1];
    }
    fp[k - 1] + (fp[k] - fp[k - 1]) * (x - x0) / (x1 - x0)
}

/// Compensated sum so that repeated equal terms stay exact.
fn kahan_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0, 0.0);
    for v in values {
        let y = v - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}

/// Truncated AP from ranked TP flags: precision sampled on a 101-point
/// recall grid, points with recall above the minimum, precision shifted by
/// the minimum precision and rescaled to `[0, 1]`.
pub fn ap_from_ranked(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 || tp.is_empty() {
        return 0.0;
    }
    let (mut ctp, mut cfp) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    for &t in tp {
        if t {
            ctp += 1;
        } else {
            cfp += 1;
        }
        recall.push(ctp as f64 / n_gt as f64);
        precision.push(ctp as f64 / (ctp + cfp) as f64);
    }
    let first = (100.0 * MIN_RECALL).round() as usize + 1;
    let terms = (first..RECALL_POINTS).map(|i| {
        let r = i as f64 / (RECALL_POINTS - 1) as f64;
        (interp(r, &recall, &precision, 0.0) - MIN_PRECISION).max(0.0)
    });
    let n = (RECALL_POINTS - first) as f64;
    (kahan_sum(terms) / (n * (1.0 - MIN_PRECISION))).clamp(0.0, 1.0)
}

pub fn average_precision(samples: &[SampleBoxes], threshold: f64, class: ObjectClass) -> f64 {
    let c = accumulate(samples, class, threshold);
    ap_from_ranked(&c.tp, c.n_gt)
}

/// The five true-positive errors, in report order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TpErrors {
    pub ate: f64,
    pub ase: f64,
    pub aoe: f64,
    pub ave: f64,
    pub aae: f64,
}

impl TpErrors {
    /// Value used when a class has no matches.
    pub const MISSING: TpErrors = TpErrors {
        ate: 1.0,
        ase: 1.0,
        aoe: 1.0,
        ave: 1.0,
        aae: 1.0,
    };

    pub fn as_array(&self) -> [f64; 5] {
        [self.ate, self.ase, self.aoe, self.ave, self.aae]
    }

    fn from_array(a: [f64; 5]) -> Self {
        TpErrors {
            ate: a[0],
            ase: a[1],
            aoe: a[2],
            ave: a[3],
            aae: a[4],
        }
    }
}

/// `1 - IoU` of two boxes sharing center and heading.
pub fn scale_error(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let mut ratio = 1.0;
    for d in 0..3 {
        let (lo, hi) = (a[d].min(b[d]), a[d].max(b[d]));
        ratio *= if hi > 0.0 { lo / hi } else { 1.0 };
    }
    1.0 - ratio
}

/// Smallest absolute difference of two headings, in `[0, π]`.
pub fn yaw_error(a: f64, b: f64) -> f64 {
    crate::geometry::normalize_angle(a - b).abs()
}

/// Mean errors over `(pred, gt)` pairs; [`TpErrors::MISSING`] when empty.
pub fn tp_errors(pairs: &[(ObjectBox, ObjectBox)]) -> TpErrors {
    if pairs.is_empty() {
        return TpErrors::MISSING;
    }
    let n = pairs.len() as f64;
    let mut acc = [0.0; 5];
    for (p, g) in pairs {
        acc[0] += center_distance(p, g);
        acc[1] += scale_error(&p.size, &g.size);
        acc[2] += yaw_error(p.yaw, g.yaw);
        acc[3] += (p.velocity[0] - g.velocity[0]).hypot(p.velocity[1] - g.velocity[1]);
        acc[4] += if p.attribute == g.attribute { 0.0 } else { 1.0 };
    }
    TpErrors::from_array(acc.map(|v| v / n))
}

/// `(5 mAP + Σ (1 - min(1, err))) / 10`.
pub fn nds(map: f64, errors: &TpErrors) -> f64 {
    let tp: f64 = errors.as_array().iter().map(|e| 1.0 - e.min(1.0)).sum();
    (5.0 * map + tp) / 10.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub num_gt: usize,
    /// AP per entry of [`DISTANCE_THRESHOLDS`].
    pub ap: [f64; 4],
    pub tp: TpErrors,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub nds: f64,
    pub map: f64,
    pub mate: f64,
    pub mase: f64,
    pub maoe: f64,
    pub mave: f64,
    pub maae: f64,
    /// Mean AP over classes per threshold.
    pub ap_per_threshold: [f64; 4],
    /// Classes with no ground truth are listed but left out of the means.
    pub per_class: Vec<ClassMetrics>,
    pub num_samples: usize,
}

impl MetricsReport {
    pub fn mean_tp(&self) -> TpErrors {
        TpErrors {
            ate: self.mate,
            ase: self.mase,
            aoe: self.maoe,
            ave: self.mave,
            aae: self.maae,
        }
    }

    /// Aligned summary table, one header row and one value row.
    pub fn summary_table(&self) -> String {
        let cols = ["NDS", "mAP", "mATE", "mASE", "mAOE", "mAVE", "mAAE"];
        let vals = [self.nds, self.map, self.mate, self.mase, self.maoe, self.mave, self.maae];
        let mut s = String::new();
        for c in cols {
            let _ = write!(s, "{c:>8}");
        }
        s.push('\n');
        for v in vals {
            let _ = write!(s, "{v:>8.4}");
        }
        s.push('\n');
        s
    }

    pub fn class_table(&self) -> String {
        let mut s = format!(
            "{:<12}{:>6}{:>8}{:>8}{:>8}{:>8}{:>8}{:>8}\n",
            "class", "gt", "AP", "ATE", "ASE", "AOE", "AVE", "AAE"
        );
        for c in &self.per_class {
            let ap = c.ap.iter().sum::<f64>() / c.ap.len() as f64;
            let _ = write!(s, "{:<12}{:>6}{:>8.4}", c.class, c.num_gt, ap);
            for e in c.tp.as_array() {
                let _ = write!(s, "{e:>8.4}");
            }
            s.push('\n');
        }
        s
    }
}

/// Full evaluation over all classes present in the ground truth.
pub fn evaluate(samples: &[SampleBoxes]) -> MetricsReport {
    let mut per_class = Vec::new();
    for class in ObjectClass::ALL {
        let mut ap = [0.0; 4];
        let mut tp = TpErrors::MISSING;
        let mut num_gt = 0;
        for (k, &th) in DISTANCE_THRESHOLDS.iter().enumerate() {
            let curve = accumulate(samples, class, th);
            num_gt = curve.n_gt;
            ap[k] = ap_from_ranked(&curve.tp, curve.n_gt);
            if th == TP_THRESHOLD {
                tp = tp_errors(&curve.matches);
            }
        }
        per_class.push(ClassMetrics {
            class: class.name().to_string(),
            num_gt,
            ap,
            tp,
        });
    }
    let scored: Vec<&ClassMetrics> = per_class.iter().filter(|c| c.num_gt > 0).collect();
    let (map, ap_per_threshold, mean_tp) = if scored.is_empty() {
        (0.0, [0.0; 4], TpErrors::MISSING)
    } else {
        let n = scored.len() as f64;
        let apt: [f64; 4] = std::array::from_fn(|k| kahan_sum(scored.iter().map(|c| c.ap[k])) / n);
        let map = kahan_sum(scored.iter().flat_map(|c| c.ap)) / (n * DISTANCE_THRESHOLDS.len() as f64);
        let tp: [f64; 5] = std::array::from_fn(|k| scored.iter().map(|c| c.tp.as_array()[k]).sum::<f64>() / n);
        (map.clamp(0.0, 1.0), apt, TpErrors::from_array(tp))
    };
    let mut report = MetricsReport {
        nds: 0.0,
        map,
        mate: mean_tp.ate,
        mase: mean_tp.ase,
        maoe: mean_tp.aoe,
        mave: mean_tp.ave,
        maae: mean_tp.aae,
        ap_per_threshold,
        per_class,
        num_samples: samples.len(),
    };
    report.nds = nds(report.map, &report.mean_tp());
    report
}
