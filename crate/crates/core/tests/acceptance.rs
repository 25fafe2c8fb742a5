//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
//! fails. Set `DAP_ACCEPTANCE_DIR` to keep the ablation runs.

mod common;

use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use common::gradcheck::{run_operator_suite, FD_EPS};
use dap::experiment::{AblationAxis, AblationRunner, AblationTable, ExperimentConfig};
use dap::geometry::{align_bev, BevGridSpec, EgoPose};
use dap::loss::{render_targets, total_loss, LossConfig};
use dap::metrics::{evaluate, match_boxes, nds, SampleBoxes, TpErrors};
use dap::net::{forward_vars, fuse, Bound, DapConfig, FdfaTrace, ParamSet};
use dap::sim::{generate_dataset, write_dataset, Attribute, ObjectBox, ObjectClass, SimConfig, Split};
use dap::tensor::{Graph, Tensor};
use dap::train::{train, TrainConfig, TRAIN_LOG};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

fn jitter(params: &mut ParamSet<f64>, rng: &mut ChaCha8Rng, scale: f64) {
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-scale..scale);
        }
    }
}

fn nds_formula() -> Outcome {
    let e = |a, s, o, v, t| TpErrors {
        ate: a,
        ase: s,
        aoe: o,
        ave: v,
        aae: t,
    };
    let a = nds(0.402, &e(0.530, 0.271, 0.431, 0.276, 0.201));
    let b = nds(0.362, &e(0.617, 0.274, 0.480, 0.393, 0.203));
    check(
        (a - 0.530).abs() <= 5e-4 && (b - 0.484).abs() <= 5e-4,
        format!("{a:.4} vs 0.530, {b:.4} vs 0.484"),
    )
}

fn end_to_end_gradient() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfg = DapConfig {
        height_cells: 8,
        width_cells: 8,
        ..DapConfig::default()
    };
    let spec = BevGridSpec::new(8, 8, 1.0, 4.0).unwrap();
    let mut params = cfg.init_params::<f64>(7);
    jitter(&mut params, &mut rng, 0.2);
    for v in params.get_mut("fuse.offset.b").unwrap().data_mut() {
        *v = rng.gen_range(0.2..0.8);
    }
    let frames: Vec<Tensor<f64>> = (0..=cfg.past_frames)
        .map(|_| random_tensor(&mut rng, &[cfg.in_channels, 8, 8], 0.0, 1.0))
        .collect();
    let gt = vec![ObjectBox {
        class_id: ObjectClass::Vehicle,
        center: [0.7, -1.2, 0.8],
        size: [4.5, 1.9, 1.6],
        yaw: 0.4,
        velocity: [2.0, 0.5],
        attribute: Attribute::Moving,
        score: None,
    }];
    let lcfg = LossConfig::default();
    let targets = render_targets::<f64>(&gt, &spec, 3, &lcfg);
    let loss_of = |params: &ParamSet<f64>, track: bool| {
        let mut g = Graph::new();
        let p = Bound::new(&mut g, params, track);
        let xs: Vec<_> = frames.iter().map(|f| g.constant(f.clone())).collect();
        let out = forward_vars(&mut g, &cfg, &p, &xs, None).unwrap();
        let l = total_loss(&mut g, &out.det, out.pred.as_ref(), &targets, &lcfg).unwrap();
        (g, p, l.total)
    };
    let (mut g, p, root) = loss_of(&params, true);
    g.backward(root).unwrap();
    let grads = p.grads(&mut g);
    let (mut max_diff, mut max_mag) = (0.0f64, 0.0f64);
    let names: Vec<String> = params.names().cloned().collect();
    for name in &names {
        let n = params.get(name).unwrap().numel();
        for _ in 0..3 {
            let j = rng.gen_range(0..n);
            let eval = |delta: f64| {
                let mut q = params.clone();
                q.get_mut(name).unwrap().data_mut()[j] += delta;
                let (g, _, l) = loss_of(&q, false);
                g.value(l).item()
            };
            let numeric = (eval(FD_EPS) - eval(-FD_EPS)) / (2.0 * FD_EPS);
            max_diff = max_diff.max((grads.get(name).unwrap().data()[j] - numeric).abs());
            max_mag = max_mag.max(numeric.abs());
        }
    }
    max_diff / max_mag.max(1e-6)
}

fn gradient_suite() -> Outcome {
    let ops = run_operator_suite(100, 2024);
    let (worst_name, worst) = ops.iter().cloned().fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let e2e = end_to_end_gradient();
    check(
        worst < 1e-4 && e2e < 1e-3,
        format!(
            "{} operators x 100 instances, worst {worst:.2e} ({worst_name}); end-to-end {e2e:.2e}",
            ops.len()
        ),
    )
}

fn random_fusion_case(rng: &mut ChaCha8Rng) -> (DapConfig, ParamSet<f64>, Tensor<f64>, Tensor<f64>) {
    let heads = [1, 2, 4][rng.gen_range(0..3)];
    let cfg = DapConfig {
        heads,
        points: rng.gen_range(1..=3),
        width: 8,
        height_cells: rng.gen_range(2..=5),
        width_cells: rng.gen_range(2..=5),
        ..DapConfig::default()
    };
    let params = cfg.init_params::<f64>(rng.gen());
    let (h, w) = (cfg.height_cells, cfg.width_cells);
    let b_o = random_tensor(rng, &[8, h, w], -2.0, 2.0);
    let b_f = random_tensor(rng, &[8, h, w], -2.0, 2.0);
    (cfg, params, b_o, b_f)
}

fn run_fuse(cfg: &DapConfig, params: &ParamSet<f64>, b_o: &Tensor<f64>, b_f: &Tensor<f64>) -> (Tensor<f64>, FdfaTrace<f64>) {
    let mut g = Graph::new();
    let p = Bound::new(&mut g, params, false);
    let (o, f) = (g.constant(b_o.clone()), g.constant(b_f.clone()));
    let mut trace = FdfaTrace::default();
    let out = fuse(&mut g, cfg, &p, o, f, Some(&mut trace)).unwrap();
    (g.value(out).clone(), trace)
}

fn joint_attention() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut shared = true;
    for _ in 0..1000 {
        let (cfg, mut params, b_o, b_f) = random_fusion_case(&mut rng);
        let scale = rng.gen_range(0.1..2.0);
        jitter(&mut params, &mut rng, scale);
        let (_, trace) = run_fuse(&cfg, &params, &b_o, &b_f);
        for a in &trace.attention {
            for row in a.data().chunks(2 * cfg.points) {
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
        shared &= trace.points_o.len() == cfg.heads
            && trace.points_o.iter().zip(&trace.points_f).all(|(o, f)| o.bit_eq(f));
    }
    check(
        worst <= 1e-6 && shared,
        format!("1000 evaluations, max |sum - 1| = {worst:.2e}, shared coordinates: {shared}"),
    )
}

fn residual_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut all = true;
    for _ in 0..200 {
        let (cfg, mut params, b_o, b_f) = random_fusion_case(&mut rng);
        jitter(&mut params, &mut rng, 0.8);
        let fresh = cfg.init_params::<f64>(0);
        params.insert("fuse.out.w", fresh.get("fuse.out.w").unwrap().clone());
        let (out, _) = run_fuse(&cfg, &params, &b_o, &b_f);
        all &= out.bit_eq(&b_o);
    }
    check(all, "200 random inputs with zero-initialized output projection".into())
}

/// Sum of sinusoids with wavelengths of at least 20 cells.
fn smooth_feature(rng: &mut ChaCha8Rng, spec: &BevGridSpec) -> Tensor<f64> {
    use std::f64::consts::PI;
    let waves: Vec<[f64; 4]> = (0..3)
        .map(|_| {
            let len = rng.gen_range(20.0..40.0);
            let dir: f64 = rng.gen_range(0.0..PI);
            [2.0 * PI * dir.cos() / len, 2.0 * PI * dir.sin() / len, rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.2..0.33)]
        })
        .collect();
    let w = spec.width_cells;
    Tensor::from_fn(vec![1, spec.height_cells, w], |i| {
        let (r, c) = ((i / w) as f64, (i % w) as f64);
        waves.iter().map(|[kr, kc, ph, a]| a * (kr * r + kc * c + ph).sin()).sum()
    })
}

fn alignment() -> Outcome {
    let spec = BevGridSpec::desk();
    let (h, w) = (spec.height_cells, spec.width_cells);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f = random_tensor(&mut rng, &[3, h, w], -1.0, 1.0);
    let pose = EgoPose::new(3.2, -7.5, 0.61);
    let identity = align_bev(&f, &pose, &pose, &spec).unwrap().bit_eq(&f);

    let mut shift_exact = true;
    for (dr, dc) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
        let current = EgoPose::new(dr as f64 * spec.cell_size, dc as f64 * spec.cell_size, 0.0);
        let out = align_bev(&f, &EgoPose::identity(), &current, &spec).unwrap();
        for c in 0..3 {
            for i in 1..h - 1 {
                for j in 1..w - 1 {
                    let src = f.get(&[c, (i as i64 + dr) as usize, (j as i64 + dc) as usize]);
                    shift_exact &= out.get(&[c, i, j]).to_bits() == src.to_bits();
                }
            }
        }
    }

    let mut worst = 0.0f64;
    let margin = 8;
    for _ in 0..20 {
        let feat = smooth_feature(&mut rng, &spec);
        let mut step = |base: &EgoPose| {
            let (x, y) = base.local_to_world(rng.gen_range(0.0..2.0), rng.gen_range(-0.5..0.5));
            EgoPose::new(x, y, base.yaw + rng.gen_range(-0.1..0.1))
        };
        let p2 = EgoPose::new(0.0, 0.0, 0.3);
        let p1 = step(&p2);
        let p0 = step(&p1);
        let direct = align_bev(&feat, &p2, &p0, &spec).unwrap();
        let chained = align_bev(&align_bev(&feat, &p2, &p1, &spec).unwrap(), &p1, &p0, &spec).unwrap();
        for i in margin..h - margin {
            for j in margin..w - margin {
                worst = worst.max((direct.get(&[0, i, j]) - chained.get(&[0, i, j])).abs());
            }
        }
    }
    check(
        identity && shift_exact && worst < 0.05,
        format!("identity bit-equal: {identity}, one-cell shifts exact: {shift_exact}, two-step max-abs {worst:.4}"),
    )
}

fn boxes(rng: &mut ChaCha8Rng, n: usize) -> Vec<ObjectBox> {
    (0..n)
        .map(|_| ObjectBox {
            class_id: ObjectClass::Vehicle,
            center: [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), 0.8],
            size: [4.5, 1.9, 1.6],
            yaw: 0.0,
            velocity: [0.0, 0.0],
            attribute: Attribute::Stopped,
            score: Some(rng.gen_range(0.0..1.0)),
        })
        .collect()
}

fn planar(a: &ObjectBox, b: &ObjectBox) -> f64 {
    (a.center[0] - b.center[0]).hypot(a.center[1] - b.center[1])
}

/// Smallest per-prediction distance sequence (descending score, unmatched
/// as infinity) over every injective assignment within `th`.
fn exhaustive_key(preds: &[ObjectBox], gts: &[ObjectBox], th: f64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.partial_cmp(&preds[a].score).unwrap().then(a.cmp(&b)));
    fn rec(k: usize, order: &[usize], p: &[ObjectBox], g: &[ObjectBox], th: f64, used: &mut [bool], key: &mut Vec<f64>, best: &mut Option<Vec<f64>>) {
        if k == order.len() {
            if best.as_ref().map_or(true, |b| *key < *b) {
                *best = Some(key.clone());
            }
            return;
        }
        key.push(f64::INFINITY);
        rec(k + 1, order, p, g, th, used, key, best);
        key.pop();
        for j in 0..g.len() {
            let d = planar(&p[order[k]], &g[j]);
            if !used[j] && d < th {
                used[j] = true;
                key.push(d);
                rec(k + 1, order, p, g, th, used, key, best);
                key.pop();
                used[j] = false;
            }
        }
    }
    let mut best = None;
    rec(0, &order, preds, gts, th, &mut vec![false; gts.len()], &mut Vec::new(), &mut best);
    best.unwrap()
}

fn greedy_key(preds: &[ObjectBox], gts: &[ObjectBox], th: f64) -> Vec<f64> {
    let m = match_boxes(preds, gts, th, ObjectClass::Vehicle);
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.partial_cmp(&preds[a].score).unwrap().then(a.cmp(&b)));
    order
        .iter()
        .map(|&i| m.pairs.iter().position(|p| p.0 == i).map_or(f64::INFINITY, |k| m.distances[k]))
        .collect()
}

fn metric_oracle(reference: &SimConfig) -> Outcome {
    let data = generate_dataset(reference).unwrap();
    let samples: Vec<SampleBoxes> = data
        .samples
        .iter()
        .map(|s| SampleBoxes {
            id: s.id.clone(),
            preds: s.gt_boxes.iter().cloned().map(|b| ObjectBox { score: Some(1.0), ..b }).collect(),
            gts: s.gt_boxes.clone(),
        })
        .collect();
    let r = evaluate(&samples);
    let replay = r.map == 1.0 && r.mean_tp().as_array() == [0.0; 5] && r.nds == 1.0;

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut cases, mut agree) = (0, 0);
    for np in 0..=3 {
        for ng in 0..=3 {
            for _ in 0..250 {
                let (p, g) = (boxes(&mut rng, np), boxes(&mut rng, ng));
                let th = [0.5, 1.0, 2.0, 4.0][rng.gen_range(0..4)];
                cases += 1;
                agree += (greedy_key(&p, &g, th) == exhaustive_key(&p, &g, th)) as usize;
            }
        }
    }
    check(
        replay && agree == cases,
        format!(
            "GT replay on {} samples: mAP {}, TP errors {:?}, NDS {}; greedy = exhaustive on {agree}/{cases} cases",
            samples.len(),
            r.map,
            r.mean_tp().as_array(),
            r.nds
        ),
    )
}

fn components_grid(runner: &mut AblationRunner, out: &mut Option<AblationTable>) -> Outcome {
    let table = runner.run(AblationAxis::Components, &[0, 1, 2], None).map_err(|e| e.to_string())?;
    println!("{}", table.render());
    let (a, f) = (table.row("A").unwrap().mean_nds(), table.row("F").unwrap().mean_nds());
    let complete = table.rows.len() == 6 && table.rows.iter().all(|r| r.runs.len() == 3);
    *out = Some(table);
    check(complete && f > a, format!("mean NDS F {f:.4} vs A {a:.4} (delta {:+.4})", f - a))
}

fn fusion_grid(runner: &mut AblationRunner) -> Outcome {
    let table = runner.run(AblationAxis::Fusion, &[0], None).map_err(|e| e.to_string())?;
    println!("{}", table.render());
    let mut ranked: Vec<(String, f64)> = table.rows.iter().map(|r| (r.tag.clone(), r.mean_nds())).collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    let order: Vec<String> = ranked.iter().map(|(t, v)| format!("{t} {v:.4}")).collect();
    let all_ran = table.rows.len() == 4 && table.rows.iter().all(|r| r.runs.len() == 1 && (0.0..=1.0).contains(&r.runs[0].report.nds));
    check(all_ran, format!("ordering (D = deformable attention): {}", order.join(" > ")))
}

fn hash_dir(dir: &Path) -> String {
    let mut names: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    names.sort();
    let mut h = Sha256::new();
    for p in names.iter().filter(|p| p.is_file()) {
        h.update(p.file_name().unwrap().to_string_lossy().as_bytes());
        h.update(fs::read(p).unwrap());
    }
    hex::encode(h.finalize())
}

fn determinism(reference: &SimConfig) -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let mut data_hashes = Vec::new();
    for k in 0..2 {
        let dir = root.path().join(format!("data{k}"));
        write_dataset(&generate_dataset(reference).unwrap(), &dir).unwrap();
        data_hashes.push(hash_dir(&dir));
    }
    let sim = SimConfig {
        grid: BevGridSpec::new(32, 32, 1.0, 16.0).unwrap(),
        train_scenes: 8,
        val_scenes: 4,
        ..SimConfig::default()
    };
    let model = DapConfig {
        height_cells: 32,
        width_cells: 32,
        ..DapConfig::default()
    };
    let cfg = TrainConfig {
        epochs_main: 1,
        epochs_finetune: 1,
        lr_main: 2e-3,
        lr_finetune: 2e-4,
        seed: 9,
        ..TrainConfig::default()
    };
    let (mut logs, mut reports) = (Vec::new(), Vec::new());
    for k in 0..2 {
        let data = generate_dataset(&sim).unwrap();
        let run = root.path().join(format!("run{k}"));
        let out = train(&data, &model, &LossConfig::default(), &cfg, Some(&run)).unwrap();
        logs.push(fs::read(run.join(TRAIN_LOG)).unwrap());
        let val: Vec<_> = data.split(Split::Val).collect();
        assert_eq!(val.len(), 4);
        reports.push(serde_json::to_vec(&out.best_report.unwrap()).unwrap());
    }
    check(
        data_hashes[0] == data_hashes[1] && logs[0] == logs[1] && reports[0] == reports[1],
        format!(
            "dataset sha256 {}.. twice, log {} bytes identical: {}, report identical: {}",
            &data_hashes[0][..12],
            logs[0].len(),
            logs[0] == logs[1],
            reports[0] == reports[1]
        ),
    )
}

fn main() {
    let exp = ExperimentConfig::ablation_reference();
    let reference = exp.sim.clone();
    let keep = std::env::var_os("DAP_ACCEPTANCE_DIR").map(PathBuf::from);
    let scratch = tempfile::tempdir().unwrap();
    let out_dir = keep.unwrap_or_else(|| scratch.path().to_path_buf());
    let data = generate_dataset(&reference).unwrap();
    let mut runner = AblationRunner::new(&data, &exp).with_out_dir(&out_dir);
    let mut components = None;

    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    let mut run = |id: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("{tag} criterion {id} ({name}, {secs:.1}s): {detail}");
        let _ = std::io::stdout().flush();
        results.push((id, name, outcome, secs));
    };
    run(1, "NDS formula", &mut nds_formula);
    run(2, "gradient suite", &mut gradient_suite);
    run(3, "joint attention normalization", &mut joint_attention);
    run(4, "residual identity", &mut residual_identity);
    run(5, "alignment exactness", &mut alignment);
    run(6, "metric oracle", &mut || metric_oracle(&reference));
    run(7, "components ablation", &mut || components_grid(&mut runner, &mut components));
    run(8, "fusion variants", &mut || fusion_grid(&mut runner));
    run(9, "determinism", &mut || determinism(&reference));

    println!("\nsummary");
    for (id, name, outcome, secs) in &results {
        let tag = if outcome.is_ok() { "PASS" } else { "FAIL" };
        println!("{tag} criterion {id}: {name} ({secs:.1}s)");
    }
    if results.iter().any(|r| r.2.is_err()) {
        std::process::exit(1);
    }
}
