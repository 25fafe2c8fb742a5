use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dap::experiment::{ExperimentConfig, CONFIG_ECHO};
use dap::geometry::BevGridSpec;
use dap::metrics::MetricsReport;
use dap::sim::{load_dataset, ObjectBox};
use sha2::{Digest, Sha256};

const TINY: &str = r#"
[sim]
train_scenes = 4
val_scenes = 3
agents_min = 1
agents_max = 3

[sim.grid]
height_cells = 16
width_cells = 16
cell_size = 1.0
extent = 8.0

[model]
height_cells = 16
width_cells = 16

[train]
epochs_main = 1
epochs_finetune = 1
lr_main = 2e-3
lr_finetune = 2e-4
batch_size = 2
"#;

fn dap(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dap"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Workspace with `tiny.toml` and a generated dataset in `data/`.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let o = dap(&["gen-data", "--config", "tiny.toml", "--out", "data"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    dir
}

/// SHA-256 over file names and contents, in name order.
fn dir_hash(dir: &Path) -> String {
    let mut names: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    names.sort();
    let mut h = Sha256::new();
    for p in names {
        h.update(p.file_name().unwrap().to_string_lossy().as_bytes());
        h.update(fs::read(&p).unwrap());
    }
    hex::encode(h.finalize())
}

fn echoed(dir: &Path) -> ExperimentConfig {
    ExperimentConfig::from_toml(&fs::read_to_string(dir.join(CONFIG_ECHO)).unwrap()).unwrap()
}

#[test]
fn gen_data_writes_and_refuses_to_overwrite() {
    let ws = workspace();
    let data = ws.path().join("data");
    assert!(data.join("manifest.json").exists());
    assert_eq!(load_dataset(&data).unwrap().samples.len(), 7);
    assert_eq!(echoed(&data).sim.train_scenes, 4);

    let o = dap(&["gen-data", "--config", "tiny.toml", "--out", "data"], ws.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("not empty"), "{}", stderr(&o));

    let o = dap(&["gen-data", "--config", "tiny.toml", "--out", "data", "--force", "--seed", "5"], ws.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(load_dataset(&data).unwrap().config.seed, 5);
}

#[test]
fn gen_data_with_the_same_seed_is_byte_identical() {
    let ws = workspace();
    for out in ["a", "b"] {
        let o = dap(&["--seed", "7", "gen-data", "--config", "tiny.toml", "--out", out], ws.path());
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    assert_eq!(dir_hash(&ws.path().join("a")), dir_hash(&ws.path().join("b")));
    assert_ne!(dir_hash(&ws.path().join("a")), dir_hash(&ws.path().join("data")));
}

#[test]
fn train_then_eval_produces_a_report() {
    let ws = workspace();
    let o = dap(&["train", "--config", "tiny.toml", "--data", "data", "--out", "run"], ws.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let run = ws.path().join("run");
    assert!(run.join("best/checkpoint.json").exists() && run.join("train_log.jsonl").exists());
    assert_eq!(echoed(&run).train.epochs_main, 1);

    let o = dap(&["eval", "--checkpoint", "run/best", "--data", "data", "--out", "ev"], ws.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: MetricsReport = serde_json::from_slice(&fs::read(ws.path().join("ev/metrics.json")).unwrap()).unwrap();
    assert!((0.0..=1.0).contains(&report.nds));
    assert_eq!(report.num_samples, 3);
    assert!(ws.path().join("ev").join(CONFIG_ECHO).exists());
    assert!(ws.path().join("ev/predictions.json").exists());
}

#[test]
fn train_without_a_dataset_fails() {
    let ws = workspace();
    let o = dap(&["train", "--config", "tiny.toml", "--data", "missing", "--out", "run"], ws.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("missing"), "{}", stderr(&o));
}

#[test]
fn eval_reference_modes() {
    let ws = workspace();
    let o = dap(&["eval", "--oracle", "--data", "data", "--out", "oracle"], ws.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let header: Vec<String> = stdout(&o).lines().next().unwrap().split_whitespace().map(String::from).collect();
    assert_eq!(header, ["NDS", "mAP", "mATE", "mASE", "mAOE", "mAVE", "mAAE"]);
    let r: MetricsReport = serde_json::from_slice(&fs::read(ws.path().join("oracle/metrics.json")).unwrap()).unwrap();
    assert_eq!(r.nds, 1.0);

    let o = dap(&["eval", "--empty", "--data", "data", "--out", "empty"], ws.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: MetricsReport = serde_json::from_slice(&fs::read(ws.path().join("empty/metrics.json")).unwrap()).unwrap();
    assert_eq!(r.map, 0.0);
}

#[test]
fn usage_errors_exit_with_two() {
    let ws = workspace();
    assert_eq!(code(&dap(&["frobnicate"], ws.path())), 2);
    assert_eq!(code(&dap(&["eval", "--data", "data"], ws.path())), 2);
    assert_eq!(code(&dap(&["ablate", "--axes", "sideways"], ws.path())), 2);
    fs::write(ws.path().join("bad.toml"), "[model]\nwidht = 4\n").unwrap();
    let o = dap(&["gen-data", "--config", "bad.toml", "--out", "x"], ws.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("widht"), "{}", stderr(&o));
    assert!(!ws.path().join("x").exists());
}

#[test]
fn ablate_runs_requested_rows_with_flag_marks() {
    let ws = workspace();
    let o = dap(
        &["ablate", "--config", "tiny.toml", "--data", "data", "--out", "abl", "--rows", "A,F", "--seeds", "0"],
        ws.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(ws.path().join("abl/components.txt")).unwrap();
    let row = |tag: &str| text.lines().find(|l| l.starts_with(tag)).unwrap().to_string();
    assert_eq!(row("A ").matches('✓').count(), 1);
    assert_eq!(row("F ").matches('✓').count(), 4);
    assert!(!text.lines().any(|l| l.starts_with("B ")));
    assert!(ws.path().join("abl/components/A-seed0/best/checkpoint.json").exists());
    assert!(ws.path().join("abl").join(CONFIG_ECHO).exists());
}

#[test]
fn ablate_fusion_axis_evaluates_all_variants() {
    let ws = workspace();
    let o = dap(
        &["ablate", "--config", "tiny.toml", "--data", "data", "--out", "abl", "--axes", "fusion", "--seeds", "1"],
        ws.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(ws.path().join("abl/fusion.txt")).unwrap();
    for label in ["channel-wise attention", "concat + 1D conv", "concat + 2D conv", "deformable attention"] {
        assert!(text.contains(label), "{label} missing:\n{text}");
    }
}

/// Parses the `points` attribute of every polygon inside the group named
/// `class`.
fn polygons(svg: &str, class: &str) -> Vec<Vec<(f64, f64)>> {
    let start = svg.find(&format!(r#"<g class="{class}""#)).unwrap();
    let end = start + svg[start..].find("</g>").unwrap();
    svg[start..end]
        .lines()
        .filter_map(|l| l.strip_prefix(r#"<polygon points=""#))
        .map(|l| {
            l.trim_end_matches(r#""/>"#)
                .split(' ')
                .map(|p| {
                    let (x, y) = p.split_once(',').unwrap();
                    (x.parse().unwrap(), y.parse().unwrap())
                })
                .collect()
        })
        .collect()
}

#[test]
fn render_projects_corners_onto_the_grid() {
    let ws = workspace();
    let scale = 6.0;
    let o = dap(
        &["render", "--data", "data", "--sample", "scene-00001", "--out", "fig/s1.svg", "--scale", "6"],
        ws.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let svg = fs::read_to_string(ws.path().join("fig/s1.svg")).unwrap();
    assert!(svg.contains(r##"<g class="ground truth" stroke="#1f5fd6""##));
    let data = load_dataset(&ws.path().join("data")).unwrap();
    let gt: &[ObjectBox] = &data.samples[1].gt_boxes;
    let drawn = polygons(&svg, "ground truth");
    assert_eq!(drawn.len(), gt.len());
    let spec = BevGridSpec::new(16, 16, 1.0, 8.0).unwrap();
    for (b, poly) in gt.iter().zip(&drawn) {
        for (&(x, y), &(px, py)) in b.corners().iter().zip(poly) {
            // image column grows to the right (-y), image row grows backwards (-x)
            let (row, col) = spec.world_to_grid(x, y);
            let want = ((15.5 - col) * scale, (15.5 - row) * scale);
            assert!((px - want.0).abs() <= 1.0 && (py - want.1).abs() <= 1.0, "{:?} vs {want:?}", (px, py));
        }
    }
}

#[test]
fn render_colours_each_prediction_source() {
    let ws = workspace();
    let data = load_dataset(&ws.path().join("data")).unwrap();
    let s = &data.samples[0];
    let mut file = std::collections::BTreeMap::new();
    file.insert(s.id.clone(), s.gt_boxes.clone());
    fs::write(ws.path().join("p.json"), serde_json::to_vec(&file).unwrap()).unwrap();
    let o = dap(
        &["render", "--data", "data", "--sample", "0", "--predictions", "p.json", "--baseline", "p.json", "--out", "a.svg"],
        ws.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let svg = fs::read_to_string(ws.path().join("a.svg")).unwrap();
    assert!(svg.contains(r##"<g class="baseline" stroke="#2ca02c""##));
    assert!(svg.contains(r##"<g class="ours" stroke="#8e44ad""##));
    assert_eq!(polygons(&svg, "ours"), polygons(&svg, "ground truth"));
}

#[test]
fn render_rejects_an_unknown_sample() {
    let ws = workspace();
    let o = dap(&["render", "--data", "data", "--sample", "70", "--out", "x.svg"], ws.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("no sample"), "{}", stderr(&o));
    assert!(!ws.path().join("x.svg").exists());
}

#[test]
fn shipped_configs_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let reference = ExperimentConfig::load(&dir.join("reference.toml")).unwrap();
    reference.validate().unwrap();
    let want = ExperimentConfig::ablation_reference();
    assert_eq!(reference.to_toml().unwrap(), want.to_toml().unwrap());
    let mut tiny = ExperimentConfig::load(&dir.join("tiny.toml")).unwrap();
    tiny.fit_model_to_sim();
    tiny.validate().unwrap();
}
