//! Writes an SVG of one simulated sample with ground truth in blue and
//! jittered copies standing in for two detectors.

use dap::sim::{generate_dataset, ObjectBox, SimConfig};
use dap::viz::{render_svg, BoxLayer, BASELINE_COLOR, GT_COLOR, OURS_COLOR};

fn shifted(boxes: &[ObjectBox], dx: f64, dyaw: f64) -> Vec<ObjectBox> {
    boxes
        .iter()
        .map(|b| {
            let mut b = b.clone();
            b.center[0] += dx;
            b.yaw += dyaw;
            b
        })
        .collect()
}

fn main() {
    let out = std::env::args().nth(1).unwrap_or_else(|| "sample.svg".into());
    let sim = SimConfig {
        train_scenes: 1,
        val_scenes: 0,
        ..SimConfig::default()
    };
    let data = generate_dataset(&sim).unwrap();
    let s = &data.samples[0];
    let base = shifted(&s.gt_boxes, 1.2, 0.3);
    let ours = shifted(&s.gt_boxes, 0.3, 0.05);
    let layers = [
        BoxLayer { name: "ground truth", color: GT_COLOR, boxes: &s.gt_boxes },
        BoxLayer { name: "baseline", color: BASELINE_COLOR, boxes: &base },
        BoxLayer { name: "ours", color: OURS_COLOR, boxes: &ours },
    ];
    let svg = render_svg(&sim.grid, s.observations.last(), &layers, 8.0);
    std::fs::write(&out, svg).unwrap();
    println!("wrote {out} ({} boxes)", s.gt_boxes.len());
}
