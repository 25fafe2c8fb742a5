//! Generates a small simulated dataset, prints one sample and writes the
//! dataset to the directory given as the first argument (default
//! `sim-data`).

use dap::sim::{generate_dataset, load_dataset, write_dataset, SimConfig};

fn main() {
    let out = std::env::args().nth(1).unwrap_or_else(|| "sim-data".into());
    let cfg = SimConfig {
        train_scenes: 8,
        val_scenes: 2,
        ..SimConfig::default()
    };
    let data = generate_dataset(&cfg).unwrap();
    let s = &data.samples[0];
    println!("{}: {} frames, {} boxes at t", s.id, s.observations.len(), s.gt_boxes.len());
    for b in &s.gt_boxes {
        println!(
            "  {:<10} at ({:6.2}, {:6.2})  yaw {:+.2}  v ({:+.2}, {:+.2})  {:?}",
            b.class_id.name(),
            b.center[0],
            b.center[1],
            b.yaw,
            b.velocity[0],
            b.velocity[1],
            b.attribute
        );
    }
    let occ = &s.observations[cfg.past_frames];
    let occupied = occ.data()[..cfg.grid.cells()].iter().filter(|v| **v > 0.5).count();
    println!("occupied cells in the current frame: {occupied}");

    write_dataset(&data, out.as_ref()).unwrap();
    let back = load_dataset(out.as_ref()).unwrap();
    assert_eq!(back.samples.len(), data.samples.len());
    println!("wrote and reloaded {} samples in {out}", back.samples.len());
}
