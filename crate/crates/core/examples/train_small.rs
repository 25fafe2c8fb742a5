//! Trains the full model on a 32×32 dataset for a few epochs and reports
//! validation metrics. Pass a directory to keep the log and checkpoints.

use dap::geometry::BevGridSpec;
use dap::loss::LossConfig;
use dap::net::DapConfig;
use dap::sim::{generate_dataset, SimConfig};
use dap::train::{train, LogRecord, TrainConfig};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let run_dir = std::env::args().nth(1);
    let sim = SimConfig {
        grid: BevGridSpec::new(32, 32, 1.0, 16.0).unwrap(),
        agents_min: 2,
        agents_max: 5,
        train_scenes: 32,
        val_scenes: 8,
        ..SimConfig::default()
    };
    let data = generate_dataset(&sim).unwrap();
    let model = DapConfig {
        height_cells: 32,
        width_cells: 32,
        ..DapConfig::default()
    };
    let cfg = TrainConfig {
        epochs_main: 4,
        epochs_finetune: 1,
        lr_main: 2e-3,
        lr_finetune: 2e-4,
        ..TrainConfig::default()
    };
    let out = train(&data, &model, &LossConfig::default(), &cfg, run_dir.as_deref().map(std::path::Path::new)).unwrap();
    for r in &out.log {
        if let LogRecord::Epoch { epoch, phase, train_loss, val, .. } = r {
            let nds = val.as_ref().map_or(f64::NAN, |v| v.nds);
            println!("epoch {epoch} {phase:<8} loss {train_loss:8.4}  val NDS {nds:.4}");
        }
    }
    if let Some(report) = out.best_report {
        println!("\nbest epoch {}", out.best.unwrap().epoch);
        print!("{}", report.summary_table());
    }
}
