//! Both ablation grids at toy scale: models A and F, then the four fusion
//! variants, on one seed.

use dap::experiment::{AblationAxis, AblationRunner, ExperimentConfig};
use dap::geometry::BevGridSpec;
use dap::sim::generate_dataset;

fn main() {
    let mut exp = ExperimentConfig::ablation_reference();
    exp.sim.grid = BevGridSpec::new(24, 24, 1.0, 12.0).unwrap();
    exp.sim.agents_min = 1;
    exp.sim.agents_max = 4;
    exp.sim.train_scenes = 16;
    exp.sim.val_scenes = 6;
    exp.train.epochs_main = 2;
    exp.fit_model_to_sim();
    exp.validate().unwrap();
    let data = generate_dataset(&exp.sim).unwrap();

    let mut runner = AblationRunner::new(&data, &exp);
    let rows = ["A".to_string(), "F".to_string()];
    let components = runner.run(AblationAxis::Components, &[0], Some(&rows)).unwrap();
    println!("{}", components.render());
    // row D reuses the run of model F above
    let fusion = runner.run(AblationAxis::Fusion, &[0], None).unwrap();
    println!("{}", fusion.render());
}
