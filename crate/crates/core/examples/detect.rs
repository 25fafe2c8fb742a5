//! Targets, losses and decoded detections of an untrained model on one
//! simulated sample.

use dap::loss::{render_targets, total_loss, LossConfig};
use dap::net::{decode_detections, forward, predict_maps, Bound, DapConfig};
use dap::sim::{generate_dataset, SimConfig};
use dap::tensor::Graph;

fn main() {
    let sim = SimConfig {
        train_scenes: 1,
        val_scenes: 0,
        ..SimConfig::default()
    };
    let data = generate_dataset(&sim).unwrap();
    let sample = &data.samples[0];
    let input = sample.aligned(&sim).unwrap();
    let model = DapConfig::default();
    let params = model.init_params::<f32>(0);
    println!("{} parameters", model.param_count());

    let loss_cfg = LossConfig::default();
    let targets = render_targets::<f32>(sample.prediction_targets(), &sim.grid, model.num_classes, &loss_cfg);
    let mut g = Graph::new();
    let p = Bound::new(&mut g, &params, false);
    let out = forward(&mut g, &model, &p, &input).unwrap();
    let l = total_loss(&mut g, &out.det, out.pred.as_ref(), &targets, &loss_cfg).unwrap();
    println!("{:?}", l.values(&g));

    let (maps, _) = predict_maps(&model, &params, &input).unwrap();
    let dets = decode_detections(&maps, &sim.grid, 0.05, 10);
    println!("{} ground-truth boxes, top {} detections:", sample.gt_boxes.len(), dets.len());
    for d in dets.iter().take(5) {
        println!("  {:<10} score {:.3} at ({:6.2}, {:6.2})", d.class_id.name(), d.score.unwrap(), d.center[0], d.center[1]);
    }
}
