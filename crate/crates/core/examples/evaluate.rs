//! Detection metrics on a handful of hand-made boxes.

use dap::metrics::{evaluate, match_boxes, SampleBoxes};
use dap::sim::{Attribute, ObjectBox, ObjectClass};

fn vehicle(x: f64, y: f64, yaw: f64, score: Option<f64>) -> ObjectBox {
    ObjectBox {
        class_id: ObjectClass::Vehicle,
        center: [x, y, 0.8],
        size: [4.5, 1.9, 1.6],
        yaw,
        velocity: [3.0, 0.0],
        attribute: Attribute::Moving,
        score,
    }
}

fn main() {
    let gts = vec![vehicle(10.0, 2.0, 0.0, None), vehicle(-5.0, -3.0, 1.5, None), vehicle(20.0, 8.0, 0.2, None)];
    let preds = vec![
        vehicle(10.3, 2.1, 0.1, Some(0.9)),
        vehicle(-4.2, -3.5, 1.2, Some(0.7)),
        vehicle(0.0, 15.0, 0.0, Some(0.6)),
    ];
    let m = match_boxes(&preds, &gts, 2.0, ObjectClass::Vehicle);
    println!("pairs {:?}, distances {:?}", m.pairs, m.distances.iter().map(|d| format!("{d:.2}")).collect::<Vec<_>>());
    println!("false positives {:?}, missed {:?}\n", m.unmatched_preds, m.unmatched_gts);

    let report = evaluate(&[SampleBoxes {
        id: "demo".into(),
        preds,
        gts,
    }]);
    print!("{}", report.summary_table());
    println!();
    print!("{}", report.class_table());
}
