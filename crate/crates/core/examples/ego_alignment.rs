//! Warps a past BEV feature map into the current ego frame.

use std::f64::consts::FRAC_PI_2;

use dap::geometry::{align_bev, BevGridSpec, EgoPose};
use dap::tensor::Tensor;

fn peak(t: &Tensor<f64>, w: usize) -> (usize, usize) {
    let (i, _) = t
        .data()
        .iter()
        .enumerate()
        .fold((0, f64::MIN), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
    (i / w, i % w)
}

fn main() {
    let spec = BevGridSpec::new(16, 16, 1.0, 8.0).unwrap();
    let mut past = Tensor::<f64>::zeros(vec![1, 16, 16]);
    past.set(&[0, 11, 7], 1.0);
    let (x, y) = spec.grid_to_world(11.0, 7.0);
    println!("impulse at cell (11, 7), ego-frame point ({x:.1}, {y:.1}) m");

    let origin = EgoPose::identity();
    for (label, current) in [
        ("drive 2 m forward", EgoPose::new(2.0, 0.0, 0.0)),
        ("step 1 m left", EgoPose::new(0.0, 1.0, 0.0)),
        ("turn left 90 degrees", EgoPose::new(0.0, 0.0, FRAC_PI_2)),
    ] {
        let aligned = align_bev(&past, &origin, &current, &spec).unwrap();
        println!("{label:<22} -> impulse now at {:?}", peak(&aligned, 16));
    }
}
