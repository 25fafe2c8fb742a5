//! One fusion pass on random features: joint attention weights, shared
//! sampling points and the residual output.

use dap::net::{fuse, Bound, DapConfig, FdfaTrace, FusionKind};
use dap::tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = DapConfig {
        height_cells: 4,
        width_cells: 4,
        ..DapConfig::default()
    };
    let mut params = cfg.init_params::<f64>(0);
    for (_, t) in params.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.5..0.5));
    }
    let feature = |rng: &mut ChaCha8Rng| Tensor::from_fn(vec![cfg.width, 4, 4], |_| rng.gen_range(-1.0..1.0));
    let (b_o, b_f) = (feature(&mut rng), feature(&mut rng));

    let mut g = Graph::new();
    let p = Bound::new(&mut g, &params, false);
    let (o, f) = (g.constant(b_o.clone()), g.constant(b_f.clone()));
    let mut trace = FdfaTrace::default();
    let out = fuse(&mut g, &cfg, &p, o, f, Some(&mut trace)).unwrap();

    let a = &trace.attention[0];
    let k = cfg.points;
    let row = &a.data()[..2 * k];
    println!("head 0, cell (0,0): weights on B_o {:?}, on B_f {:?}", &row[..k], &row[k..]);
    println!("sum = {:.12}", row.iter().sum::<f64>());
    let pts = &trace.points_o[0];
    println!("first sampling point (row, col) = ({:.3}, {:.3})", pts.data()[0], pts.data()[1]);
    println!("same coordinates for both maps: {}", trace.points_o.iter().zip(&trace.points_f).all(|(a, b)| a.bit_eq(b)));
    println!("|B_hat - B_o|max = {:.4}", g.value(out).max_abs_diff(&b_o));

    for kind in FusionKind::ALL {
        let cfg = DapConfig { fusion: kind, ..cfg.clone() };
        println!("{:<38} {:>6} parameters", kind.label(), cfg.param_count());
    }
}
