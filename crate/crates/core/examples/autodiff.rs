//! Reverse-mode gradients of a small softmax classifier, checked against
//! central differences.

use dap::tensor::{Graph, Tensor};

fn loss(x: &Tensor<f64>, w: &Tensor<f64>, track: bool) -> (Graph<f64>, dap::tensor::Var, dap::tensor::Var) {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = if track { g.param(w.clone()) } else { g.constant(w.clone()) };
    let z = g.matmul(xv, wv).unwrap();
    let p = g.softmax(z, 1).unwrap();
    // pick the probability of class 0 for every row
    let picked = g.gather_columns(p, &[0]).unwrap();
    let l = g.sum(picked).unwrap();
    (g, wv, l)
}

fn main() {
    let x = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 1.5, 0.2, -0.3]).unwrap();
    let w = Tensor::from_fn(vec![3, 4], |i| (i as f64 * 0.37).sin());

    let (mut g, wv, l) = loss(&x, &w, true);
    println!("loss = {:.6}", g.value(l).item());
    g.backward(l).unwrap();
    let grad = g.grad(wv).unwrap().clone();

    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for j in 0..w.numel() {
        let mut plus = w.clone();
        plus.data_mut()[j] += eps;
        let mut minus = w.clone();
        minus.data_mut()[j] -= eps;
        let (gp, _, lp) = loss(&x, &plus, false);
        let (gm, _, lm) = loss(&x, &minus, false);
        let numeric = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * eps);
        worst = worst.max((numeric - grad.data()[j]).abs());
    }
    println!("dL/dW =");
    for row in grad.data().chunks(4) {
        println!("  {}", row.iter().map(|v| format!("{v:+.5}")).collect::<Vec<_>>().join(" "));
    }
    println!("max |analytic - numeric| = {worst:.2e}");
}
