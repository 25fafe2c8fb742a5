//! Central finite-difference oracle and the per-operator gradient suite.
//!
//! Every check builds a scalar loss `sum(out ⊙ R)` with a fixed random
//! projection `R`, so all output elements contribute with distinct weights.
//! Error for one instance is `max|analytic − numeric| / max(max|numeric|, 1e-6)`.

use dap::tensor::{Graph, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-5;

pub type Forward = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>;

fn projected_loss(
    inputs: &[Tensor<f64>],
    proj: &Option<Tensor<f64>>,
    f: &Forward,
    track: bool,
) -> (Graph<f64>, Vec<Var>, Var, Tensor<f64>) {
    let mut g = Graph::<f64>::with_verification();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| if track { g.param(t.clone()) } else { g.constant(t.clone()) })
        .collect();
    let out = f(&mut g, &vars).expect("forward failed");
    let out_val = g.value(out).clone();
    let loss = match proj {
        Some(p) => {
            let pv = g.constant(p.clone());
            let m = g.mul(out, pv).unwrap();
            g.sum(m).unwrap()
        }
        None => g.sum(out).unwrap(),
    };
    (g, vars, loss, out_val)
}

/// Maximum normalised error between analytic and central-difference
/// gradients of `sum(f(inputs) ⊙ R)` over every element of every input in
/// `wrt`.
pub fn check_op(inputs: &[Tensor<f64>], wrt: &[usize], f: &Forward, rng: &mut ChaCha8Rng) -> f64 {
    let (_, _, _, out0) = projected_loss(inputs, &None, f, false);
    let proj = if out0.numel() == 1 {
        None
    } else {
        Some(Tensor::from_fn(out0.shape().to_vec(), |_| rng.gen_range(-1.0..1.0)))
    };
    let (mut g, vars, loss, _) = projected_loss(inputs, &proj, f, true);
    g.backward(loss).unwrap();

    let mut max_diff = 0.0f64;
    let mut max_mag = 0.0f64;
    for &i in wrt {
        let analytic = g
            .grad(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape().to_vec()));
        for j in 0..inputs[i].numel() {
            let eval = |delta: f64| {
                let mut pert = inputs.to_vec();
                pert[i].data_mut()[j] += delta;
                let (g2, _, l2, _) = projected_loss(&pert, &proj, f, false);
                g2.value(l2).item()
            };
            let numeric = (eval(FD_EPS) - eval(-FD_EPS)) / (2.0 * FD_EPS);
            max_diff = max_diff.max((analytic.data()[j] - numeric).abs());
            max_mag = max_mag.max(numeric.abs());
        }
    }
    max_diff / max_mag.max(1e-6)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Uniform values kept at least `gap` away from zero (keeps FD off kinks).
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(gap..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Continuous sample coordinates over (and slightly beyond) an `h×w` grid,
/// kept away from integer lines where bilinear interpolation has kinks.
pub fn sample_points(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Tensor<f64> {
    let mut coord = |hi: usize| loop {
        let v: f64 = rng.gen_range(-1.5..hi as f64 + 0.5);
        let frac = v - v.floor();
        if frac > 1e-3 && frac < 1.0 - 1e-3 {
            break v;
        }
    };
    let data = (0..n).flat_map(|_| [coord(h), coord(w)]).collect::<Vec<_>>();
    Tensor::new(vec![n, 2], data).unwrap()
}

pub struct OpCase {
    pub name: &'static str,
    pub make: fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Vec<usize>),
    pub forward: Box<Forward>,
}

fn case(
    name: &'static str,
    make: fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Vec<usize>),
    forward: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError> + 'static,
) -> OpCase {
    OpCase {
        name,
        make,
        forward: Box::new(forward),
    }
}

/// One case per differentiable operator, plus the composite softmax(linear(x)).
pub fn operator_cases() -> Vec<OpCase> {
    vec![
        case(
            "conv2d",
            |r| {
                (
                    vec![uniform(r, &[1, 5, 5], -1.0, 1.0), uniform(r, &[2, 1, 3, 3], -1.0, 1.0), uniform(r, &[2], -1.0, 1.0)],
                    vec![0, 1, 2],
                )
            },
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 0),
        ),
        case(
            "conv2d_strided_padded",
            |r| (vec![uniform(r, &[2, 5, 6], -1.0, 1.0), uniform(r, &[3, 2, 3, 3], -1.0, 1.0)], vec![0, 1]),
            |g, v| g.conv2d(v[0], v[1], None, 2, 1),
        ),
        case(
            "conv3d",
            |r| {
                (
                    vec![uniform(r, &[2, 3, 4, 4], -1.0, 1.0), uniform(r, &[2, 2, 3, 3, 3], -1.0, 1.0), uniform(r, &[2], -1.0, 1.0)],
                    vec![0, 1, 2],
                )
            },
            |g, v| g.conv3d(v[0], v[1], Some(v[2]), [1, 1, 1], [1, 1, 1]),
        ),
        case(
            "conv3d_temporal_collapse",
            |r| (vec![uniform(r, &[2, 3, 3, 3], -1.0, 1.0), uniform(r, &[2, 2, 3, 1, 1], -1.0, 1.0)], vec![0, 1]),
            |g, v| g.conv3d(v[0], v[1], None, [1, 1, 1], [0, 0, 0]),
        ),
        case(
            "bilinear_sample",
            |r| (vec![uniform(r, &[2, 4, 5], -1.0, 1.0), sample_points(r, 7, 4, 5)], vec![0, 1]),
            |g, v| g.bilinear_sample(v[0], v[1]),
        ),
        case(
            "softmax",
            |r| (vec![uniform(r, &[3, 4, 2], -3.0, 3.0)], vec![0]),
            |g, v| g.softmax(v[0], 1),
        ),
        case(
            "matmul",
            |r| (vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 2], -1.0, 1.0)], vec![0, 1]),
            |g, v| g.matmul(v[0], v[1]),
        ),
        case(
            "bmm",
            |r| (vec![uniform(r, &[2, 1, 3], -1.0, 1.0), uniform(r, &[2, 3, 2], -1.0, 1.0)], vec![0, 1]),
            |g, v| g.bmm(v[0], v[1]),
        ),
        case(
            "transpose",
            |r| (vec![uniform(r, &[3, 2], -1.0, 1.0)], vec![0]),
            |g, v| g.transpose(v[0]),
        ),
        case(
            "reshape",
            |r| (vec![uniform(r, &[2, 3], -1.0, 1.0)], vec![0]),
            |g, v| g.reshape(v[0], &[3, 2]),
        ),
        case(
            "concat",
            |r| (vec![uniform(r, &[2, 1, 3], -1.0, 1.0), uniform(r, &[2, 2, 3], -1.0, 1.0)], vec![0, 1]),
            |g, v| g.concat(&[v[0], v[1]], 1),
        ),
        case(
            "narrow",
            |r| (vec![uniform(r, &[2, 5, 2], -1.0, 1.0)], vec![0]),
            |g, v| g.narrow(v[0], 1, 1, 3),
        ),
        case(
            "relu",
            |r| (vec![away_from_zero(r, &[3, 4], 1e-3)], vec![0]),
            |g, v| g.relu(v[0]),
        ),
        case(
            "sigmoid",
            |r| (vec![uniform(r, &[3, 4], -4.0, 4.0)], vec![0]),
            |g, v| g.sigmoid(v[0]),
        ),
        case(
            "abs",
            |r| (vec![away_from_zero(r, &[5], 1e-3)], vec![0]),
            |g, v| g.abs(v[0]),
        ),
        case(
            "group_norm",
            |r| {
                (
                    vec![uniform(r, &[4, 3, 3], -2.0, 2.0), uniform(r, &[4], 0.5, 1.5), uniform(r, &[4], -0.5, 0.5)],
                    vec![0, 1, 2],
                )
            },
            |g, v| g.group_norm(v[0], v[1], v[2], 2),
        ),
        case(
            "upsample_nearest2x",
            |r| (vec![uniform(r, &[2, 2, 3], -1.0, 1.0)], vec![0]),
            |g, v| g.upsample_nearest2x(v[0]),
        ),
        case(
            "upsample_bilinear2x",
            |r| (vec![uniform(r, &[2, 3, 2], -1.0, 1.0)], vec![0]),
            |g, v| g.upsample_bilinear2x(v[0]),
        ),
        case(
            "avg_pool2x",
            |r| (vec![uniform(r, &[2, 4, 4], -1.0, 1.0)], vec![0]),
            |g, v| g.avg_pool2x(v[0]),
        ),
        case(
            "add",
            |r| (vec![uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[2, 3], -1.0, 1.0)], vec![0, 1]),
            |g, v| g.add(v[0], v[1]),
        ),
        case(
            "sub",
            |r| (vec![uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[2, 3], -1.0, 1.0)], vec![0, 1]),
            |g, v| g.sub(v[0], v[1]),
        ),
        case(
            "mul",
            |r| (vec![uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[2, 3], -1.0, 1.0)], vec![0, 1]),
            |g, v| g.mul(v[0], v[1]),
        ),
        case(
            "scale",
            |r| (vec![uniform(r, &[4], -1.0, 1.0)], vec![0]),
            |g, v| g.scale(v[0], -1.7),
        ),
        case(
            "add_bias",
            |r| (vec![uniform(r, &[2, 3, 2], -1.0, 1.0), uniform(r, &[3], -1.0, 1.0)], vec![0, 1]),
            |g, v| g.add_bias(v[0], v[1], 1),
        ),
        case(
            "sum",
            |r| (vec![uniform(r, &[3, 2], -1.0, 1.0)], vec![0]),
            |g, v| g.sum(v[0]),
        ),
        case(
            "mean",
            |r| (vec![uniform(r, &[3, 2], -1.0, 1.0)], vec![0]),
            |g, v| g.mean(v[0]),
        ),
        case(
            "sum_axis",
            |r| (vec![uniform(r, &[3, 4, 2], -1.0, 1.0)], vec![0]),
            |g, v| g.sum_axis(v[0], 1),
        ),
        case(
            "gather_columns",
            |r| (vec![uniform(r, &[2, 6], -1.0, 1.0)], vec![0]),
            |g, v| g.gather_columns(v[0], &[4, 0, 4, 2]),
        ),
        case(
            "focal_loss",
            |r| (vec![uniform(r, &[2, 3, 3], 0.02, 0.98)], vec![0]),
            |g, v| {
                let mut target = Tensor::from_fn(vec![2, 3, 3], |i| ((i * 7 % 9) as f64) / 9.0);
                target.data_mut()[4] = 1.0;
                target.data_mut()[13] = 1.0;
                g.focal_loss(v[0], &target, 2.0, 4.0)
            },
        ),
        case(
            "softmax_of_linear",
            |r| (vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 5], -1.0, 1.0), uniform(r, &[5], -1.0, 1.0)], vec![0, 1, 2]),
            |g, v| {
                let z = g.matmul(v[0], v[1])?;
                let z = g.add_bias(z, v[2], 1)?;
                g.softmax(z, 1)
            },
        ),
    ]
}

/// Runs `instances` random draws of every operator case; returns the worst
/// error per operator.
pub fn run_operator_suite(instances: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    operator_cases()
        .into_iter()
        .map(|c| {
            let worst = (0..instances)
                .map(|_| {
                    let (inputs, wrt) = (c.make)(&mut rng);
                    check_op(&inputs, &wrt, &*c.forward, &mut rng)
                })
                .fold(0.0, f64::max);
            (c.name, worst)
        })
        .collect()
}
