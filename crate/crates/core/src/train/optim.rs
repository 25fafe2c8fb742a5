use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::net::ParamSet;
use crate::tensor::Float;

/// Hyper-parameters of the optimizer that are not stored per parameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 2e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers shaped like the parameters, plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T: Float = f32> {
    pub hyper: AdamWConfig,
    pub step: u64,
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
}

impl<T: Float> OptimState<T> {
    pub fn new(params: &ParamSet<T>, hyper: AdamWConfig) -> Self {
        OptimState {
            hyper,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.hyper == other.hyper && self.step == other.step && self.m.bit_eq(&other.m) && self.v.bit_eq(&other.v)
    }
}

fn check_shapes<T: Float>(params: &ParamSet<T>, other: &ParamSet<T>, what: &str) -> Result<(), TrainError> {
    if params.len() != other.len() {
        return Err(TrainError::Shape(format!(
            "{what} has {} tensors, parameters have {}",
            other.len(),
            params.len()
        )));
    }
    for (name, p) in params.iter() {
        match other.get(name) {
            Some(t) if t.shape() == p.shape() => {}
            Some(t) => {
                return Err(TrainError::Shape(format!(
                    "{what} {name}: {:?} vs parameter {:?}",
                    t.shape(),
                    p.shape()
                )))
            }
            None => return Err(TrainError::Shape(format!("{what} lacks {name}"))),
        }
    }
    Ok(())
}

/// One AdamW update. Weight decay shrinks parameters directly by
/// `lr · weight_decay` before the adaptive step.
pub fn adamw_step<T: Float>(
    params: &mut ParamSet<T>,
    grads: &ParamSet<T>,
    state: &mut OptimState<T>,
) -> Result<(), TrainError> {
    check_shapes(params, grads, "gradient")?;
    check_shapes(params, &state.m, "first moment")?;
    check_shapes(params, &state.v, "second moment")?;
    state.step += 1;
    let h = state.hyper;
    let t = state.step as i32;
    let bc1 = 1.0 - h.beta1.powi(t);
    let bc2 = 1.0 - h.beta2.powi(t);
    let c = |x: f64| T::from_f64_lossy(x);
    let (b1, b2, eps) = (c(h.beta1), c(h.beta2), c(h.eps));
    let (one, decay, lr) = (T::one(), c(1.0 - h.lr * h.weight_decay), c(h.lr));
    let (inv_bc1, inv_sqrt_bc2) = (c(1.0 / bc1), c(1.0 / bc2.sqrt()));
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).expect("checked");
        let m = state.m.get_mut(name).expect("checked");
        let v = state.v.get_mut(name).expect("checked");
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *p = *p * decay;
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m * inv_bc1;
            let v_hat = v.sqrt() * inv_sqrt_bc2;
            *p = *p - lr * m_hat / (v_hat + eps);
        }
    }
    Ok(())
}

pub fn global_norm<T: Float>(grads: &ParamSet<T>) -> f64 {
    grads
        .iter()
        .flat_map(|(_, t)| t.data().iter().map(|v| v.as_f64() * v.as_f64()))
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Float>(grads: &mut ParamSet<T>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = T::from_f64_lossy(max_norm / (norm + 1e-6));
        for (_, t) in grads.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = *v * s);
        }
    }
    norm
}
