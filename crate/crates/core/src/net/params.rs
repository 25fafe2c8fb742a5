use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::NetError;
use crate::tensor::{Float, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zero,
    Const(f64),
    /// Uniform on ±gain·√(6 / fan_in).
    He { fan_in: usize, gain: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape,
            init,
        }
    }
}

/// Conv weight `[co, ci, k...]` plus zero bias `[co]`.
pub(crate) fn conv_specs(out: &mut Vec<ParamSpec>, name: &str, co: usize, ci: usize, kernel: &[usize], gain: f64) {
    let mut shape = vec![co, ci];
    shape.extend_from_slice(kernel);
    let fan_in = ci * kernel.iter().product::<usize>();
    out.push(ParamSpec::new(format!("{name}.w"), shape, Init::He { fan_in, gain }));
    out.push(ParamSpec::new(format!("{name}.b"), vec![co], Init::Zero));
}

pub(crate) fn norm_specs(out: &mut Vec<ParamSpec>, name: &str, c: usize) {
    out.push(ParamSpec::new(format!("{name}.gamma"), vec![c], Init::Const(1.0)));
    out.push(ParamSpec::new(format!("{name}.beta"), vec![c], Init::Zero));
}

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<T: Float = f32> {
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Float> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            entries: BTreeMap::new(),
        }
    }

    /// Draws every spec in order from a ChaCha8 stream seeded with `seed`.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        for s in specs {
            let n: usize = s.shape.iter().product();
            let data = match s.init {
                Init::Zero => vec![T::zero(); n],
                Init::Const(v) => vec![T::from_f64_lossy(v); n],
                Init::He { fan_in, gain } => {
                    let bound = gain * (6.0 / fan_in.max(1) as f64).sqrt();
                    (0..n).map(|_| T::from_f64_lossy(rng.gen_range(-bound..=bound))).collect()
                }
            };
            set.insert(&s.name, Tensor::new(s.shape.clone(), data).expect("spec shape"));
        }
        set
    }

    pub fn insert(&mut self, name: &str, t: Tensor<T>) {
        self.entries.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Float>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Zero tensors with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
                .collect(),
        }
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
    }
}

/// Parameters registered as graph leaves for one forward pass.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Registers every parameter; `trainable` decides whether gradients are tracked.
    pub fn new<T: Float>(g: &mut Graph<T>, params: &ParamSet<T>, trainable: bool) -> Self {
        let vars = params
            .iter()
            .map(|(k, v)| {
                let var = if trainable { g.param(v.clone()) } else { g.constant(v.clone()) };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var, NetError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| NetError::MissingParam(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Collects leaf gradients by name; parameters the loss never reached get zeros.
    pub fn grads<T: Float>(&self, g: &mut Graph<T>) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for (k, &v) in &self.vars {
            let grad = g
                .take_grad(v)
                .unwrap_or_else(|| Tensor::zeros(g.shape(v).to_vec()));
            out.insert(k, grad);
        }
        out
    }
}
