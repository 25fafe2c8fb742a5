use std::collections::BTreeMap;
use std::fs;
use std::io::ErrorKind;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{AdamWConfig, OptimState};
use super::TrainError;
use crate::net::{DapConfig, ParamSet};
use crate::tensor::blob::{self, BlobError};

pub const CHECKPOINT_MANIFEST: &str = "checkpoint.json";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Best validation score seen so far.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub epoch: usize,
    pub nds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: DapConfig,
    pub params: ParamSet<f32>,
    pub optim: OptimState<f32>,
    /// Completed epochs.
    pub epoch: usize,
    pub best: Option<BestRecord>,
}

impl Checkpoint {
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.model == other.model
            && self.epoch == other.epoch
            && self.best == other.best
            && self.params.bit_eq(&other.params)
            && self.optim.bit_eq(&other.optim)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    model: DapConfig,
    epoch: usize,
    step: u64,
    optimizer: AdamWConfig,
    best: Option<BestRecord>,
    params: BTreeMap<String, String>,
    first_moment: BTreeMap<String, String>,
    second_moment: BTreeMap<String, String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_set(dir: &Path, sub: &str, set: &ParamSet<f32>) -> Result<BTreeMap<String, String>, TrainError> {
    let folder = dir.join(sub);
    fs::create_dir_all(&folder).map_err(io_err(&folder))?;
    let mut names = BTreeMap::new();
    for (name, t) in set.iter() {
        let rel = format!("{sub}/{name}.dapt");
        let path = dir.join(&rel);
        blob::write(&path, t).map_err(|source| TrainError::Blob { path, source })?;
        names.insert(name.clone(), rel);
    }
    Ok(names)
}

fn read_set(dir: &Path, names: &BTreeMap<String, String>) -> Result<ParamSet<f32>, TrainError> {
    let mut set = ParamSet::new();
    for (name, rel) in names {
        let path = dir.join(rel);
        let t = match blob::read(&path) {
            Ok(t) => t,
            Err(BlobError::Io { source, .. }) if source.kind() == ErrorKind::NotFound => {
                return Err(TrainError::MissingFile(path))
            }
            Err(source) => return Err(TrainError::Blob { path, source }),
        };
        set.insert(name, t);
    }
    Ok(set)
}

pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<(), TrainError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        model: ckpt.model.clone(),
        epoch: ckpt.epoch,
        step: ckpt.optim.step,
        optimizer: ckpt.optim.hyper,
        best: ckpt.best,
        params: write_set(dir, "params", &ckpt.params)?,
        first_moment: write_set(dir, "m", &ckpt.optim.m)?,
        second_moment: write_set(dir, "v", &ckpt.optim.v)?,
    };
    let path = dir.join(CHECKPOINT_MANIFEST);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(io_err(&path))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint, TrainError> {
    let path = dir.join(CHECKPOINT_MANIFEST);
    let text = match fs::read(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == ErrorKind::NotFound => return Err(TrainError::MissingFile(path)),
        Err(e) => return Err(io_err(&path)(e)),
    };
    let raw: serde_json::Value = serde_json::from_slice(&text)?;
    let version = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::Version { found: version });
    }
    let m: Manifest = serde_json::from_value(raw)?;
    let params = read_set(dir, &m.params)?;
    let ckpt = Checkpoint {
        model: m.model,
        optim: OptimState {
            hyper: m.optimizer,
            step: m.step,
            m: read_set(dir, &m.first_moment)?,
            v: read_set(dir, &m.second_moment)?,
        },
        params,
        epoch: m.epoch,
        best: m.best,
    };
    let diffs = shape_diff(&ckpt.model, &ckpt.params);
    if !diffs.is_empty() {
        return Err(TrainError::Mismatch(diffs));
    }
    for (what, set) in [("first moment", &ckpt.optim.m), ("second moment", &ckpt.optim.v)] {
        let d = set_diff(&ckpt.params, set);
        if !d.is_empty() {
            return Err(TrainError::Mismatch(d.into_iter().map(|s| format!("{what}: {s}")).collect()));
        }
    }
    Ok(ckpt)
}

/// Loads a checkpoint and checks it against the model it will run in.
pub fn load_checkpoint_for(dir: &Path, model: &DapConfig) -> Result<Checkpoint, TrainError> {
    let ckpt = load_checkpoint(dir)?;
    let diffs = shape_diff(model, &ckpt.params);
    if !diffs.is_empty() {
        return Err(TrainError::Mismatch(diffs));
    }
    Ok(ckpt)
}

/// One line per parameter whose presence or shape differs from what
/// `model` declares.
pub fn shape_diff(model: &DapConfig, params: &ParamSet<f32>) -> Vec<String> {
    let mut out = Vec::new();
    let specs = model.param_specs();
    for s in &specs {
        match params.get(&s.name) {
            None => out.push(format!("{}: expected {:?}, missing", s.name, s.shape)),
            Some(t) if t.shape() != s.shape.as_slice() => {
                out.push(format!("{}: expected {:?}, found {:?}", s.name, s.shape, t.shape()))
            }
            Some(_) => {}
        }
    }
    for name in params.names() {
        if !specs.iter().any(|s| &s.name == name) {
            out.push(format!("{name}: unexpected"));
        }
    }
    out
}

fn set_diff(a: &ParamSet<f32>, b: &ParamSet<f32>) -> Vec<String> {
    let mut out = Vec::new();
    for (name, t) in a.iter() {
        match b.get(name) {
            None => out.push(format!("{name}: missing")),
            Some(u) if u.shape() != t.shape() => out.push(format!("{name}: {:?} vs {:?}", u.shape(), t.shape())),
            Some(_) => {}
        }
    }
    if a.len() != b.len() {
        out.push(format!("{} tensors vs {}", b.len(), a.len()));
    }
    out
}
