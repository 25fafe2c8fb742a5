//! AdamW, the two-phase training loop and checkpoints.

mod checkpoint;
mod optim;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_for, save_checkpoint, shape_diff, BestRecord, Checkpoint, CHECKPOINT_MANIFEST,
    CHECKPOINT_VERSION,
};
pub use optim::{adamw_step, clip_grad_norm, global_norm, AdamWConfig, OptimState};

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{AlignedBevSequence, BevGridSpec, GeometryError};
use crate::loss::{render_targets, total_loss, LossBreakdown, LossConfig, TargetMaps};
use crate::metrics::{evaluate, MetricsReport, SampleBoxes};
use crate::net::{decode_detections, forward, predict_maps, Bound, DapConfig, NetError, ParamSet};
use crate::sim::{scene_seed, Dataset, ObjectBox, SceneSample, Split};
use crate::tensor::blob::BlobError;
use crate::tensor::Graph;

pub const TRAIN_LOG: &str = "train_log.jsonl";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint does not fit the model:\n  {}", .0.join("\n  "))]
    Mismatch(Vec<String>),
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch} (samples {samples:?})")]
    NonFinite {
        epoch: usize,
        batch: usize,
        samples: Vec<String>,
        loss: f64,
    },
    #[error("unsupported checkpoint version {found} (expected {CHECKPOINT_VERSION})")]
    Version { found: u32 },
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("bad tensor blob {path}: {source}")]
    Blob { path: PathBuf, source: BlobError },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_main: usize,
    pub epochs_finetune: usize,
    pub lr_main: f64,
    pub lr_finetune: f64,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Validate every this many epochs (the last epoch is always validated).
    pub eval_every: usize,
    pub score_threshold: f64,
    pub max_detections: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_main: 20,
            epochs_finetune: 4,
            lr_main: 2e-4,
            lr_finetune: 2e-5,
            batch_size: 4,
            grad_clip: 35.0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            eval_every: 1,
            score_threshold: 0.05,
            max_detections: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lr_main > 0.0 && self.lr_finetune > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return bad("batch_size and eval_every must be at least 1");
        }
        if !(self.grad_clip > 0.0) || self.weight_decay < 0.0 {
            return bad("grad_clip must be positive and weight_decay non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("betas must lie in [0, 1) and eps must be positive");
        }
        if self.epochs_main + self.epochs_finetune == 0 {
            return bad("at least one epoch is required");
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs_main + self.epochs_finetune
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.epochs_main {
            self.lr_main
        } else {
            self.lr_finetune
        }
    }

    fn adamw(&self, lr: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Validation summary written to the log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValSummary {
    pub nds: f64,
    pub map: f64,
    pub mate: f64,
    pub mase: f64,
    pub maoe: f64,
    pub mave: f64,
    pub maae: f64,
}

impl From<&MetricsReport> for ValSummary {
    fn from(r: &MetricsReport) -> Self {
        ValSummary {
            nds: r.nds,
            map: r.map,
            mate: r.mate,
            mase: r.mase,
            maoe: r.maoe,
            mave: r.mave,
            maae: r.maae,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        epoch: usize,
        step: u64,
        batch: usize,
        lr: f64,
        grad_norm: f64,
        #[serde(flatten)]
        loss: LossBreakdown,
    },
    Epoch {
        epoch: usize,
        phase: String,
        lr: f64,
        train_loss: f64,
        val: Option<ValSummary>,
    },
}

/// A sample with its aligned input and rendered targets.
pub struct Prepared {
    pub id: String,
    pub input: AlignedBevSequence<f32>,
    pub targets: TargetMaps<f32>,
    pub gt: Vec<ObjectBox>,
}

pub fn prepare(dataset: &Dataset, split: Split, model: &DapConfig, loss: &LossConfig) -> Result<Vec<Prepared>, TrainError> {
    dataset
        .split(split)
        .map(|s| prepare_sample(s, dataset, model, loss))
        .collect()
}

fn prepare_sample(s: &SceneSample, dataset: &Dataset, model: &DapConfig, loss: &LossConfig) -> Result<Prepared, TrainError> {
    let input = s.aligned(&dataset.config)?;
    if input.frames.len() != model.past_frames + 1 {
        return Err(NetError::FrameCount {
            op: "dataset",
            expected: model.past_frames + 1,
            got: input.frames.len(),
        }
        .into());
    }
    Ok(Prepared {
        id: s.id.clone(),
        input,
        targets: render_targets(s.prediction_targets(), &dataset.config.grid, model.num_classes, loss),
        gt: s.gt_boxes.clone(),
    })
}

/// Decoded detections of one aligned input.
pub fn detect(
    model: &DapConfig,
    params: &ParamSet<f32>,
    input: &AlignedBevSequence<f32>,
    grid: &BevGridSpec,
    score_threshold: f64,
    max_detections: usize,
) -> Result<Vec<ObjectBox>, TrainError> {
    let (maps, _) = predict_maps(model, params, input)?;
    Ok(decode_detections(&maps, grid, score_threshold, max_detections))
}

/// Predictions for every prepared sample, paired with its ground truth.
pub fn predict_all(
    model: &DapConfig,
    params: &ParamSet<f32>,
    samples: &[Prepared],
    grid: &BevGridSpec,
    cfg: &TrainConfig,
) -> Result<Vec<SampleBoxes>, TrainError> {
    samples
        .iter()
        .map(|s| {
            Ok(SampleBoxes {
                id: s.id.clone(),
                preds: detect(model, params, &s.input, grid, cfg.score_threshold, cfg.max_detections)?,
                gts: s.gt.clone(),
            })
        })
        .collect()
}

/// Loss and parameter gradients of one sample.
fn sample_grads(
    model: &DapConfig,
    loss: &LossConfig,
    params: &ParamSet<f32>,
    s: &Prepared,
) -> Result<(LossBreakdown, ParamSet<f32>), TrainError> {
    let mut g = Graph::new();
    let p = Bound::new(&mut g, params, true);
    let out = forward(&mut g, model, &p, &s.input)?;
    let heads = std::iter::once(out.det).chain(out.pred);
    if heads.flat_map(|h| [h.heatmap].into_iter().chain(h.regressions())).any(|v| !g.value(v).is_finite()) {
        let nan = LossBreakdown {
            l_pred_focal: f64::NAN,
            l_pred_reg: f64::NAN,
            l_det_focal: f64::NAN,
            l_det_reg: f64::NAN,
            total: f64::NAN,
        };
        return Ok((nan, ParamSet::new()));
    }
    let l = total_loss(&mut g, &out.det, out.pred.as_ref(), &s.targets, loss)?;
    let values = l.values(&g);
    if !values.total.is_finite() {
        return Ok((values, ParamSet::new()));
    }
    g.backward(l.total).map_err(NetError::from)?;
    Ok((values, p.grads(&mut g)))
}

fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len() as f64;
    let avg = |f: fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
    LossBreakdown {
        l_pred_focal: avg(|b| b.l_pred_focal),
        l_pred_reg: avg(|b| b.l_pred_reg),
        l_det_focal: avg(|b| b.l_det_focal),
        l_det_reg: avg(|b| b.l_det_reg),
        total: avg(|b| b.total),
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best_params: ParamSet<f32>,
    pub best: Option<BestRecord>,
    pub best_report: Option<MetricsReport>,
    pub last: Checkpoint,
    pub log: Vec<LogRecord>,
}

pub struct Trainer {
    model: DapConfig,
    loss: LossConfig,
    cfg: TrainConfig,
    grid: BevGridSpec,
    train: Vec<Prepared>,
    val: Vec<Prepared>,
    params: ParamSet<f32>,
    optim: OptimState<f32>,
    epoch: usize,
    best: Option<BestRecord>,
    best_params: Option<ParamSet<f32>>,
    best_report: Option<MetricsReport>,
    log: Vec<LogRecord>,
    run_dir: Option<PathBuf>,
    threads: usize,
}

impl Trainer {
    /// Fresh parameters drawn from `cfg.seed`.
    pub fn new(dataset: &Dataset, model: &DapConfig, loss: &LossConfig, cfg: &TrainConfig) -> Result<Self, TrainError> {
        let params = model.init_params(cfg.seed);
        let optim = OptimState::new(&params, cfg.adamw(cfg.lr_at(0)));
        Self::build(dataset, model, loss, cfg, params, optim, 0, None)
    }

    /// Continues from a checkpoint; the data order of later epochs is the
    /// one an uninterrupted run would use.
    pub fn resume(dataset: &Dataset, ckpt: Checkpoint, loss: &LossConfig, cfg: &TrainConfig) -> Result<Self, TrainError> {
        let model = ckpt.model.clone();
        let diffs = shape_diff(&model, &ckpt.params);
        if !diffs.is_empty() {
            return Err(TrainError::Mismatch(diffs));
        }
        Self::build(dataset, &model, loss, cfg, ckpt.params, ckpt.optim, ckpt.epoch, ckpt.best)
    }

    #[allow(clippy::too_many_arguments)]
    fn build(
        dataset: &Dataset,
        model: &DapConfig,
        loss: &LossConfig,
        cfg: &TrainConfig,
        params: ParamSet<f32>,
        optim: OptimState<f32>,
        epoch: usize,
        best: Option<BestRecord>,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        model.validate()?;
        loss.validate()?;
        let grid = dataset.config.grid;
        if (grid.height_cells, grid.width_cells) != (model.height_cells, model.width_cells) {
            return Err(TrainError::Config(format!(
                "model grid {}x{} does not match dataset grid {}x{}",
                model.height_cells, model.width_cells, grid.height_cells, grid.width_cells
            )));
        }
        if dataset.config.channels != model.in_channels {
            return Err(TrainError::Config(format!(
                "model expects {} input channels, dataset has {}",
                model.in_channels, dataset.config.channels
            )));
        }
        let train = prepare(dataset, Split::Train, model, loss)?;
        if train.is_empty() {
            return Err(TrainError::Config("training split is empty".into()));
        }
        Ok(Trainer {
            model: model.clone(),
            loss: loss.clone(),
            cfg: cfg.clone(),
            grid,
            train,
            val: prepare(dataset, Split::Val, model, loss)?,
            best_params: best.map(|_| params.clone()),
            params,
            optim,
            epoch,
            best,
            best_report: None,
            log: Vec::new(),
            run_dir: None,
            threads: 1,
        })
    }

    /// Writes the log, `last/` and `best/` checkpoints under `dir`.
    pub fn with_run_dir(mut self, dir: &Path) -> Self {
        self.run_dir = Some(dir.to_path_buf());
        self
    }

    /// Worker threads for per-sample gradients; results do not depend on it.
    pub fn with_threads(mut self, threads: usize) -> Self {
        self.threads = threads.max(1);
        self
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            params: self.params.clone(),
            optim: self.optim.clone(),
            epoch: self.epoch,
            best: self.best,
        }
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.cfg.total_epochs()
    }

    fn order(&self, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(self.cfg.seed, epoch as u64));
        idx.shuffle(&mut rng);
        idx
    }

    fn batch_grads(&self, batch: &[usize]) -> Result<Vec<(LossBreakdown, ParamSet<f32>)>, TrainError> {
        let run = |i: &usize| sample_grads(&self.model, &self.loss, &self.params, &self.train[*i]);
        if self.threads == 1 || batch.len() == 1 {
            return batch.iter().map(run).collect();
        }
        let per = batch.len().div_ceil(self.threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = batch
                .chunks(per)
                .map(|chunk| scope.spawn(move || chunk.iter().map(run).collect::<Result<Vec<_>, _>>()))
                .collect();
            let mut out = Vec::with_capacity(batch.len());
            for h in handles {
                out.extend(h.join().expect("gradient worker panicked")?);
            }
            Ok(out)
        })
    }

    fn append_log(&mut self, rec: LogRecord) -> Result<(), TrainError> {
        if let Some(dir) = &self.run_dir {
            let path = dir.join(TRAIN_LOG);
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|source| TrainError::Io {
                    path: path.clone(),
                    source,
                })?;
            let mut line = serde_json::to_vec(&rec)?;
            line.push(b'\n');
            f.write_all(&line).map_err(|source| TrainError::Io { path, source })?;
        }
        self.log.push(rec);
        Ok(())
    }

    fn dump_nonfinite(&self, epoch: usize, batch: usize, ids: &[String], parts: &[LossBreakdown]) {
        let Some(dir) = &self.run_dir else { return };
        let dump = serde_json::json!({
            "epoch": epoch,
            "batch": batch,
            "samples": ids,
            "losses": parts,
        });
        if let Ok(mut f) = File::create(dir.join("nonfinite_batch.json")) {
            let _ = f.write_all(dump.to_string().as_bytes());
        }
    }

    /// Validation metrics of the current parameters.
    pub fn validate(&self) -> Result<Option<MetricsReport>, TrainError> {
        if self.val.is_empty() {
            return Ok(None);
        }
        let preds = predict_all(&self.model, &self.params, &self.val, &self.grid, &self.cfg)?;
        Ok(Some(evaluate(&preds)))
    }

    /// One epoch of updates followed by validation when due.
    pub fn run_epoch(&mut self) -> Result<LogRecord, TrainError> {
        let epoch = self.epoch;
        let lr = self.cfg.lr_at(epoch);
        self.optim.hyper = self.cfg.adamw(lr);
        let order = self.order(epoch);
        let mut epoch_loss = 0.0;
        let batches: Vec<Vec<usize>> = order.chunks(self.cfg.batch_size).map(<[usize]>::to_vec).collect();
        for (b, batch) in batches.iter().enumerate() {
            let results = self.batch_grads(batch)?;
            let parts: Vec<LossBreakdown> = results.iter().map(|r| r.0).collect();
            let mean = mean_breakdown(&parts);
            let grads_finite = results.iter().all(|(_, g)| !g.is_empty() && g.iter().all(|(_, t)| t.is_finite()));
            if !mean.total.is_finite() || !grads_finite {
                let ids: Vec<String> = batch.iter().map(|&i| self.train[i].id.clone()).collect();
                self.dump_nonfinite(epoch, b, &ids, &parts);
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: b,
                    samples: ids,
                    loss: mean.total,
                });
            }
            let mut iter = results.into_iter();
            let mut grads = iter.next().expect("non-empty batch").1;
            for (_, g) in iter {
                for (name, acc) in grads.iter_mut() {
                    let src = g.get(name).expect("same parameter set");
                    acc.data_mut().iter_mut().zip(src.data()).for_each(|(a, s)| *a += *s);
                }
            }
            let inv = 1.0 / batch.len() as f32;
            for (_, t) in grads.iter_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            let grad_norm = clip_grad_norm(&mut grads, self.cfg.grad_clip);
            adamw_step(&mut self.params, &grads, &mut self.optim)?;
            epoch_loss += mean.total;
            log::debug!("epoch {epoch} batch {b} loss {:.5} |g| {grad_norm:.3}", mean.total);
            self.append_log(LogRecord::Step {
                epoch,
                step: self.optim.step,
                batch: b,
                lr,
                grad_norm,
                loss: mean,
            })?;
        }
        self.epoch += 1;
        let last = self.is_done();
        let report = if last || self.epoch % self.cfg.eval_every == 0 {
            self.validate()?
        } else {
            None
        };
        if let Some(r) = &report {
            let better = self.best.map_or(true, |b| r.nds > b.nds);
            if better {
                self.best = Some(BestRecord { epoch, nds: r.nds });
                self.best_params = Some(self.params.clone());
                self.best_report = Some(r.clone());
            }
        }
        let phase = if epoch < self.cfg.epochs_main { "main" } else { "finetune" };
        let rec = LogRecord::Epoch {
            epoch,
            phase: phase.to_string(),
            lr,
            train_loss: epoch_loss / batches.len() as f64,
            val: report.as_ref().map(ValSummary::from),
        };
        log::info!(
            "epoch {epoch} ({phase}) loss {:.4}{}",
            epoch_loss / batches.len() as f64,
            report.as_ref().map_or(String::new(), |r| format!(" val NDS {:.4} mAP {:.4}", r.nds, r.map))
        );
        self.append_log(rec.clone())?;
        if let Some(dir) = self.run_dir.clone() {
            save_checkpoint(&self.checkpoint(), &dir.join("last"))?;
            if self.best.map(|b| b.epoch) == Some(epoch) {
                save_checkpoint(&self.checkpoint(), &dir.join("best"))?;
            }
        }
        Ok(rec)
    }

    /// Runs the remaining epochs.
    pub fn run(mut self) -> Result<TrainOutcome, TrainError> {
        if let Some(dir) = &self.run_dir {
            fs::create_dir_all(dir).map_err(|source| TrainError::Io {
                path: dir.clone(),
                source,
            })?;
        }
        while !self.is_done() {
            self.run_epoch()?;
        }
        let last = self.checkpoint();
        Ok(TrainOutcome {
            best_params: self.best_params.unwrap_or_else(|| self.params.clone()),
            best: self.best,
            best_report: self.best_report,
            last,
            log: self.log,
        })
    }
}

/// Trains from scratch; see [`Trainer`] for finer control.
pub fn train(
    dataset: &Dataset,
    model: &DapConfig,
    loss: &LossConfig,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    let mut t = Trainer::new(dataset, model, loss, cfg)?;
    if let Some(d) = run_dir {
        t = t.with_run_dir(d);
    }
    t.run()
}
