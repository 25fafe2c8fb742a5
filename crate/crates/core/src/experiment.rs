//! Experiment configuration files and the ablation grids.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::loss::LossConfig;
use crate::metrics::MetricsReport;
use crate::net::{DapConfig, FusionKind};
use crate::sim::{Dataset, DatasetError, SimConfig};
use crate::train::{TrainConfig, TrainError, Trainer};

/// File name of the resolved configuration echoed into every run directory.
pub const CONFIG_ECHO: &str = "config.toml";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("cannot serialize config: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("inconsistent config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data: PathBuf,
    pub runs: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data: PathBuf::from("data"),
            runs: PathBuf::from("runs"),
        }
    }
}

/// Everything a run depends on. Missing sections and keys take their
/// defaults; unknown keys are errors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub sim: SimConfig,
    pub model: DapConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub paths: PathsConfig,
}

impl ExperimentConfig {
    /// Shortened schedule used for the ablation grids: 5 + 1 epochs at a
    /// ten times larger learning rate.
    pub fn ablation_reference() -> Self {
        ExperimentConfig {
            train: TrainConfig {
                epochs_main: 5,
                epochs_finetune: 1,
                lr_main: 2e-3,
                lr_finetune: 2e-4,
                ..TrainConfig::default()
            },
            ..ExperimentConfig::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String, ExperimentError> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(|source| ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// Writes [`CONFIG_ECHO`] into `dir`, creating it if needed.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf, ExperimentError> {
        let io = |source| ExperimentError::Io {
            path: dir.to_path_buf(),
            source,
        };
        fs::create_dir_all(dir).map_err(io)?;
        let path = dir.join(CONFIG_ECHO);
        fs::write(&path, self.to_toml()?).map_err(io)?;
        Ok(path)
    }

    /// Copies grid size, frame count and channel count from the simulator
    /// section into the model section.
    pub fn fit_model_to_sim(&mut self) {
        self.model.height_cells = self.sim.grid.height_cells;
        self.model.width_cells = self.sim.grid.width_cells;
        self.model.past_frames = self.sim.past_frames;
        self.model.in_channels = self.sim.channels;
    }

    /// Section-level checks plus agreement between the model and the
    /// simulator.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let cfg = |e: &dyn std::fmt::Display| ExperimentError::Config(e.to_string());
        self.sim.validate().map_err(|e| cfg(&e))?;
        self.model.validate().map_err(|e| cfg(&e))?;
        self.loss.validate().map_err(|e| cfg(&e))?;
        self.train.validate().map_err(|e| cfg(&e))?;
        check_model_fits(&self.model, &self.sim)
    }
}

pub fn check_model_fits(model: &DapConfig, sim: &SimConfig) -> Result<(), ExperimentError> {
    let g = &sim.grid;
    let mut problems = Vec::new();
    if (model.height_cells, model.width_cells) != (g.height_cells, g.width_cells) {
        problems.push(format!(
            "model grid {}x{} vs simulator grid {}x{}",
            model.height_cells, model.width_cells, g.height_cells, g.width_cells
        ));
    }
    if model.past_frames != sim.past_frames {
        problems.push(format!("model past_frames {} vs simulator {}", model.past_frames, sim.past_frames));
    }
    if model.in_channels != sim.channels {
        problems.push(format!("model in_channels {} vs simulator channels {}", model.in_channels, sim.channels));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(ExperimentError::Config(problems.join("; ")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Components,
    Fusion,
}

impl FromStr for AblationAxis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "components" => Ok(AblationAxis::Components),
            "fusion" => Ok(AblationAxis::Fusion),
            other => Err(format!("unknown ablation axis `{other}` (expected components or fusion)")),
        }
    }
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Components => "components",
            AblationAxis::Fusion => "fusion",
        }
    }
}

/// Rows of the components grid with flags `C, F, S, M`.
pub const COMPONENT_ROWS: [(&str, [bool; 4]); 6] = [
    ("A", [true, false, false, false]),
    ("B", [false, true, true, true]),
    ("C", [true, true, false, false]),
    ("D", [true, true, true, false]),
    ("E", [true, true, false, true]),
    ("F", [true, true, true, true]),
];

pub const FUSION_ROWS: [(&str, FusionKind); 4] = [
    ("A", FusionKind::ChannelAttention),
    ("B", FusionKind::ConcatConv1d),
    ("C", FusionKind::ConcatConv2d),
    ("D", FusionKind::Fdfa),
];

/// Model of each row on `axis`, derived from `base`.
pub fn ablation_models(base: &DapConfig, axis: AblationAxis) -> Vec<(String, DapConfig)> {
    match axis {
        AblationAxis::Components => COMPONENT_ROWS
            .iter()
            .map(|(tag, [c, f, s, m])| (tag.to_string(), base.with_flags(*c, *f, *s, *m)))
            .collect(),
        AblationAxis::Fusion => FUSION_ROWS
            .iter()
            .map(|(tag, kind)| {
                let mut m = base.with_flags(true, true, true, true);
                m.fusion = *kind;
                (tag.to_string(), m)
            })
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub best_epoch: usize,
    /// Validation report of the best-NDS epoch.
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub tag: String,
    pub model: DapConfig,
    pub param_count: usize,
    pub runs: Vec<RunSummary>,
}

impl AblationRow {
    /// Mean of `f` over seeds.
    pub fn mean(&self, f: impl Fn(&MetricsReport) -> f64) -> f64 {
        self.runs.iter().map(|r| f(&r.report)).sum::<f64>() / self.runs.len() as f64
    }

    pub fn mean_nds(&self) -> f64 {
        self.mean(|r| r.nds)
    }

    fn flags(&self) -> [bool; 4] {
        let m = &self.model;
        [m.concat_frames, m.fusion_module, m.spatiotemporal_3d, m.multi_resolution]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, tag: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.tag == tag)
    }

    /// Plain-text table: one row per model with its flags or fusion
    /// variant, seed-mean metrics and the NDS of every seed.
    pub fn render(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let mut s = format!("{} ablation, mean over seeds {}\n", self.axis.name(), seeds.join(", "));
        let metric_cols = ["NDS", "mAP", "mATE", "mASE", "mAOE", "mAVE", "mAAE"];
        let _ = write!(s, "{:<6}", "Model");
        match self.axis {
            AblationAxis::Components => {
                for c in ["C", "F", "S", "M"] {
                    let _ = write!(s, "{c:^3}");
                }
            }
            AblationAxis::Fusion => {
                let _ = write!(s, "{:<38}", "Fusion");
            }
        }
        for c in metric_cols {
            let _ = write!(s, "{c:>8}");
        }
        let _ = writeln!(s, "{:>10}  NDS per seed", "params");
        for row in &self.rows {
            let _ = write!(s, "{:<6}", row.tag);
            match self.axis {
                AblationAxis::Components => {
                    for on in row.flags() {
                        let _ = write!(s, "{:^3}", if on { "✓" } else { "" });
                    }
                }
                AblationAxis::Fusion => {
                    let _ = write!(s, "{:<38}", row.model.fusion.label());
                }
            }
            let means = [
                row.mean(|r| r.nds),
                row.mean(|r| r.map),
                row.mean(|r| r.mate),
                row.mean(|r| r.mase),
                row.mean(|r| r.maoe),
                row.mean(|r| r.mave),
                row.mean(|r| r.maae),
            ];
            for v in means {
                let _ = write!(s, "{v:>8.4}");
            }
            let _ = write!(s, "{:>10} ", row.param_count);
            for r in &row.runs {
                let _ = write!(s, " {:.4}", r.report.nds);
            }
            s.push('\n');
        }
        s
    }
}

/// Trains every requested row for every seed. Runs whose model and seed
/// were already trained by this runner are reused.
pub struct AblationRunner<'a> {
    dataset: &'a Dataset,
    exp: ExperimentConfig,
    out_dir: Option<PathBuf>,
    parallel: usize,
    threads: usize,
    done: HashMap<String, RunSummary>,
}

impl<'a> AblationRunner<'a> {
    pub fn new(dataset: &'a Dataset, exp: &ExperimentConfig) -> Self {
        AblationRunner {
            dataset,
            exp: exp.clone(),
            out_dir: None,
            parallel: 1,
            threads: 1,
            done: HashMap::new(),
        }
    }

    /// Each run writes its log and checkpoints to `dir/<axis>/<tag>-seed<k>`.
    pub fn with_out_dir(mut self, dir: &Path) -> Self {
        self.out_dir = Some(dir.to_path_buf());
        self
    }

    /// Number of trainings running at once.
    pub fn with_parallel(mut self, jobs: usize) -> Self {
        self.parallel = jobs.max(1);
        self
    }

    /// Gradient threads inside each training.
    pub fn with_threads(mut self, threads: usize) -> Self {
        self.threads = threads.max(1);
        self
    }

    /// Runs `axis` over `seeds`, restricted to `tags` when given.
    pub fn run(&mut self, axis: AblationAxis, seeds: &[u64], tags: Option<&[String]>) -> Result<AblationTable, ExperimentError> {
        if seeds.is_empty() {
            return Err(ExperimentError::Config("no seeds given".into()));
        }
        check_model_fits(&self.exp.model, &self.dataset.config)?;
        let mut rows = ablation_models(&self.exp.model, axis);
        if let Some(tags) = tags {
            if let Some(t) = tags.iter().find(|t| !rows.iter().any(|(r, _)| r == *t)) {
                return Err(ExperimentError::Config(format!("no row `{t}` on the {} axis", axis.name())));
            }
            rows.retain(|(tag, _)| tags.contains(tag));
        }
        let mut jobs = Vec::new();
        for (tag, model) in &rows {
            for &seed in seeds {
                let key = run_key(model, seed);
                if self.done.contains_key(&key) {
                    log::info!("{} {tag} seed {seed}: reusing an identical run", axis.name());
                } else if !jobs.iter().any(|(_, _, _, k)| *k == key) {
                    jobs.push((tag.clone(), model.clone(), seed, key));
                }
            }
        }
        let results: Vec<Mutex<Option<Result<RunSummary, ExperimentError>>>> =
            jobs.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let worker = || loop {
            let i = next.fetch_add(1, Ordering::SeqCst);
            let Some((tag, model, seed, _)) = jobs.get(i) else { break };
            let dir = self
                .out_dir
                .as_ref()
                .map(|d| d.join(axis.name()).join(format!("{tag}-seed{seed}")));
            log::info!("{} {tag} seed {seed}: training", axis.name());
            let r = self.train_one(model, *seed, dir.as_deref());
            *results[i].lock().expect("result slot") = Some(r);
        };
        std::thread::scope(|scope| {
            for _ in 1..self.parallel.min(jobs.len().max(1)) {
                scope.spawn(worker);
            }
            worker();
        });
        for ((_, _, _, key), slot) in jobs.iter().zip(results) {
            let summary = slot.into_inner().expect("result slot").expect("every job ran")?;
            self.done.insert(key.clone(), summary);
        }
        let rows = rows
            .into_iter()
            .map(|(tag, model)| AblationRow {
                runs: seeds.iter().map(|&s| self.done[&run_key(&model, s)].clone()).collect(),
                param_count: model.param_count(),
                tag,
                model,
            })
            .collect();
        Ok(AblationTable {
            axis,
            seeds: seeds.to_vec(),
            rows,
        })
    }

    fn train_one(&self, model: &DapConfig, seed: u64, dir: Option<&Path>) -> Result<RunSummary, ExperimentError> {
        let exp = ExperimentConfig {
            model: model.clone(),
            train: TrainConfig {
                seed,
                ..self.exp.train.clone()
            },
            ..self.exp.clone()
        };
        let mut trainer = Trainer::new(self.dataset, &exp.model, &exp.loss, &exp.train)?.with_threads(self.threads);
        if let Some(d) = dir {
            if d.exists() {
                fs::remove_dir_all(d).map_err(|source| ExperimentError::Io {
                    path: d.to_path_buf(),
                    source,
                })?;
            }
            exp.echo(d)?;
            trainer = trainer.with_run_dir(d);
        }
        let out = trainer.run()?;
        match (out.best, out.best_report) {
            (Some(best), Some(report)) => Ok(RunSummary {
                seed,
                best_epoch: best.epoch,
                report,
            }),
            _ => Err(ExperimentError::Config("ablation runs need a validation split".into())),
        }
    }
}

fn run_key(model: &DapConfig, seed: u64) -> String {
    format!("{}#{seed}", serde_json::to_string(model).expect("config serializes"))
}
