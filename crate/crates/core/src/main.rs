use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dap::experiment::{AblationAxis, AblationRunner, ExperimentConfig};
use dap::metrics::{evaluate, SampleBoxes};
use dap::sim::{generate_dataset, load_dataset, write_dataset, Dataset, ObjectBox, Split, MANIFEST};
use dap::train::{load_checkpoint, load_checkpoint_for, predict_all, prepare, Trainer};
use dap::viz::{render_svg, BoxLayer, BASELINE_COLOR, GT_COLOR, OURS_COLOR};

type Result<T> = std::result::Result<T, Box<dyn std::error::Error>>;

/// Bad input from the command line or a config file; exits with 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(e: impl std::fmt::Display) -> Box<dyn std::error::Error> {
    Box::new(Usage(e.to_string()))
}

/// Multi-frame BEV detection experiments on simulated scenes.
///
/// Values are resolved as command-line flag, then config file, then built-in
/// default. Every command writes the resolved config as `config.toml` into
/// its output directory before starting.
#[derive(Parser)]
#[command(name = "dap", version)]
struct Cli {
    /// Overrides the simulator seed (gen-data), the training seed (train) or
    /// the seed list (ablate).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-sample gradients.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// More log output; repeat for more.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset and write it to a directory.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to `paths.data`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace an existing dataset in `out`.
        #[arg(long)]
        force: bool,
    },
    /// Train a model; writes the log plus `last/` and `best/` checkpoints.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Defaults to `paths.runs/train`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from this checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint, or the ground-truth / empty reference modes.
    Eval {
        #[arg(long, required_unless_present_any = ["oracle", "empty"])]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to `<checkpoint>/eval-<split>` or `paths.runs/eval`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replay the ground truth as predictions.
        #[arg(long, conflicts_with_all = ["empty", "checkpoint"])]
        oracle: bool,
        /// Evaluate an empty prediction set.
        #[arg(long, conflicts_with = "checkpoint")]
        empty: bool,
    },
    /// Train and evaluate the ablation grids.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Defaults to `paths.runs/ablate`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "components")]
        axes: Vec<AxisArg>,
        /// Training seeds; defaults to `--seed` or 0,1,2.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Only these row tags.
        #[arg(long, value_delimiter = ',')]
        rows: Vec<String>,
        /// Trainings to run at once.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Draw one sample with ground truth and predictions as SVG.
    Render {
        #[arg(long)]
        data: PathBuf,
        /// Sample id or index.
        #[arg(long)]
        sample: String,
        /// Predictions of the full model, drawn in purple.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Predictions of a baseline, drawn in green.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Pixels per grid cell.
        #[arg(long, default_value_t = 8.0)]
        scale: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

impl SplitArg {
    fn split(self) -> Split {
        match self {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
        }
    }

    fn name(self) -> &'static str {
        match self {
            SplitArg::Train => "train",
            SplitArg::Val => "val",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Components,
    Fusion,
}

impl From<AxisArg> for AblationAxis {
    fn from(a: AxisArg) -> Self {
        match a {
            AxisArg::Components => AblationAxis::Components,
            AxisArg::Fusion => AblationAxis::Fusion,
        }
    }
}

/// Sample id to predicted boxes.
type PredictionFile = BTreeMap<String, Vec<ObjectBox>>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is::<Usage>() { 2 } else { 1 })
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    Ok(match path {
        Some(p) => ExperimentConfig::load(p).map_err(|e| match e {
            dap::experiment::ExperimentError::Io { .. } => Box::new(e) as Box<dyn std::error::Error>,
            other => usage(other),
        })?,
        None => ExperimentConfig::default(),
    })
}

/// Uses the dataset's simulator settings, which are the ones the data was
/// generated with.
fn adopt_dataset(cfg: &mut ExperimentConfig, data: &Dataset) {
    if cfg.sim != data.config {
        log::debug!("using the simulator settings stored with the dataset");
        cfg.sim = data.config.clone();
    }
}

fn run(cli: Cli) -> Result<()> {
    let threads = cli.threads.max(1);
    match cli.command {
        Command::GenData { config, out, force } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = cli.seed {
                cfg.sim.seed = s;
            }
            cfg.sim.validate().map_err(usage)?;
            let out = out.unwrap_or_else(|| cfg.paths.data.clone());
            gen_data(&cfg, &out, force)
        }
        Command::Train {
            config,
            data,
            out,
            resume,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = cli.seed {
                cfg.train.seed = s;
            }
            let data_dir = data.unwrap_or_else(|| cfg.paths.data.clone());
            let out = out.unwrap_or_else(|| cfg.paths.runs.join("train"));
            let dataset = load_dataset(&data_dir)?;
            adopt_dataset(&mut cfg, &dataset);
            let mut trainer = match &resume {
                Some(dir) => {
                    let ckpt = load_checkpoint_for(dir, &cfg.model)?;
                    Trainer::resume(&dataset, ckpt, &cfg.loss, &cfg.train)?
                }
                None => {
                    cfg.validate().map_err(usage)?;
                    Trainer::new(&dataset, &cfg.model, &cfg.loss, &cfg.train)?
                }
            };
            cfg.validate().map_err(usage)?;
            cfg.echo(&out)?;
            trainer = trainer.with_run_dir(&out).with_threads(threads);
            let outcome = trainer.run()?;
            match (outcome.best, outcome.best_report) {
                (Some(best), Some(report)) => {
                    println!("best epoch {} (val NDS {:.4})", best.epoch, best.nds);
                    print!("{}", report.summary_table());
                }
                _ => println!("trained {} epochs (no validation split)", outcome.last.epoch),
            }
            println!("checkpoints in {}", out.display());
            Ok(())
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            config,
            out,
            oracle,
            empty,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            let data_dir = data.unwrap_or_else(|| cfg.paths.data.clone());
            let dataset = load_dataset(&data_dir)?;
            adopt_dataset(&mut cfg, &dataset);
            let ckpt = match &checkpoint {
                Some(dir) => {
                    let c = load_checkpoint(dir)?;
                    cfg.model = c.model.clone();
                    Some(c)
                }
                None => {
                    cfg.fit_model_to_sim();
                    None
                }
            };
            let out = out.unwrap_or_else(|| match &checkpoint {
                Some(dir) => dir.join(format!("eval-{}", split.name())),
                None => cfg.paths.runs.join("eval"),
            });
            cfg.validate().map_err(usage)?;
            cfg.echo(&out)?;
            let samples: Vec<SampleBoxes> = match ckpt {
                Some(c) => {
                    let prepared = prepare(&dataset, split.split(), &c.model, &cfg.loss)?;
                    predict_all(&c.model, &c.params, &prepared, &dataset.config.grid, &cfg.train)?
                }
                None => dataset
                    .split(split.split())
                    .map(|s| SampleBoxes {
                        id: s.id.clone(),
                        preds: if oracle {
                            s.gt_boxes.iter().cloned().map(|b| ObjectBox { score: Some(1.0), ..b }).collect()
                        } else {
                            debug_assert!(empty);
                            Vec::new()
                        },
                        gts: s.gt_boxes.clone(),
                    })
                    .collect(),
            };
            if samples.is_empty() {
                return Err(format!("the {} split is empty", split.name()).into());
            }
            let report = evaluate(&samples);
            let preds: PredictionFile = samples.iter().map(|s| (s.id.clone(), s.preds.clone())).collect();
            fs::write(out.join("predictions.json"), serde_json::to_vec_pretty(&preds)?)?;
            fs::write(out.join("metrics.json"), serde_json::to_vec_pretty(&report)?)?;
            let text = format!("{}\n{}", report.summary_table(), report.class_table());
            fs::write(out.join("metrics.txt"), &text)?;
            print!("{text}");
            Ok(())
        }
        Command::Ablate {
            config,
            data,
            out,
            axes,
            seeds,
            rows,
            parallel,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            let seeds = match (seeds.is_empty(), cli.seed) {
                (false, _) => seeds,
                (true, Some(s)) => vec![s],
                (true, None) => vec![0, 1, 2],
            };
            let data_dir = data.unwrap_or_else(|| cfg.paths.data.clone());
            let out = out.unwrap_or_else(|| cfg.paths.runs.join("ablate"));
            let dataset = load_dataset(&data_dir)?;
            adopt_dataset(&mut cfg, &dataset);
            cfg.validate().map_err(usage)?;
            cfg.echo(&out)?;
            let mut runner = AblationRunner::new(&dataset, &cfg)
                .with_out_dir(&out)
                .with_parallel(parallel)
                .with_threads(threads);
            let tags = (!rows.is_empty()).then_some(rows.as_slice());
            for axis in axes {
                let axis = AblationAxis::from(axis);
                let table = runner.run(axis, &seeds, tags)?;
                let text = table.render();
                fs::write(out.join(format!("{}.txt", axis.name())), &text)?;
                fs::write(out.join(format!("{}.json", axis.name())), serde_json::to_vec_pretty(&table)?)?;
                println!("{text}");
            }
            Ok(())
        }
        Command::Render {
            data,
            sample,
            predictions,
            baseline,
            out,
            scale,
        } => {
            if !(scale > 0.0) {
                return Err(usage("--scale must be positive"));
            }
            let dataset = load_dataset(&data)?;
            let s = dataset
                .samples
                .iter()
                .find(|s| s.id == sample)
                .or_else(|| sample.parse::<usize>().ok().and_then(|i| dataset.samples.get(i)))
                .ok_or_else(|| format!("no sample `{sample}` ({} samples in the dataset)", dataset.samples.len()))?;
            let read = |p: &Path| -> Result<Vec<ObjectBox>> {
                let file: PredictionFile = serde_json::from_slice(&fs::read(p)?)?;
                Ok(file.get(&s.id).cloned().unwrap_or_else(|| {
                    log::warn!("{} has no entry for {}", p.display(), s.id);
                    Vec::new()
                }))
            };
            let base = baseline.as_deref().map(read).transpose()?;
            let ours = predictions.as_deref().map(read).transpose()?;
            let mut layers = vec![BoxLayer {
                name: "ground truth",
                color: GT_COLOR,
                boxes: &s.gt_boxes,
            }];
            if let Some(b) = &base {
                layers.push(BoxLayer {
                    name: "baseline",
                    color: BASELINE_COLOR,
                    boxes: b,
                });
            }
            if let Some(b) = &ours {
                layers.push(BoxLayer {
                    name: "ours",
                    color: OURS_COLOR,
                    boxes: b,
                });
            }
            let svg = render_svg(&dataset.config.grid, s.observations.last(), &layers, scale);
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(&out, svg)?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

fn gen_data(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<()> {
    let occupied = fs::read_dir(out).map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied {
        if !force {
            return Err(format!("{} is not empty (pass --force to replace the dataset)", out.display()).into());
        }
        for entry in fs::read_dir(out)? {
            let path = entry?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if name.ends_with(".dapt") || name == MANIFEST {
                fs::remove_file(&path)?;
            }
        }
    }
    cfg.echo(out)?;
    let dataset = generate_dataset(&cfg.sim)?;
    write_dataset(&dataset, out)?;
    println!(
        "wrote {} samples ({} train, {} val) to {}",
        dataset.samples.len(),
        cfg.sim.train_scenes,
        cfg.sim.val_scenes,
        out.display()
    );
    Ok(())
}
