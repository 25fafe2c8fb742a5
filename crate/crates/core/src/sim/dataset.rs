use std::collections::BTreeSet;
use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{generate_scene, render_observation, scene_seed, ObjectBox, SimConfig, SimConfigError};
use crate::geometry::{AlignedBevSequence, EgoPose, GeometryError};
use crate::tensor::blob::{self, BlobError};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

/// One sample: `N + 1` raw observations (oldest first) with their ego poses
/// and the boxes at the current time in the current ego frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub id: String,
    pub split: Split,
    pub poses: Vec<EgoPose>,
    pub observations: Vec<Tensor<f32>>,
    pub gt_boxes: Vec<ObjectBox>,
}

impl SceneSample {
    /// Targets for the predictive branch; the same boxes as `gt_boxes`.
    pub fn prediction_targets(&self) -> &[ObjectBox] {
        &self.gt_boxes
    }

    pub fn aligned(&self, config: &SimConfig) -> Result<AlignedBevSequence<f32>, GeometryError> {
        AlignedBevSequence::from_chronological(&self.observations, &self.poses, &config.grid)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SimConfig,
    pub samples: Vec<SceneSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SceneSample> {
        self.samples.iter().filter(move |s| s.split == split)
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Config(#[from] SimConfigError),
    #[error("dataset version {found} is not supported (expected {DATASET_VERSION})")]
    Version { found: u32 },
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("corrupt blob {path}: {source}")]
    CorruptBlob {
        path: PathBuf,
        #[source]
        source: BlobError,
    },
    #[error("integrity check failed: {0}")]
    Integrity(String),
    #[error("malformed manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    config: SimConfig,
    sample_count: usize,
    samples: Vec<ManifestSample>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestSample {
    id: String,
    split: Split,
    poses: Vec<EgoPose>,
    observations: Vec<String>,
    gt_boxes: Vec<ObjectBox>,
}

/// Generates `train_scenes + val_scenes` samples; the first `train_scenes`
/// belong to the training split.
pub fn generate_dataset(config: &SimConfig) -> Result<Dataset, DatasetError> {
    config.validate()?;
    let total = config.train_scenes + config.val_scenes;
    let samples = (0..total)
        .map(|i| {
            let scene = generate_scene(config, scene_seed(config.seed, i as u64));
            SceneSample {
                id: format!("scene-{i:05}"),
                split: if i < config.train_scenes { Split::Train } else { Split::Val },
                poses: scene.ego.clone(),
                observations: (0..scene.ego.len()).map(|t| render_observation(&scene, t, config)).collect(),
                gt_boxes: scene.ground_truth(&config.grid),
            }
        })
        .collect();
    Ok(Dataset {
        config: config.clone(),
        samples,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<(), DatasetError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut samples = Vec::with_capacity(dataset.samples.len());
    for s in &dataset.samples {
        let mut names = Vec::with_capacity(s.observations.len());
        for (t, obs) in s.observations.iter().enumerate() {
            let name = format!("{}_t{t}.dapt", s.id);
            let path = dir.join(&name);
            blob::write(&path, obs).map_err(|source| DatasetError::CorruptBlob { path, source })?;
            names.push(name);
        }
        samples.push(ManifestSample {
            id: s.id.clone(),
            split: s.split,
            poses: s.poses.clone(),
            observations: names,
            gt_boxes: s.gt_boxes.clone(),
        });
    }
    let manifest = Manifest {
        version: DATASET_VERSION,
        config: dataset.config.clone(),
        sample_count: samples.len(),
        samples,
    };
    let path = dir.join(MANIFEST);
    let json = serde_json::to_vec_pretty(&manifest)?;
    fs::write(&path, json).map_err(io_err(&path))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, DatasetError> {
    let path = dir.join(MANIFEST);
    let text = match fs::read(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == ErrorKind::NotFound => return Err(DatasetError::MissingFile(path)),
        Err(e) => return Err(io_err(&path)(e)),
    };
    let raw: serde_json::Value = serde_json::from_slice(&text)?;
    let version = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != DATASET_VERSION {
        return Err(DatasetError::Version { found: version });
    }
    let manifest: Manifest = serde_json::from_value(raw)?;
    manifest.config.validate()?;
    if manifest.sample_count != manifest.samples.len() {
        return Err(DatasetError::Integrity(format!(
            "manifest declares {} samples but lists {}",
            manifest.sample_count,
            manifest.samples.len()
        )));
    }
    let listed: BTreeSet<&str> = manifest
        .samples
        .iter()
        .flat_map(|s| s.observations.iter().map(String::as_str))
        .collect();
    let entries = fs::read_dir(dir).map_err(io_err(dir))?;
    let mut on_disk = BTreeSet::new();
    for entry in entries {
        let entry = entry.map_err(io_err(dir))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(".dapt") {
            on_disk.insert(name);
        }
    }
    let unlisted: Vec<&String> = on_disk.iter().filter(|n| !listed.contains(n.as_str())).collect();
    if !unlisted.is_empty() {
        return Err(DatasetError::Integrity(format!(
            "{} blob(s) on disk are not in the manifest, e.g. {}",
            unlisted.len(),
            unlisted[0]
        )));
    }

    let frames = manifest.config.frames();
    let (h, w) = (manifest.config.grid.height_cells, manifest.config.grid.width_cells);
    let expect_shape = [manifest.config.channels, h, w];
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for s in manifest.samples {
        if s.observations.len() != frames || s.poses.len() != frames {
            return Err(DatasetError::Integrity(format!(
                "sample {} has {} observations and {} poses, expected {frames}",
                s.id,
                s.observations.len(),
                s.poses.len()
            )));
        }
        let mut observations = Vec::with_capacity(frames);
        for name in &s.observations {
            let path = dir.join(name);
            let t = match blob::read(&path) {
                Ok(t) => t,
                Err(BlobError::Io { source, .. }) if source.kind() == ErrorKind::NotFound => {
                    return Err(DatasetError::MissingFile(path))
                }
                Err(source) => return Err(DatasetError::CorruptBlob { path, source }),
            };
            if t.shape() != expect_shape {
                return Err(DatasetError::Integrity(format!(
                    "{name} has shape {:?}, expected {expect_shape:?}",
                    t.shape()
                )));
            }
            observations.push(t);
        }
        samples.push(SceneSample {
            id: s.id,
            split: s.split,
            poses: s.poses,
            observations,
            gt_boxes: s.gt_boxes,
        });
    }
    Ok(Dataset {
        config: manifest.config,
        samples,
    })
}
