//! Deterministic synthetic driving scenes: ego trajectory, agent tracks with
//! simple motion models, pseudo-BEV observations and ground-truth boxes.
//!
//! Randomness comes from `ChaCha8Rng`. Each scene draws from its own
//! stream seeded by [`scene_seed`] (global seed, scene index), so scenes can
//! be generated in any order or in parallel with identical results.

mod dataset;
mod render;

pub use dataset::{
    generate_dataset, load_dataset, write_dataset, Dataset, DatasetError, SceneSample, Split, DATASET_VERSION, MANIFEST,
};
pub use render::render_observation;

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{normalize_angle, BevGridSpec, EgoPose};

pub const NUM_CLASSES: usize = 3;
/// Speed above which a ground-truth agent is labelled `moving`.
pub const MOVING_SPEED: f64 = 0.5;
/// Occupancy multiplier applied while an agent is occluded.
pub const OCCLUSION_ATTENUATION: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectClass {
    Vehicle,
    Pedestrian,
    Cyclist,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; NUM_CLASSES] = [ObjectClass::Vehicle, ObjectClass::Pedestrian, ObjectClass::Cyclist];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Vehicle => "vehicle",
            ObjectClass::Pedestrian => "pedestrian",
            ObjectClass::Cyclist => "cyclist",
        }
    }

    /// Nominal `(l, w, h)` in metres.
    pub fn nominal_size(self) -> [f64; 3] {
        match self {
            ObjectClass::Vehicle => [4.5, 1.9, 1.6],
            ObjectClass::Pedestrian => [0.8, 0.7, 1.75],
            ObjectClass::Cyclist => [1.8, 0.7, 1.5],
        }
    }

    /// Height of the box centre above ground for the nominal size.
    pub fn nominal_z(self) -> f64 {
        self.nominal_size()[2] / 2.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Moving,
    Stopped,
}

impl Attribute {
    pub fn from_speed(speed: f64) -> Self {
        if speed > MOVING_SPEED {
            Attribute::Moving
        } else {
            Attribute::Stopped
        }
    }
}

/// A 3D box in some planar frame. `score` is only set on predictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectBox {
    pub class_id: ObjectClass,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 2],
    pub attribute: Attribute,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl ObjectBox {
    pub fn speed(&self) -> f64 {
        self.velocity[0].hypot(self.velocity[1])
    }

    /// Footprint corners `(x, y)` in counter-clockwise order.
    pub fn corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.size[0] / 2.0, self.size[1] / 2.0);
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(u, v)| {
            (self.center[0] + c * u - s * v, self.center[1] + s * u + c * v)
        })
    }

    /// The same box expressed in the local frame of `pose`.
    pub fn to_local(&self, pose: &EgoPose) -> ObjectBox {
        let (x, y) = pose.world_to_local(self.center[0], self.center[1]);
        let (s, c) = (-pose.yaw).sin_cos();
        let v = self.velocity;
        ObjectBox {
            center: [x, y, self.center[2]],
            yaw: normalize_angle(self.yaw - pose.yaw),
            velocity: [c * v[0] - s * v[1], s * v[0] + c * v[1]],
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionModel {
    ConstantVelocity,
    Turning,
    Stopped,
}

/// One agent over the scene horizon, in world coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub class: ObjectClass,
    pub motion: MotionModel,
    /// Turn rate in rad/s (zero unless `Turning`).
    pub turn_rate: f64,
    pub boxes: Vec<ObjectBox>,
    /// Inclusive `[first, last]` timestep ranges during which the agent is occluded.
    pub occlusions: Vec<[usize; 2]>,
}

impl AgentTrack {
    pub fn is_occluded(&self, t: usize) -> bool {
        self.occlusions.iter().any(|&[a, b]| a <= t && t <= b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Range { min, max }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.max > self.min {
            rng.gen_range(self.min..self.max)
        } else {
            self.min
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub grid: BevGridSpec,
    /// Number of past frames `N`; every sample holds `N + 1` observations.
    pub past_frames: usize,
    /// Seconds between frames.
    pub dt: f64,
    pub agents_min: usize,
    pub agents_max: usize,
    /// Relative weights of vehicle, pedestrian, cyclist.
    pub class_mix: [f64; NUM_CLASSES],
    /// Speed range in m/s per class, same order as `class_mix`.
    pub speed: [Range; NUM_CLASSES],
    pub ego_speed: Range,
    pub ego_max_yaw_rate: f64,
    pub turning_prob: f64,
    pub stopped_prob: f64,
    pub occlusion_prob: f64,
    pub noise_sigma: f64,
    /// Observation channels: occupancy, vx, vy, then one per class.
    pub channels: usize,
    pub seed: u64,
    pub train_scenes: usize,
    pub val_scenes: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            grid: BevGridSpec::desk(),
            past_frames: 4,
            dt: 0.5,
            agents_min: 4,
            agents_max: 10,
            class_mix: [0.5, 0.3, 0.2],
            speed: [Range::new(0.0, 10.0), Range::new(0.0, 1.8), Range::new(0.0, 6.0)],
            ego_speed: Range::new(0.0, 8.0),
            ego_max_yaw_rate: 0.15,
            turning_prob: 0.25,
            stopped_prob: 0.2,
            occlusion_prob: 0.3,
            noise_sigma: 0.05,
            channels: 3 + NUM_CLASSES,
            seed: 0,
            train_scenes: 200,
            val_scenes: 50,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimConfigError {
    #[error("invalid simulator config: {0}")]
    Invalid(String),
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimConfigError> {
        let bad = |m: &str| Err(SimConfigError::Invalid(m.to_string()));
        if self.grid.validate().is_err() {
            return bad("grid cells × cell size must equal twice the extent");
        }
        if self.past_frames < 1 {
            return bad("past_frames must be at least 1");
        }
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if self.agents_min > self.agents_max {
            return bad("agent count range is empty");
        }
        if self.class_mix.iter().any(|w| *w < 0.0) || self.class_mix.iter().sum::<f64>() <= 0.0 {
            return bad("class_mix must be non-negative with a positive sum");
        }
        for r in self.speed.iter().chain([&self.ego_speed]) {
            if !(r.min <= r.max) || r.min < 0.0 {
                return bad("speed ranges must satisfy 0 <= min <= max");
            }
        }
        for p in [self.turning_prob, self.stopped_prob, self.occlusion_prob] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities must lie in [0, 1]");
            }
        }
        if self.turning_prob + self.stopped_prob > 1.0 {
            return bad("turning_prob + stopped_prob exceeds 1");
        }
        if !(self.noise_sigma >= 0.0) || self.ego_max_yaw_rate < 0.0 {
            return bad("noise_sigma and ego_max_yaw_rate must be non-negative");
        }
        if self.channels != 3 + NUM_CLASSES {
            return bad("channels must be 3 + number of classes");
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.past_frames + 1
    }
}

/// Seed of scene `index` under `global` (SplitMix64 finaliser on both).
pub fn scene_seed(global: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(global ^ mix(index))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    /// Ego poses, oldest first; the last entry is the current time `t`.
    pub ego: Vec<EgoPose>,
    pub tracks: Vec<AgentTrack>,
}

impl Scene {
    pub fn current(&self) -> usize {
        self.ego.len() - 1
    }

    /// Ground-truth boxes at the current time, in the current ego frame,
    /// restricted to the grid extent.
    pub fn ground_truth(&self, grid: &BevGridSpec) -> Vec<ObjectBox> {
        let t = self.current();
        let pose = &self.ego[t];
        self.tracks
            .iter()
            .map(|tr| tr.boxes[t].to_local(pose))
            .filter(|b| grid.contains(b.center[0], b.center[1]))
            .collect()
    }
}

fn pick_class(rng: &mut impl Rng, mix: &[f64; NUM_CLASSES]) -> ObjectClass {
    let total: f64 = mix.iter().sum();
    let mut u = rng.gen_range(0.0..total);
    for (i, w) in mix.iter().enumerate() {
        if u < *w {
            return ObjectClass::ALL[i];
        }
        u -= w;
    }
    ObjectClass::ALL[mix.iter().rposition(|w| *w > 0.0).unwrap_or(0)]
}

/// Builds one scene. The config must be valid (see [`SimConfig::validate`]).
pub fn generate_scene(config: &SimConfig, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = config.frames();
    let dt = config.dt;

    let yaw0 = rng.gen_range(-PI..PI);
    let ego_speed = config.ego_speed.sample(&mut rng);
    let ego_rate = if rng.gen_bool(0.5) {
        0.0
    } else {
        rng.gen_range(-1.0..=1.0) * config.ego_max_yaw_rate
    };
    let mut ego = Vec::with_capacity(frames);
    let (mut x, mut y, mut yaw) = (0.0f64, 0.0f64, yaw0);
    for _ in 0..frames {
        ego.push(EgoPose::new(x, y, yaw));
        x += ego_speed * yaw.cos() * dt;
        y += ego_speed * yaw.sin() * dt;
        yaw += ego_rate * dt;
    }
    let now = *ego.last().unwrap();

    let count = rng.gen_range(config.agents_min..=config.agents_max);
    let mut placed: Vec<(f64, f64, f64)> = Vec::new();
    let mut tracks = Vec::with_capacity(count);
    let margin = 2.0;
    let reach = config.grid.extent - margin;
    for _ in 0..count {
        let class = pick_class(&mut rng, &config.class_mix);
        let nominal = class.nominal_size();
        let size = [
            nominal[0] * rng.gen_range(0.9..1.1),
            nominal[1] * rng.gen_range(0.9..1.1),
            nominal[2] * rng.gen_range(0.95..1.05),
        ];
        let radius = 0.5 * size[0].hypot(size[1]);
        let u: f64 = rng.gen_range(0.0..1.0);
        let motion = if u < config.stopped_prob {
            MotionModel::Stopped
        } else if u < config.stopped_prob + config.turning_prob {
            MotionModel::Turning
        } else {
            MotionModel::ConstantVelocity
        };
        let speed = match motion {
            MotionModel::Stopped => 0.0,
            _ => config.speed[class.index()].sample(&mut rng),
        };
        let turn_rate = match motion {
            MotionModel::Turning => rng.gen_range(0.2..0.5) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
            _ => 0.0,
        };
        let local_yaw = rng.gen_range(-PI..PI);
        // rejection-sample a position at time t away from other agents
        let mut spot = None;
        for _ in 0..50 {
            let lx = rng.gen_range(-reach..reach);
            let ly = rng.gen_range(-reach..reach);
            if placed
                .iter()
                .all(|&(px, py, pr)| (px - lx).hypot(py - ly) > pr + radius + 2.0)
            {
                spot = Some((lx, ly));
                break;
            }
        }
        let Some((lx, ly)) = spot else { continue };
        placed.push((lx, ly, radius));

        // state at t in world coordinates, rolled back to the first frame
        let (wx, wy) = now.local_to_world(lx, ly);
        let mut heading = local_yaw + now.yaw;
        let (mut px, mut py) = (wx, wy);
        for _ in 1..frames {
            heading -= turn_rate * dt;
            px -= speed * heading.cos() * dt;
            py -= speed * heading.sin() * dt;
        }
        // integrate forward so that c(k+1) = c(k) + v(k)·dt holds by construction
        let z = size[2] / 2.0;
        let mut boxes = Vec::with_capacity(frames);
        for _ in 0..frames {
            let v = [speed * heading.cos(), speed * heading.sin()];
            boxes.push(ObjectBox {
                class_id: class,
                center: [px, py, z],
                size,
                yaw: normalize_angle(heading),
                velocity: v,
                attribute: Attribute::from_speed(speed),
                score: None,
            });
            px += v[0] * dt;
            py += v[1] * dt;
            heading += turn_rate * dt;
        }

        let mut occlusions = Vec::new();
        if rng.gen_bool(config.occlusion_prob) {
            let start = rng.gen_range(0..frames);
            let len = rng.gen_range(1..=2);
            occlusions.push([start, (start + len - 1).min(frames - 1)]);
        }
        tracks.push(AgentTrack {
            class,
            motion,
            turn_rate,
            boxes,
            occlusions,
        });
    }
    Scene { seed, ego, tracks }
}
