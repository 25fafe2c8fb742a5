use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{scene_seed, Scene, SimConfig, OCCLUSION_ATTENUATION};
use crate::tensor::Tensor;

/// Soft edge ramp: 1 well inside, 0 well outside, linear over one cell.
fn ramp(inside: f64, cell: f64) -> f64 {
    (0.5 + inside / cell).clamp(0.0, 1.0)
}

/// Pseudo-BEV observation of `scene` at timestep `t` in the ego frame at `t`.
///
/// Channel 0 is occupancy, 1–2 the velocity field weighted by occupancy,
/// `3..` per-class footprints. Noise is drawn from an independent stream per
/// `(scene seed, t)` and clipped to ±4σ; occupancy never drops below zero.
pub fn render_observation(scene: &Scene, t: usize, config: &SimConfig) -> Tensor<f32> {
    assert!(t < scene.ego.len(), "timestep {t} outside scene horizon");
    let spec = &config.grid;
    let (h, w) = (spec.height_cells, spec.width_cells);
    let plane = h * w;
    let mut data = vec![0.0f64; config.channels * plane];
    let pose = &scene.ego[t];
    let cell = spec.cell_size;

    for track in &scene.tracks {
        let b = track.boxes[t].to_local(pose);
        let atten = if track.is_occluded(t) { OCCLUSION_ATTENUATION } else { 1.0 };
        let (s, c) = b.yaw.sin_cos();
        let (hl, hw) = (b.size[0] / 2.0, b.size[1] / 2.0);
        let reach = hl.hypot(hw) + cell;
        let (r0, c0) = spec.world_to_grid(b.center[0] - reach, b.center[1] - reach);
        let (r1, c1) = spec.world_to_grid(b.center[0] + reach, b.center[1] + reach);
        if r1 < 0.0 || c1 < 0.0 || r0 > (h - 1) as f64 || c0 > (w - 1) as f64 {
            continue;
        }
        let rows = (r0.floor().max(0.0) as usize)..=(r1.ceil().min(h as f64 - 1.0) as usize);
        let cols = (c0.floor().max(0.0) as usize)..=(c1.ceil().min(w as f64 - 1.0) as usize);
        for i in rows {
            for j in cols.clone() {
                let (x, y) = spec.grid_to_world(i as f64, j as f64);
                let (dx, dy) = (x - b.center[0], y - b.center[1]);
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                let occ = ramp(hl - u.abs(), cell) * ramp(hw - v.abs(), cell) * atten;
                if occ <= 0.0 {
                    continue;
                }
                let k = i * w + j;
                if occ > data[k] {
                    data[k] = occ;
                    data[plane + k] = b.velocity[0] * occ;
                    data[2 * plane + k] = b.velocity[1] * occ;
                }
                let ck = (3 + b.class_id.index()) * plane + k;
                data[ck] = data[ck].max(occ);
            }
        }
    }

    let sigma = config.noise_sigma;
    if sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(scene.seed, 1 + t as u64));
        let normal = Normal::new(0.0, sigma).expect("finite sigma");
        for v in data.iter_mut() {
            *v += normal.sample(&mut rng).clamp(-4.0 * sigma, 4.0 * sigma);
        }
        for v in &mut data[..plane] {
            *v = v.max(0.0);
        }
    }
    Tensor::new(vec![config.channels, h, w], data.into_iter().map(|v| v as f32).collect())
        .expect("observation shape")
}
