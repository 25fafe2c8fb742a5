//! Training objectives: Gaussian heatmap targets, penalty-reduced focal
//! loss, masked L1 regression and the weighted two-branch total.

use serde::{Deserialize, Serialize};

use crate::geometry::BevGridSpec;
use crate::net::{HeadOutput, NetError, HEAD_TASKS};
use crate::sim::{Attribute, ObjectBox};
use crate::tensor::{Float, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_pred: f64,
    pub lambda_det: f64,
    pub focal_alpha: f64,
    pub focal_beta: f64,
    /// Gaussian radius is `max(min_sigma, footprint diagonal in cells / sigma_divisor)`.
    pub sigma_divisor: f64,
    pub min_sigma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_pred: 1.0,
            lambda_det: 3.0,
            focal_alpha: 2.0,
            focal_beta: 4.0,
            sigma_divisor: 6.0,
            min_sigma: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if !(self.lambda_pred >= 0.0 && self.lambda_det >= 0.0) {
            return Err(NetError::Config("loss weights must be non-negative".into()));
        }
        if !(self.sigma_divisor > 0.0 && self.min_sigma > 0.0) {
            return Err(NetError::Config("heatmap sigma parameters must be positive".into()));
        }
        Ok(())
    }

    pub fn sigma(&self, b: &ObjectBox, spec: &BevGridSpec) -> f64 {
        let diag = b.size[0].hypot(b.size[1]) / spec.cell_size;
        (diag / self.sigma_divisor).max(self.min_sigma)
    }
}

/// Regression targets at one GT peak cell, in [`HEAD_TASKS`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterTarget {
    /// Flat cell index `row * W + col`.
    pub cell: usize,
    pub class: usize,
    pub values: [Vec<f64>; 5],
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetMaps<T: Float = f32> {
    pub heatmap: Tensor<T>,
    pub centers: Vec<CenterTarget>,
}

/// Unnormalised Gaussian `exp(-d² / 2σ²)`.
pub fn gaussian(d2: f64, sigma: f64) -> f64 {
    (-d2 / (2.0 * sigma * sigma)).exp()
}

/// Heatmap and regression targets for boxes in the current ego frame.
///
/// Each box peaks (value exactly 1) at the cell nearest its centre; the
/// sub-cell remainder becomes the offset target. Overlapping Gaussians of
/// one class combine by maximum. When two boxes share a peak cell the first
/// one keeps the regression targets.
pub fn render_targets<T: Float>(gt: &[ObjectBox], spec: &BevGridSpec, num_classes: usize, cfg: &LossConfig) -> TargetMaps<T> {
    let (h, w) = (spec.height_cells, spec.width_cells);
    let mut heat = vec![0.0f64; num_classes * h * w];
    let mut centers: Vec<CenterTarget> = Vec::new();
    for b in gt {
        let class = b.class_id.index();
        if class >= num_classes {
            continue;
        }
        let (r, c) = spec.world_to_grid(b.center[0], b.center[1]);
        let pr = r.round().clamp(0.0, (h - 1) as f64);
        let pc = c.round().clamp(0.0, (w - 1) as f64);
        let sigma = cfg.sigma(b, spec);
        let reach = (3.0 * sigma).ceil() as i64;
        let plane = &mut heat[class * h * w..(class + 1) * h * w];
        for di in -reach..=reach {
            for dj in -reach..=reach {
                let (i, j) = (pr as i64 + di, pc as i64 + dj);
                if i < 0 || j < 0 || i >= h as i64 || j >= w as i64 {
                    continue;
                }
                let v = gaussian((di * di + dj * dj) as f64, sigma);
                let k = i as usize * w + j as usize;
                plane[k] = plane[k].max(v);
            }
        }
        let cell = pr as usize * w + pc as usize;
        if centers.iter().any(|t| t.cell == cell) {
            continue;
        }
        let moving = if b.attribute == Attribute::Moving { 1.0 } else { 0.0 };
        centers.push(CenterTarget {
            cell,
            class,
            values: [
                vec![r - pr, c - pc],
                b.size.iter().map(|s| s.ln()).collect(),
                vec![b.yaw.sin(), b.yaw.cos()],
                b.velocity.to_vec(),
                vec![moving],
            ],
        });
    }
    TargetMaps {
        heatmap: Tensor::new(vec![num_classes, h, w], heat.into_iter().map(T::from_f64_lossy).collect())
            .expect("heatmap shape"),
        centers,
    }
}

pub fn gaussian_focal_loss<T: Float>(
    g: &mut Graph<T>,
    heatmap: Var,
    target: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<Var, NetError> {
    Ok(g.focal_loss(
        heatmap,
        target,
        T::from_f64_lossy(cfg.focal_alpha),
        T::from_f64_lossy(cfg.focal_beta),
    )?)
}

/// Sum over the five regression tasks of the mean absolute error at the
/// target cells (attribute compared after a sigmoid). Zero without targets.
pub fn regression_l1<T: Float>(g: &mut Graph<T>, out: &HeadOutput, targets: &TargetMaps<T>) -> Result<Var, NetError> {
    if targets.centers.is_empty() {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let cells: Vec<usize> = targets.centers.iter().map(|t| t.cell).collect();
    let n = cells.len();
    let mut terms = Vec::with_capacity(HEAD_TASKS.len());
    for (task, (&map, &(_, channels))) in out.regressions().iter().zip(HEAD_TASKS.iter()).enumerate() {
        let s = g.shape(map).to_vec();
        let flat = g.reshape(map, &[s[0], s[1] * s[2]])?;
        let mut picked = g.gather_columns(flat, &cells)?;
        if task == 4 {
            picked = g.sigmoid(picked)?;
        }
        let tgt = Tensor::from_fn(vec![channels, n], |i| {
            T::from_f64_lossy(targets.centers[i % n].values[task][i / n])
        });
        let tgt = g.constant(tgt);
        let diff = g.sub(picked, tgt)?;
        let abs = g.abs(diff)?;
        let sum = g.sum(abs)?;
        terms.push(g.scale(sum, T::from_f64_lossy(1.0 / (n * channels) as f64))?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(total)
}

/// Graph nodes of the loss terms; the prediction-branch terms are absent
/// when the model has no predictive branch.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub det_focal: Var,
    pub det_reg: Var,
    pub pred_focal: Option<Var>,
    pub pred_reg: Option<Var>,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_pred_focal: f64,
    pub l_pred_reg: f64,
    pub l_det_focal: f64,
    pub l_det_reg: f64,
    pub total: f64,
}

impl LossVars {
    pub fn values<T: Float>(&self, g: &Graph<T>) -> LossBreakdown {
        let v = |x: Var| g.value(x).item().as_f64();
        LossBreakdown {
            l_pred_focal: self.pred_focal.map_or(0.0, v),
            l_pred_reg: self.pred_reg.map_or(0.0, v),
            l_det_focal: v(self.det_focal),
            l_det_reg: v(self.det_reg),
            total: v(self.total),
        }
    }
}

/// `λ_pred · L_pred + λ_det · L_det`, each branch loss being focal + L1.
pub fn total_loss<T: Float>(
    g: &mut Graph<T>,
    det: &HeadOutput,
    pred: Option<&HeadOutput>,
    targets: &TargetMaps<T>,
    cfg: &LossConfig,
) -> Result<LossVars, NetError> {
    let det_focal = gaussian_focal_loss(g, det.heatmap, &targets.heatmap, cfg)?;
    let det_reg = regression_l1(g, det, targets)?;
    let l_det = g.add(det_focal, det_reg)?;
    let mut total = g.scale(l_det, T::from_f64_lossy(cfg.lambda_det))?;
    let (mut pred_focal, mut pred_reg) = (None, None);
    if let Some(p) = pred {
        let f = gaussian_focal_loss(g, p.heatmap, &targets.heatmap, cfg)?;
        let r = regression_l1(g, p, targets)?;
        let l_pred = g.add(f, r)?;
        let weighted = g.scale(l_pred, T::from_f64_lossy(cfg.lambda_pred))?;
        total = g.add(total, weighted)?;
        pred_focal = Some(f);
        pred_reg = Some(r);
    }
    Ok(LossVars {
        det_focal,
        det_reg,
        pred_focal,
        pred_reg,
        total,
    })
}

/// Scalar combination used by [`total_loss`].
pub fn combine(l_pred: f64, l_det: f64, cfg: &LossConfig) -> f64 {
    cfg.lambda_pred * l_pred + cfg.lambda_det * l_det
}
