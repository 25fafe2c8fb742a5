use super::params::{conv_specs, ParamSpec};
use super::{conv, Bound, DapConfig, Result};
use crate::geometry::BevGridSpec;
use crate::sim::{Attribute, ObjectBox, ObjectClass};
use crate::tensor::{Float, Graph, Tensor, Var};

/// Logit of 0.1, the initial heatmap prior.
pub const HEATMAP_BIAS: f64 = -2.19;

/// Regression tasks after the heatmap, with their channel counts.
pub const HEAD_TASKS: [(&str, usize); 5] = [("offset", 2), ("scale", 3), ("yaw", 2), ("velocity", 2), ("attribute", 1)];

pub(super) fn head_specs(cfg: &DapConfig, prefix: &str, out: &mut Vec<ParamSpec>) {
    let (d, hc) = (cfg.width, cfg.head_channels);
    conv_specs(out, &format!("{prefix}.shared"), hc, d, &[3, 3], 1.0);
    let tasks = std::iter::once(("heatmap", cfg.num_classes)).chain(HEAD_TASKS);
    for (task, channels) in tasks {
        conv_specs(out, &format!("{prefix}.{task}.1"), hc, hc, &[3, 3], 1.0);
        conv_specs(out, &format!("{prefix}.{task}.2"), channels, hc, &[3, 3], 0.1);
        if task == "heatmap" {
            let bias = out.last_mut().unwrap();
            bias.init = super::Init::Const(HEATMAP_BIAS);
        }
    }
}

/// Head outputs as graph nodes. `heatmap` is post-sigmoid, `attribute` a logit.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub heatmap: Var,
    pub offset: Var,
    pub scale: Var,
    pub yaw: Var,
    pub velocity: Var,
    pub attribute: Var,
}

impl HeadOutput {
    pub fn maps<T: Float>(&self, g: &Graph<T>) -> HeadMaps<T> {
        HeadMaps {
            heatmap: g.value(self.heatmap).clone(),
            offset: g.value(self.offset).clone(),
            scale: g.value(self.scale).clone(),
            yaw: g.value(self.yaw).clone(),
            velocity: g.value(self.velocity).clone(),
            attribute: g.value(self.attribute).clone(),
        }
    }

    /// Regression outputs in [`HEAD_TASKS`] order.
    pub fn regressions(&self) -> [Var; 5] {
        [self.offset, self.scale, self.yaw, self.velocity, self.attribute]
    }
}

/// Head outputs as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadMaps<T: Float = f32> {
    pub heatmap: Tensor<T>,
    pub offset: Tensor<T>,
    pub scale: Tensor<T>,
    pub yaw: Tensor<T>,
    pub velocity: Tensor<T>,
    pub attribute: Tensor<T>,
}

pub fn detect_head<T: Float>(g: &mut Graph<T>, _cfg: &DapConfig, p: &Bound, prefix: &str, b: Var) -> Result<HeadOutput> {
    let shared = conv(g, p, &format!("{prefix}.shared"), b, 1, 1)?;
    let shared = g.relu(shared)?;
    // the first conv of every branch reads the same input, so run them as one
    let tasks: Vec<&str> = std::iter::once("heatmap").chain(HEAD_TASKS.iter().map(|t| t.0)).collect();
    let mut ws = Vec::with_capacity(tasks.len());
    let mut bs = Vec::with_capacity(tasks.len());
    for task in &tasks {
        ws.push(p.var(&format!("{prefix}.{task}.1.w"))?);
        bs.push(p.var(&format!("{prefix}.{task}.1.b"))?);
    }
    let w = g.concat(&ws, 0)?;
    let b = g.concat(&bs, 0)?;
    let hidden = g.conv2d(shared, w, Some(b), 1, 1)?;
    let hidden = g.relu(hidden)?;
    let hc = g.shape(ws[0])[0];
    let mut outs = Vec::with_capacity(tasks.len());
    for (k, task) in tasks.iter().enumerate() {
        let y = g.narrow(hidden, 0, k * hc, hc)?;
        outs.push(conv(g, p, &format!("{prefix}.{task}.2"), y, 1, 1)?);
    }
    let [logits, offset, scale, yaw, velocity, attribute] = outs[..] else {
        unreachable!("six head tasks")
    };
    let heatmap = g.sigmoid(logits)?;
    Ok(HeadOutput {
        heatmap,
        offset,
        scale,
        yaw,
        velocity,
        attribute,
    })
}

/// Boxes from 3×3 heatmap peaks, best `top_k` by score with `score >= score_thresh`.
pub fn decode_detections<T: Float>(
    maps: &HeadMaps<T>,
    spec: &BevGridSpec,
    score_thresh: f64,
    top_k: usize,
) -> Vec<ObjectBox> {
    let hm = &maps.heatmap;
    let (nc, h, w) = (hm.shape()[0], hm.shape()[1], hm.shape()[2]);
    let at = |t: &Tensor<T>, c: usize, i: usize, j: usize| t.data()[(c * h + i) * w + j].as_f64();
    let mut peaks = Vec::new();
    for c in 0..nc.min(ObjectClass::ALL.len()) {
        for i in 0..h {
            for j in 0..w {
                let v = at(hm, c, i, j);
                if v < score_thresh {
                    continue;
                }
                let mut is_max = true;
                'n: for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        let (ni, nj) = (i as i64 + di, j as i64 + dj);
                        if (di, dj) == (0, 0) || ni < 0 || nj < 0 || ni >= h as i64 || nj >= w as i64 {
                            continue;
                        }
                        if at(hm, c, ni as usize, nj as usize) > v {
                            is_max = false;
                            break 'n;
                        }
                    }
                }
                if is_max {
                    peaks.push((v, c, i, j));
                }
            }
        }
    }
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2, a.3).cmp(&(b.1, b.2, b.3))));
    peaks.truncate(top_k);
    peaks
        .into_iter()
        .map(|(score, c, i, j)| {
            let row = i as f64 + at(&maps.offset, 0, i, j);
            let col = j as f64 + at(&maps.offset, 1, i, j);
            let (x, y) = spec.grid_to_world(row, col);
            let size = [0, 1, 2].map(|k| at(&maps.scale, k, i, j).exp());
            let yaw = at(&maps.yaw, 0, i, j).atan2(at(&maps.yaw, 1, i, j));
            let attr = 1.0 / (1.0 + (-at(&maps.attribute, 0, i, j)).exp());
            ObjectBox {
                class_id: ObjectClass::ALL[c],
                center: [x, y, size[2] / 2.0],
                size,
                yaw: crate::geometry::normalize_angle(yaw),
                velocity: [at(&maps.velocity, 0, i, j), at(&maps.velocity, 1, i, j)],
                attribute: if attr > 0.5 { Attribute::Moving } else { Attribute::Stopped },
                score: Some(score),
            }
        })
        .collect()
}
