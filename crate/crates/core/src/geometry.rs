//! Planar ego poses, BEV grid conventions and temporal alignment of past
//! BEV maps into the current ego frame.
//!
//! Ego frame: `x` forward, `y` left. Grid rows follow `x`, columns follow
//! `y`, and the ego origin sits at the grid centre `((H-1)/2, (W-1)/2)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Float, Graph, Result as TensorResult, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("grid {cells} cells × {cell_size} m does not span 2 × {extent} m")]
    InconsistentGrid { cells: usize, cell_size: f64, extent: f64 },
    #[error("feature shape {got:?} does not match grid {height}×{width}")]
    ShapeMismatch { got: Vec<usize>, height: usize, width: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BevGridSpec {
    pub height_cells: usize,
    pub width_cells: usize,
    pub cell_size: f64,
    pub extent: f64,
}

impl BevGridSpec {
    pub fn new(height_cells: usize, width_cells: usize, cell_size: f64, extent: f64) -> Result<Self, GeometryError> {
        let spec = BevGridSpec {
            height_cells,
            width_cells,
            cell_size,
            extent,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// 200×200 cells of 0.512 m covering ±51.2 m.
    pub fn reference() -> Self {
        BevGridSpec {
            height_cells: 200,
            width_cells: 200,
            cell_size: 0.512,
            extent: 51.2,
        }
    }

    /// 64×64 cells of 1 m covering ±32 m.
    pub fn desk() -> Self {
        BevGridSpec {
            height_cells: 64,
            width_cells: 64,
            cell_size: 1.0,
            extent: 32.0,
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        for cells in [self.height_cells, self.width_cells] {
            let span = cells as f64 * self.cell_size;
            if cells == 0 || !(self.cell_size > 0.0) || (span - 2.0 * self.extent).abs() > 1e-9 * span.max(1.0) {
                return Err(GeometryError::InconsistentGrid {
                    cells,
                    cell_size: self.cell_size,
                    extent: self.extent,
                });
            }
        }
        Ok(())
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.height_cells as f64 - 1.0) / 2.0,
            (self.width_cells as f64 - 1.0) / 2.0,
        )
    }

    pub fn cells(&self) -> usize {
        self.height_cells * self.width_cells
    }

    /// Continuous `(row, col)` of an ego-frame point in metres.
    pub fn world_to_grid(&self, x: f64, y: f64) -> (f64, f64) {
        let (cr, cc) = self.center();
        (cr + x / self.cell_size, cc + y / self.cell_size)
    }

    /// Ego-frame point in metres of a continuous `(row, col)`.
    pub fn grid_to_world(&self, row: f64, col: f64) -> (f64, f64) {
        let (cr, cc) = self.center();
        ((row - cr) * self.cell_size, (col - cc) * self.cell_size)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x.abs() <= self.extent && y.abs() <= self.extent
    }
}

/// Wraps an angle into `(-π, π]`.
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoPose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl EgoPose {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        EgoPose {
            x,
            y,
            yaw: normalize_angle(yaw),
        }
    }

    pub fn identity() -> Self {
        EgoPose::new(0.0, 0.0, 0.0)
    }

    /// World point expressed in this pose's frame.
    pub fn world_to_local(&self, x: f64, y: f64) -> (f64, f64) {
        PlanarTransform::from_pose(self).inverse().apply(x, y)
    }

    pub fn local_to_world(&self, x: f64, y: f64) -> (f64, f64) {
        PlanarTransform::from_pose(self).apply(x, y)
    }
}

/// `p ↦ R·p + t` in the plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlanarTransform {
    pub rotation: [[f64; 2]; 2],
    pub translation: [f64; 2],
}

impl PlanarTransform {
    pub fn identity() -> Self {
        PlanarTransform {
            rotation: [[1.0, 0.0], [0.0, 1.0]],
            translation: [0.0, 0.0],
        }
    }

    pub fn rotation(angle: f64) -> [[f64; 2]; 2] {
        let (s, c) = angle.sin_cos();
        [[c, -s], [s, c]]
    }

    /// Local-to-world transform of a pose.
    pub fn from_pose(p: &EgoPose) -> Self {
        PlanarTransform {
            rotation: Self::rotation(p.yaw),
            translation: [p.x, p.y],
        }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let r = &self.rotation;
        (
            r[0][0] * x + r[0][1] * y + self.translation[0],
            r[1][0] * x + r[1][1] * y + self.translation[1],
        )
    }

    pub fn apply_vector(&self, x: f64, y: f64) -> (f64, f64) {
        let r = &self.rotation;
        (r[0][0] * x + r[0][1] * y, r[1][0] * x + r[1][1] * y)
    }

    pub fn inverse(&self) -> Self {
        let r = &self.rotation;
        let rt = [[r[0][0], r[1][0]], [r[0][1], r[1][1]]];
        let t = self.translation;
        PlanarTransform {
            rotation: rt,
            translation: [
                -(rt[0][0] * t[0] + rt[0][1] * t[1]),
                -(rt[1][0] * t[0] + rt[1][1] * t[1]),
            ],
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &PlanarTransform) -> Self {
        let a = &self.rotation;
        let b = &other.rotation;
        let mut rot = [[0.0; 2]; 2];
        for (i, row) in rot.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
        }
        let (tx, ty) = self.apply(other.translation[0], other.translation[1]);
        PlanarTransform {
            rotation: rot,
            translation: [tx, ty],
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }
}

/// Maps points in the `past` ego frame into the `current` ego frame.
pub fn relative_transform(past: &EgoPose, current: &EgoPose) -> PlanarTransform {
    let rel_yaw = past.yaw - current.yaw;
    let (dx, dy) = (past.x - current.x, past.y - current.y);
    let back = PlanarTransform::rotation(-current.yaw);
    PlanarTransform {
        rotation: PlanarTransform::rotation(rel_yaw),
        translation: [
            back[0][0] * dx + back[0][1] * dy,
            back[1][0] * dx + back[1][1] * dy,
        ],
    }
}

/// Continuous source coordinates in the past map for every current-frame
/// cell, as a `[H·W, 2]` list of `(row, col)`.
///
/// Computed directly in grid units so that identity motion and whole-cell
/// translations produce exactly integral coordinates.
pub fn alignment_sample_points<T: Float>(spec: &BevGridSpec, past: &EgoPose, current: &EgoPose) -> Tensor<T> {
    // current -> past
    let to_past = relative_transform(past, current).inverse();
    let r = to_past.rotation;
    let (tr, tc) = (
        to_past.translation[0] / spec.cell_size,
        to_past.translation[1] / spec.cell_size,
    );
    let (cr, cc) = spec.center();
    let (h, w) = (spec.height_cells, spec.width_cells);
    let mut pts = Vec::with_capacity(2 * h * w);
    for i in 0..h {
        let u = i as f64 - cr;
        for j in 0..w {
            let v = j as f64 - cc;
            let row = r[0][0] * u + r[0][1] * v + tr + cr;
            let col = r[1][0] * u + r[1][1] * v + tc + cc;
            pts.push(T::from_f64_lossy(row));
            pts.push(T::from_f64_lossy(col));
        }
    }
    Tensor::new(vec![h * w, 2], pts).expect("point buffer sized from grid")
}

fn check_feature(shape: &[usize], spec: &BevGridSpec) -> Result<usize, GeometryError> {
    match shape {
        &[c, h, w] if h == spec.height_cells && w == spec.width_cells => Ok(c),
        _ => Err(GeometryError::ShapeMismatch {
            got: shape.to_vec(),
            height: spec.height_cells,
            width: spec.width_cells,
        }),
    }
}

/// Warps a past BEV map `[C, H, W]` into the current ego frame by backward
/// bilinear sampling. Cells whose source lies outside the past coverage read
/// zero.
pub fn align_bev<T: Float>(
    feature: &Tensor<T>,
    past: &EgoPose,
    current: &EgoPose,
    spec: &BevGridSpec,
) -> Result<Tensor<T>, GeometryError> {
    let c = check_feature(feature.shape(), spec)?;
    let pts = alignment_sample_points::<T>(spec, past, current);
    let mut g = Graph::<T>::new();
    let f = g.constant(feature.clone());
    let p = g.constant(pts);
    let s = g.bilinear_sample(f, p)?;
    let out = g.value(s).clone();
    Ok(out.reshape(vec![c, spec.height_cells, spec.width_cells])?)
}

/// Differentiable variant of [`align_bev`] on a graph value.
pub fn align_bev_var<T: Float>(
    g: &mut Graph<T>,
    feature: Var,
    past: &EgoPose,
    current: &EgoPose,
    spec: &BevGridSpec,
) -> TensorResult<Var> {
    let c = check_feature(g.shape(feature), spec).map_err(|e| TensorError::Shape {
        op: "align_bev",
        msg: e.to_string(),
    })?;
    let pts = g.constant(alignment_sample_points::<T>(spec, past, current));
    let s = g.bilinear_sample(feature, pts)?;
    g.reshape(s, &[c, spec.height_cells, spec.width_cells])
}

/// `frames[k]` is the map at time `t - k`; `poses` match one-to-one.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedBevSequence<T: Float = f32> {
    pub frames: Vec<Tensor<T>>,
    pub poses: Vec<EgoPose>,
}

impl<T: Float> AlignedBevSequence<T> {
    /// Aligns chronologically ordered observations (oldest first, current
    /// last) into the current ego frame and reorders them `t, t-1, …, t-N`.
    pub fn from_chronological(
        observations: &[Tensor<T>],
        poses: &[EgoPose],
        spec: &BevGridSpec,
    ) -> Result<Self, GeometryError> {
        assert_eq!(observations.len(), poses.len(), "one pose per observation");
        let current = *poses.last().expect("at least one frame");
        let mut frames = Vec::with_capacity(observations.len());
        let mut ordered = Vec::with_capacity(observations.len());
        for (obs, pose) in observations.iter().zip(poses).rev() {
            frames.push(align_bev(obs, pose, &current, spec)?);
            ordered.push(*pose);
        }
        Ok(AlignedBevSequence { frames, poses: ordered })
    }

    /// Number of past frames `N`.
    pub fn past_len(&self) -> usize {
        self.frames.len().saturating_sub(1)
    }

    pub fn cast<U: Float>(&self) -> AlignedBevSequence<U> {
        AlignedBevSequence {
            frames: self.frames.iter().map(Tensor::cast).collect(),
            poses: self.poses.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn reference_grid_is_consistent() {
        BevGridSpec::reference().validate().unwrap();
        BevGridSpec::desk().validate().unwrap();
        assert!(BevGridSpec::new(10, 10, 1.0, 4.0).is_err());
    }

    #[test]
    fn relative_transform_examples() {
        let p = EgoPose::new(3.0, -1.0, 0.4);
        let same = relative_transform(&p, &p);
        assert_eq!(same.rotation, PlanarTransform::identity().rotation);
        assert_eq!(same.translation, [0.0, 0.0]);
        let t = relative_transform(&EgoPose::identity(), &EgoPose::new(1.0, 0.0, 0.0));
        assert_eq!(t.apply(0.0, 0.0), (-1.0, 0.0));
        let r = relative_transform(&EgoPose::identity(), &EgoPose::new(0.0, 0.0, FRAC_PI_2));
        let (x, y) = r.apply(1.0, 0.0);
        assert!(x.abs() < 1e-12 && (y + 1.0).abs() < 1e-12);
    }

    #[test]
    fn world_to_grid_examples() {
        let s = BevGridSpec::desk();
        assert_eq!(s.world_to_grid(0.0, 0.0), (31.5, 31.5));
        let (r, c) = s.world_to_grid(s.extent - s.cell_size / 2.0, 0.0);
        assert_eq!((r, c), (63.0, 31.5));
        let s = BevGridSpec::reference();
        let (r, _) = s.world_to_grid(s.extent - s.cell_size / 2.0, 0.0);
        assert!((r - 199.0).abs() < 1e-9);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let f = Tensor::<f32>::zeros(vec![1, 8, 8]);
        let err = align_bev(&f, &EgoPose::identity(), &EgoPose::identity(), &BevGridSpec::desk()).unwrap_err();
        assert!(matches!(err, GeometryError::ShapeMismatch { .. }));
    }

    proptest! {
        #[test]
        fn transform_inverse_composes_to_identity(
            x0 in -50.0..50.0f64, y0 in -50.0..50.0f64, a0 in -3.0..3.0f64,
            x1 in -50.0..50.0f64, y1 in -50.0..50.0f64, a1 in -3.0..3.0f64,
            px in -30.0..30.0f64, py in -30.0..30.0f64,
        ) {
            let t = relative_transform(&EgoPose::new(x0, y0, a0), &EgoPose::new(x1, y1, a1));
            let (qx, qy) = t.inverse().compose(&t).apply(px, py);
            prop_assert!((qx - px).abs() < 1e-9 && (qy - py).abs() < 1e-9);
        }

        #[test]
        fn grid_round_trip(x in -40.0..40.0f64, y in -40.0..40.0f64) {
            for s in [BevGridSpec::desk(), BevGridSpec::reference()] {
                let (r, c) = s.world_to_grid(x, y);
                let (bx, by) = s.grid_to_world(r, c);
                prop_assert!((bx - x).abs() < 1e-9 && (by - y).abs() < 1e-9);
            }
        }

        #[test]
        fn angles_normalise_into_half_open_interval(a in -50.0..50.0f64) {
            let n = normalize_angle(a);
            prop_assert!(n > -PI && n <= PI);
            prop_assert!(((a - n) / (2.0 * PI)).fract().abs() < 1e-9
                || (1.0 - ((a - n) / (2.0 * PI)).fract().abs()) < 1e-9);
        }
    }
}
