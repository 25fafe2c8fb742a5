//! The two-branch detector.
//!
//! Observed branch: all aligned frames `t, t-1, …, t-N` concatenated along
//! channels and encoded into `B_o`. Predictive branch: only the past frames,
//! stacked in time, through a spatiotemporal 3D encoder, a dense temporal
//! collapse and a two-stream multi-resolution encoder into `B_f`. The two
//! maps are fused (deformable attention with shared offsets by default) and
//! fed to a center-based detection head; a second head with its own weights
//! reads `B_f` alone.

mod encoder;
mod fusion;
mod head;
mod params;

pub use encoder::{encode_observed, extract_temporal_context};
pub use fusion::{fdfa_at, fuse, FdfaTrace};
pub use head::{decode_detections, detect_head, HeadMaps, HeadOutput, HEAD_TASKS};
pub use params::{Bound, Init, ParamSet, ParamSpec};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::AlignedBevSequence;
use crate::tensor::{Float, Graph, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("{op} expects {expected} frames, got {got}")]
    FrameCount { op: &'static str, expected: usize, got: usize },
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, NetError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    Fdfa,
    ChannelAttention,
    ConcatConv1d,
    ConcatConv2d,
}

impl FusionKind {
    pub const ALL: [FusionKind; 4] = [
        FusionKind::ChannelAttention,
        FusionKind::ConcatConv1d,
        FusionKind::ConcatConv2d,
        FusionKind::Fdfa,
    ];

    pub fn label(self) -> &'static str {
        match self {
            FusionKind::Fdfa => "deformable attention (shared offsets)",
            FusionKind::ChannelAttention => "channel-wise attention",
            FusionKind::ConcatConv1d => "concat + 1D conv",
            FusionKind::ConcatConv2d => "concat + 2D conv",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DapConfig {
    /// Channels per observation frame.
    pub in_channels: usize,
    /// BEV feature width `D`.
    pub width: usize,
    pub past_frames: usize,
    pub height_cells: usize,
    pub width_cells: usize,
    pub fusion: FusionKind,
    pub heads: usize,
    pub points: usize,
    pub num_classes: usize,
    pub head_channels: usize,
    /// Observed branch sees all frames (otherwise only frame `t`).
    pub concat_frames: bool,
    /// Predictive branch, fusion and auxiliary head enabled.
    pub fusion_module: bool,
    pub spatiotemporal_3d: bool,
    pub multi_resolution: bool,
}

impl Default for DapConfig {
    fn default() -> Self {
        DapConfig {
            in_channels: 6,
            width: 8,
            past_frames: 4,
            height_cells: 64,
            width_cells: 64,
            fusion: FusionKind::Fdfa,
            heads: 2,
            points: 2,
            num_classes: 3,
            head_channels: 8,
            concat_frames: true,
            fusion_module: true,
            spatiotemporal_3d: true,
            multi_resolution: true,
        }
    }
}

impl DapConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(NetError::Config(m.to_string()));
        if self.in_channels == 0 || self.width == 0 || self.num_classes == 0 || self.head_channels == 0 {
            return bad("channel counts must be positive");
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return bad("width must be divisible by the number of heads");
        }
        if self.points == 0 {
            return bad("points must be at least 1");
        }
        if self.past_frames == 0 {
            return bad("past_frames must be at least 1");
        }
        if self.width % 2 != 0 {
            return bad("width must be even");
        }
        if self.multi_resolution && (self.height_cells % 2 != 0 || self.width_cells % 2 != 0) {
            return bad("multi-resolution needs even grid dimensions");
        }
        Ok(())
    }

    /// Ablation row of the components table: flags `C, F, S, M`.
    pub fn with_flags(&self, c: bool, f: bool, s: bool, m: bool) -> Self {
        DapConfig {
            concat_frames: c,
            fusion_module: f,
            spatiotemporal_3d: s,
            multi_resolution: m,
            ..self.clone()
        }
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        encoder::observed_specs(self, &mut out);
        head::head_specs(self, "det", &mut out);
        if self.fusion_module {
            encoder::temporal_specs(self, &mut out);
            fusion::fusion_specs(self, &mut out);
            head::head_specs(self, "pred", &mut out);
        }
        out
    }

    pub fn init_params<T: Float>(&self, seed: u64) -> ParamSet<T> {
        ParamSet::init(&self.param_specs(), seed)
    }

    pub fn param_count(&self) -> usize {
        self.param_specs().iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }

    pub(crate) fn groups(&self) -> usize {
        if self.width % 2 == 0 {
            2
        } else {
            1
        }
    }
}

pub struct ForwardOutput {
    pub b_o: Var,
    pub b_f: Option<Var>,
    pub b_hat: Var,
    pub det: HeadOutput,
    pub pred: Option<HeadOutput>,
}

/// `conv2d` or `conv3d` depending on the rank of `{name}.w`.
pub(crate) fn conv<T: Float>(
    g: &mut Graph<T>,
    p: &Bound,
    name: &str,
    x: Var,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let w = p.var(&format!("{name}.w"))?;
    let b = p.var(&format!("{name}.b"))?;
    let out = if g.shape(w).len() == 5 {
        g.conv3d(x, w, Some(b), [1, stride, stride], [pad, pad, pad])?
    } else {
        g.conv2d(x, w, Some(b), stride, pad)?
    };
    Ok(out)
}

/// Full forward pass over aligned frames `[t, t-1, …, t-N]` already in the graph.
pub fn forward_vars<T: Float>(
    g: &mut Graph<T>,
    cfg: &DapConfig,
    p: &Bound,
    frames: &[Var],
    mut trace: Option<&mut FdfaTrace<T>>,
) -> Result<ForwardOutput> {
    if frames.len() != cfg.past_frames + 1 {
        return Err(NetError::FrameCount {
            op: "forward",
            expected: cfg.past_frames + 1,
            got: frames.len(),
        });
    }
    let b_o = encode_observed(g, cfg, p, frames)?;
    if !cfg.fusion_module {
        let det = detect_head(g, cfg, p, "det", b_o)?;
        return Ok(ForwardOutput {
            b_o,
            b_f: None,
            b_hat: b_o,
            det,
            pred: None,
        });
    }
    let b_f = extract_temporal_context(g, cfg, p, &frames[1..])?;
    let b_hat = fuse(g, cfg, p, b_o, b_f, trace.as_deref_mut())?;
    let det = detect_head(g, cfg, p, "det", b_hat)?;
    let pred = detect_head(g, cfg, p, "pred", b_f)?;
    Ok(ForwardOutput {
        b_o,
        b_f: Some(b_f),
        b_hat,
        det,
        pred: Some(pred),
    })
}

/// Forward pass with the aligned frames as graph constants.
pub fn forward<T: Float>(
    g: &mut Graph<T>,
    cfg: &DapConfig,
    p: &Bound,
    input: &AlignedBevSequence<T>,
) -> Result<ForwardOutput> {
    let frames: Vec<Var> = input.frames.iter().map(|f| g.constant(f.clone())).collect();
    forward_vars(g, cfg, p, &frames, None)
}

/// Inference: detection-head maps for one aligned sequence.
pub fn predict_maps<T: Float>(
    cfg: &DapConfig,
    params: &ParamSet<T>,
    input: &AlignedBevSequence<T>,
) -> Result<(HeadMaps<T>, Option<HeadMaps<T>>)> {
    let mut g = Graph::new();
    let p = Bound::new(&mut g, params, false);
    let out = forward(&mut g, cfg, &p, input)?;
    Ok((out.det.maps(&g), out.pred.map(|h| h.maps(&g))))
}

