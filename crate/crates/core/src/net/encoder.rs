use super::params::{conv_specs, norm_specs, ParamSpec};
use super::{conv, Bound, DapConfig, NetError, Result};
use crate::tensor::{Float, Graph, Var};

pub(super) fn observed_specs(cfg: &DapConfig, out: &mut Vec<ParamSpec>) {
    let d = cfg.width;
    let frames = if cfg.concat_frames { cfg.past_frames + 1 } else { 1 };
    conv_specs(out, "obs.stem", d, frames * cfg.in_channels, &[3, 3], 1.0);
    norm_specs(out, "obs.stem.gn", d);
    conv_specs(out, "obs.res1", d, d, &[3, 3], 1.0);
    norm_specs(out, "obs.res1.gn", d);
    conv_specs(out, "obs.res2", d, d, &[3, 3], 1.0);
    norm_specs(out, "obs.res2.gn", d);
}

pub(super) fn temporal_specs(cfg: &DapConfig, out: &mut Vec<ParamSpec>) {
    let (d, h, n, c) = (cfg.width, cfg.width / 2, cfg.past_frames, cfg.in_channels);
    if cfg.spatiotemporal_3d {
        conv_specs(out, "tmp.st1", h, c, &[3, 3, 3], 1.0);
        conv_specs(out, "tmp.st2", h, h, &[3, 3, 3], 1.0);
        conv_specs(out, "tmp.dense", d, h, &[n, 1, 1], 1.0);
    } else {
        conv_specs(out, "tmp.st1", h, n * c, &[3, 3], 1.0);
        conv_specs(out, "tmp.st2", h, h, &[3, 3], 1.0);
        conv_specs(out, "tmp.dense", d, h, &[1, 1], 1.0);
    }
    for s in 1..=2 {
        conv_specs(out, &format!("tmp.mr{s}.hi"), d, d, &[3, 3], 1.0);
    }
    if cfg.multi_resolution {
        conv_specs(out, "tmp.mr.down", d, d, &[3, 3], 1.0);
        for s in 1..=2 {
            conv_specs(out, &format!("tmp.mr{s}.lo"), d, d, &[3, 3], 1.0);
            conv_specs(out, &format!("tmp.mr{s}.lo2hi"), d, d, &[1, 1], 1.0);
            conv_specs(out, &format!("tmp.mr{s}.hi2lo"), d, d, &[3, 3], 1.0);
        }
        conv_specs(out, "tmp.mr.fuse", d, d, &[1, 1], 1.0);
    }
}

fn conv_norm_relu<T: Float>(g: &mut Graph<T>, cfg: &DapConfig, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let y = conv(g, p, name, x, 1, 1)?;
    let y = g.group_norm(
        y,
        p.var(&format!("{name}.gn.gamma"))?,
        p.var(&format!("{name}.gn.beta"))?,
        cfg.groups(),
    )?;
    Ok(g.relu(y)?)
}

/// `B_o` from aligned frames `[t, t-1, …, t-N]`. Without frame
/// concatenation only frame `t` is encoded.
pub fn encode_observed<T: Float>(g: &mut Graph<T>, cfg: &DapConfig, p: &Bound, frames: &[Var]) -> Result<Var> {
    if frames.len() != cfg.past_frames + 1 {
        return Err(NetError::FrameCount {
            op: "encode_observed",
            expected: cfg.past_frames + 1,
            got: frames.len(),
        });
    }
    let x = if cfg.concat_frames { g.concat(frames, 0)? } else { frames[0] };
    let stem = conv_norm_relu(g, cfg, p, "obs.stem", x)?;
    let r = conv_norm_relu(g, cfg, p, "obs.res1", stem)?;
    let r = conv(g, p, "obs.res2", r, 1, 1)?;
    let r = g.group_norm(r, p.var("obs.res2.gn.gamma")?, p.var("obs.res2.gn.beta")?, cfg.groups())?;
    let sum = g.add(stem, r)?;
    Ok(g.relu(sum)?)
}

/// `B_f` from past frames `[t-1, …, t-N]`; the current frame is not an input.
pub fn extract_temporal_context<T: Float>(
    g: &mut Graph<T>,
    cfg: &DapConfig,
    p: &Bound,
    past: &[Var],
) -> Result<Var> {
    if past.len() != cfg.past_frames {
        return Err(NetError::FrameCount {
            op: "extract_temporal_context",
            expected: cfg.past_frames,
            got: past.len(),
        });
    }
    let (hc, wc) = (cfg.height_cells, cfg.width_cells);
    let x = if cfg.spatiotemporal_3d {
        let mut slices = Vec::with_capacity(past.len());
        for &f in past {
            let c = g.shape(f)[0];
            slices.push(g.reshape(f, &[c, 1, hc, wc])?);
        }
        let stacked = g.concat(&slices, 1)?;
        let y = conv(g, p, "tmp.st1", stacked, 1, 1)?;
        let y = g.relu(y)?;
        let y = conv(g, p, "tmp.st2", y, 1, 1)?;
        let y = g.relu(y)?;
        // temporal-full-extent kernel collapses T to 1
        let w = p.var("tmp.dense.w")?;
        let b = p.var("tmp.dense.b")?;
        let y = g.conv3d(y, w, Some(b), [1, 1, 1], [0, 0, 0])?;
        g.reshape(y, &[cfg.width, hc, wc])?
    } else {
        let cat = g.concat(past, 0)?;
        let y = conv(g, p, "tmp.st1", cat, 1, 1)?;
        let y = g.relu(y)?;
        let y = conv(g, p, "tmp.st2", y, 1, 1)?;
        let y = g.relu(y)?;
        conv(g, p, "tmp.dense", y, 1, 0)?
    };
    let x = g.relu(x)?;
    multi_resolution(g, cfg, p, x)
}

fn multi_resolution<T: Float>(g: &mut Graph<T>, cfg: &DapConfig, p: &Bound, x: Var) -> Result<Var> {
    if !cfg.multi_resolution {
        let mut hi = x;
        for s in 1..=2 {
            let y = conv(g, p, &format!("tmp.mr{s}.hi"), hi, 1, 1)?;
            hi = g.relu(y)?;
        }
        return Ok(hi);
    }
    let mut hi = x;
    let lo = conv(g, p, "tmp.mr.down", x, 2, 1)?;
    let mut lo = g.relu(lo)?;
    for s in 1..=2 {
        let hh = conv(g, p, &format!("tmp.mr{s}.hi"), hi, 1, 1)?;
        let lh = conv(g, p, &format!("tmp.mr{s}.lo2hi"), lo, 1, 0)?;
        let lh = g.upsample_bilinear2x(lh)?;
        let ll = conv(g, p, &format!("tmp.mr{s}.lo"), lo, 1, 1)?;
        let hl = conv(g, p, &format!("tmp.mr{s}.hi2lo"), hi, 2, 1)?;
        let new_hi = g.add(hh, lh)?;
        let new_lo = g.add(ll, hl)?;
        hi = g.relu(new_hi)?;
        lo = g.relu(new_lo)?;
    }
    let up = conv(g, p, "tmp.mr.fuse", lo, 1, 0)?;
    let up = g.upsample_bilinear2x(up)?;
    Ok(g.add(hi, up)?)
}
