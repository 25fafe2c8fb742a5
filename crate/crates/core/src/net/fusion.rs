use super::params::{conv_specs, Init, ParamSpec};
use super::{conv, Bound, DapConfig, FusionKind, NetError, Result};
use crate::tensor::{bilinear_sample, Float, Graph, Tensor, Var};

pub(super) fn fusion_specs(cfg: &DapConfig, out: &mut Vec<ParamSpec>) {
    let (d, h, k) = (cfg.width, cfg.heads, cfg.points);
    match cfg.fusion {
        FusionKind::Fdfa => {
            out.push(ParamSpec::new("fuse.offset.w", vec![h * k * 2, d], Init::Zero));
            out.push(ParamSpec::new("fuse.offset.b", vec![h * k * 2], Init::Zero));
            out.push(ParamSpec::new("fuse.attn.w", vec![h * 2 * k, d], Init::Zero));
            out.push(ParamSpec::new("fuse.attn.b", vec![h * 2 * k], Init::Zero));
            out.push(ParamSpec::new("fuse.value.w", vec![d, d], Init::He { fan_in: d, gain: 0.5 }));
            out.push(ParamSpec::new("fuse.out.w", vec![d, d], Init::Zero));
        }
        FusionKind::ChannelAttention => {
            out.push(ParamSpec::new(
                "fuse.query",
                vec![d, cfg.height_cells, cfg.width_cells],
                Init::He { fan_in: d, gain: 0.5 },
            ));
            conv_specs(out, "fuse.proj", d, d, &[1, 1], 1.0);
        }
        FusionKind::ConcatConv1d => conv_specs(out, "fuse.conv", d, 2 * d, &[1, 1], 1.0),
        FusionKind::ConcatConv2d => conv_specs(out, "fuse.conv", d, 2 * d, &[3, 3], 1.0),
    }
}

/// Values recorded during one FDFA pass: the coordinates actually fed to
/// each sampler (per head, `[HW·K, 2]` in `(row, col)` grid units) and the
/// joint attention weights (per head, `[HW, 2K]`, first `K` for `B_o`).
#[derive(Clone, Debug, Default)]
pub struct FdfaTrace<T: Float> {
    pub points_o: Vec<Tensor<T>>,
    pub points_f: Vec<Tensor<T>>,
    pub attention: Vec<Tensor<T>>,
}

/// `[HW·K, 2]` reference coordinates: cell `(r, c)` repeated `K` times.
fn reference_points<T: Float>(h: usize, w: usize, k: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(h * w * k * 2);
    for r in 0..h {
        for c in 0..w {
            for _ in 0..k {
                data.push(T::from_usize(r).unwrap());
                data.push(T::from_usize(c).unwrap());
            }
        }
    }
    Tensor::new(vec![h * w * k, 2], data).expect("reference grid")
}

/// Fused feature `B_hat` from `B_o` and `B_f`, both `[D, H, W]`.
pub fn fuse<T: Float>(
    g: &mut Graph<T>,
    cfg: &DapConfig,
    p: &Bound,
    b_o: Var,
    b_f: Var,
    trace: Option<&mut FdfaTrace<T>>,
) -> Result<Var> {
    let (so, sf) = (g.shape(b_o).to_vec(), g.shape(b_f).to_vec());
    if so != sf || so.len() != 3 {
        return Err(NetError::Config(format!("fusion inputs differ: {so:?} vs {sf:?}")));
    }
    match cfg.fusion {
        FusionKind::Fdfa => fdfa(g, cfg, p, b_o, b_f, trace),
        FusionKind::ChannelAttention => channel_attention(g, cfg, p, b_o, b_f),
        FusionKind::ConcatConv1d => {
            let cat = g.concat(&[b_o, b_f], 0)?;
            conv(g, p, "fuse.conv", cat, 1, 0)
        }
        FusionKind::ConcatConv2d => {
            let cat = g.concat(&[b_o, b_f], 0)?;
            conv(g, p, "fuse.conv", cat, 1, 1)
        }
    }
}

fn fdfa<T: Float>(
    g: &mut Graph<T>,
    cfg: &DapConfig,
    p: &Bound,
    b_o: Var,
    b_f: Var,
    mut trace: Option<&mut FdfaTrace<T>>,
) -> Result<Var> {
    let (d, h, w) = (cfg.width, g.shape(b_o)[1], g.shape(b_o)[2]);
    let (heads, k) = (cfg.heads, cfg.points);
    let dh = d / heads;
    let hw = h * w;

    let q = g.reshape(b_o, &[d, hw])?;
    let offsets = g.matmul(p.var("fuse.offset.w")?, q)?;
    let offsets = g.add_bias(offsets, p.var("fuse.offset.b")?, 0)?;
    let logits = g.matmul(p.var("fuse.attn.w")?, q)?;
    let logits = g.add_bias(logits, p.var("fuse.attn.b")?, 0)?;

    let wv = p.var("fuse.value.w")?;
    let fo = g.reshape(b_f, &[d, hw])?;
    let vo = g.matmul(wv, q)?;
    let vf = g.matmul(wv, fo)?;
    let vo = g.reshape(vo, &[d, h, w])?;
    let vf = g.reshape(vf, &[d, h, w])?;
    let reference = g.constant(reference_points(h, w, k));

    let mut head_out = Vec::with_capacity(heads);
    for hd in 0..heads {
        let off = g.narrow(offsets, 0, hd * k * 2, k * 2)?;
        let off = g.transpose(off)?;
        let off = g.reshape(off, &[hw * k, 2])?;
        // one coordinate list serves both maps
        let points = g.add(reference, off)?;

        let vo_h = g.narrow(vo, 0, hd * dh, dh)?;
        let vf_h = g.narrow(vf, 0, hd * dh, dh)?;
        let so = g.bilinear_sample(vo_h, points)?;
        let sf = g.bilinear_sample(vf_h, points)?;
        if let Some(t) = trace.as_deref_mut() {
            t.points_o.push(g.value(points).clone());
            t.points_f.push(g.value(points).clone());
        }
        let so = g.transpose(so)?;
        let so = g.reshape(so, &[hw, k, dh])?;
        let sf = g.transpose(sf)?;
        let sf = g.reshape(sf, &[hw, k, dh])?;
        let samples = g.concat(&[so, sf], 1)?;

        let lg = g.narrow(logits, 0, hd * 2 * k, 2 * k)?;
        let lg = g.transpose(lg)?;
        let attn = g.softmax(lg, 1)?;
        if let Some(t) = trace.as_deref_mut() {
            t.attention.push(g.value(attn).clone());
        }
        let attn = g.reshape(attn, &[hw, 1, 2 * k])?;
        let mixed = g.bmm(attn, samples)?;
        head_out.push(g.reshape(mixed, &[hw, dh])?);
    }
    let heads_cat = g.concat(&head_out, 1)?;
    let heads_cat = g.transpose(heads_cat)?;
    let out = g.matmul(p.var("fuse.out.w")?, heads_cat)?;
    let out = g.reshape(out, &[d, h, w])?;
    Ok(g.add(b_o, out)?)
}

fn channel_attention<T: Float>(g: &mut Graph<T>, cfg: &DapConfig, p: &Bound, b_o: Var, b_f: Var) -> Result<Var> {
    let (d, h, w) = (cfg.width, g.shape(b_o)[1], g.shape(b_o)[2]);
    let hw = h * w;
    let query = p.var("fuse.query")?;
    let scale = T::from_f64_lossy(1.0 / (d as f64).sqrt());
    let mut scores = Vec::with_capacity(2);
    let mut tokens = Vec::with_capacity(2);
    for b in [b_o, b_f] {
        let qk = g.mul(query, b)?;
        let s = g.sum_axis(qk, 0)?;
        let s = g.reshape(s, &[1, hw])?;
        scores.push(g.scale(s, scale)?);
        let flat = g.reshape(b, &[d, hw])?;
        let flat = g.transpose(flat)?;
        tokens.push(g.reshape(flat, &[hw, d, 1])?);
    }
    let scores = g.concat(&scores, 0)?;
    let attn = g.softmax(scores, 0)?;
    let attn = g.transpose(attn)?;
    let attn = g.reshape(attn, &[hw, 2, 1])?;
    let values = g.concat(&tokens, 2)?;
    let mixed = g.bmm(values, attn)?;
    let mixed = g.reshape(mixed, &[hw, d])?;
    let mixed = g.transpose(mixed)?;
    let mixed = g.reshape(mixed, &[d, h, w])?;
    conv(g, p, "fuse.proj", mixed, 1, 0)
}

/// Per-point FDFA evaluated directly from parameter and feature tensors:
/// the fused feature `B_hat` at cell `(row, col)`.
pub fn fdfa_at<T: Float>(
    cfg: &DapConfig,
    params: &super::ParamSet<T>,
    b_o: &Tensor<T>,
    b_f: &Tensor<T>,
    row: usize,
    col: usize,
) -> Result<Vec<T>> {
    let get = |n: &str| params.get(n).ok_or_else(|| NetError::MissingParam(n.to_string()));
    let (d, heads, k) = (cfg.width, cfg.heads, cfg.points);
    let dh = d / heads;
    let query: Vec<T> = (0..d).map(|c| b_o.get(&[c, row, col])).collect();
    let linear = |m: &Tensor<T>, bias: Option<&Tensor<T>>, x: &[T]| -> Vec<T> {
        let (rows, cols) = (m.shape()[0], m.shape()[1]);
        (0..rows)
            .map(|r| {
                let mut acc = bias.map_or(T::zero(), |b| b.data()[r]);
                for c in 0..cols {
                    acc += m.data()[r * cols + c] * x[c];
                }
                acc
            })
            .collect()
    };
    let offsets = linear(get("fuse.offset.w")?, Some(get("fuse.offset.b")?), &query);
    let logits = linear(get("fuse.attn.w")?, Some(get("fuse.attn.b")?), &query);
    let wv = get("fuse.value.w")?;

    let mut fused = vec![T::zero(); d];
    for hd in 0..heads {
        let pts: Vec<(T, T)> = (0..k)
            .map(|kk| {
                let o = (hd * k + kk) * 2;
                (
                    T::from_usize(row).unwrap() + offsets[o],
                    T::from_usize(col).unwrap() + offsets[o + 1],
                )
            })
            .collect();
        let lg = &logits[hd * 2 * k..(hd + 1) * 2 * k];
        let m = lg.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = lg.iter().map(|v| (*v - m).exp()).collect();
        let z: T = e.iter().copied().sum();
        // sample raw maps, then project: sampling is linear so the order is free
        let so = bilinear_sample(b_o, &pts)?;
        let sf = bilinear_sample(b_f, &pts)?;
        for (kk, _) in pts.iter().enumerate() {
            let (a, a2) = (e[kk] / z, e[k + kk] / z);
            let xo: Vec<T> = (0..d).map(|c| so.data()[c * k + kk]).collect();
            let xf: Vec<T> = (0..d).map(|c| sf.data()[c * k + kk]).collect();
            let po = linear(wv, None, &xo);
            let pf = linear(wv, None, &xf);
            for c in 0..dh {
                let ch = hd * dh + c;
                fused[ch] += a * po[ch] + a2 * pf[ch];
            }
        }
    }
    let out = linear(get("fuse.out.w")?, None, &fused);
    Ok((0..d).map(|c| b_o.get(&[c, row, col]) + out[c]).collect())
}
