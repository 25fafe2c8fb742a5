//! Forward/backward kernels on flat buffers. The graph layer handles shapes
//! and bookkeeping; everything here assumes validated dimensions.

use super::{gemm, Float, Result, Tensor, TensorError};

/// Geometry of a 3D convolution. A 2D convolution is the `t = kt = 1` case.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn new(
        op: &'static str,
        c_in: usize,
        c_out: usize,
        input: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Self> {
        let mut output = [0; 3];
        for axis in 0..3 {
            if stride[axis] == 0 {
                return Err(TensorError::Contract {
                    op,
                    msg: "stride must be at least 1".into(),
                });
            }
            let padded = input[axis] + 2 * pad[axis];
            if kernel[axis] == 0 || kernel[axis] > padded {
                return Err(TensorError::Dim {
                    op,
                    axis,
                    expected: padded,
                    got: kernel[axis],
                });
            }
            output[axis] = (padded - kernel[axis]) / stride[axis] + 1;
        }
        Ok(ConvGeom {
            c_in,
            c_out,
            input,
            kernel,
            stride,
            pad,
            output,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.kernel.iter().product::<usize>()
    }

    pub fn out_positions(&self) -> usize {
        self.output.iter().product()
    }

    pub fn in_positions(&self) -> usize {
        self.input.iter().product()
    }
}

/// Output indices `o` along one axis for which `o*stride + k - pad` lands in `[0, n)`.
fn valid_range(n: usize, out: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // smallest o with o*stride + k >= pad
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // largest o with o*stride + k - pad <= n - 1
    let hi = if n + pad > k {
        ((n + pad - 1 - k) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(out), hi.max(lo.min(out)))
}

pub(crate) fn im2col<T: Float>(g: &ConvGeom, x: &[T]) -> Vec<T> {
    let [it, ih, iw] = g.input;
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.pad;
    let [ot, oh, ow] = g.output;
    let npos = g.out_positions();
    let mut cols = vec![T::zero(); g.patch_len() * npos];
    let mut row = 0;
    for c in 0..g.c_in {
        for a in 0..kt {
            let (t_lo, t_hi) = valid_range(it, ot, a, st, pt);
            for b in 0..kh {
                let (h_lo, h_hi) = valid_range(ih, oh, b, sh, ph);
                for d in 0..kw {
                    let (w_lo, w_hi) = valid_range(iw, ow, d, sw, pw);
                    let dst_row = &mut cols[row * npos..(row + 1) * npos];
                    for to in t_lo..t_hi {
                        let ti = to * st + a - pt;
                        for ho in h_lo..h_hi {
                            let hi_ = ho * sh + b - ph;
                            let src_base = ((c * it + ti) * ih + hi_) * iw;
                            let dst_base = (to * oh + ho) * ow;
                            if sw == 1 {
                                let s0 = src_base + w_lo + d - pw;
                                let len = w_hi - w_lo;
                                dst_row[dst_base + w_lo..dst_base + w_hi]
                                    .copy_from_slice(&x[s0..s0 + len]);
                            } else {
                                for wo in w_lo..w_hi {
                                    dst_row[dst_base + wo] = x[src_base + wo * sw + d - pw];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im<T: Float>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let [it, ih, iw] = g.input;
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.pad;
    let [ot, oh, ow] = g.output;
    let npos = g.out_positions();
    let mut row = 0;
    for c in 0..g.c_in {
        for a in 0..kt {
            let (t_lo, t_hi) = valid_range(it, ot, a, st, pt);
            for b in 0..kh {
                let (h_lo, h_hi) = valid_range(ih, oh, b, sh, ph);
                for d in 0..kw {
                    let (w_lo, w_hi) = valid_range(iw, ow, d, sw, pw);
                    let src_row = &cols[row * npos..(row + 1) * npos];
                    for to in t_lo..t_hi {
                        let ti = to * st + a - pt;
                        for ho in h_lo..h_hi {
                            let hi_ = ho * sh + b - ph;
                            let dst_base = ((c * it + ti) * ih + hi_) * iw;
                            let src_base = (to * oh + ho) * ow;
                            if sw == 1 {
                                let d0 = dst_base + w_lo + d - pw;
                                let len = w_hi - w_lo;
                                let src = &src_row[src_base + w_lo..src_base + w_hi];
                                for (o, v) in dx[d0..d0 + len].iter_mut().zip(src) {
                                    *o += *v;
                                }
                            } else {
                                for wo in w_lo..w_hi {
                                    dx[dst_base + wo * sw + d - pw] += src_row[src_base + wo];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Returns `(output, cols)`; `cols` is kept for the weight gradient.
pub(crate) fn conv_forward<T: Float>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
) -> (Vec<T>, Vec<T>) {
    let cols = im2col(g, x);
    let k = g.patch_len();
    let n = g.out_positions();
    let mut out = vec![T::zero(); g.c_out * n];
    gemm(g.c_out, k, n, (w, k, 1), (&cols, n, 1), T::zero(), &mut out);
    if let Some(b) = bias {
        for (o, row) in out.chunks_mut(n).enumerate() {
            let bo = b[o];
            row.iter_mut().for_each(|v| *v += bo);
        }
    }
    (out, cols)
}

pub(crate) fn conv_backward_input<T: Float>(g: &ConvGeom, w: &[T], dy: &[T]) -> Vec<T> {
    let k = g.patch_len();
    let n = g.out_positions();
    let mut dcols = vec![T::zero(); k * n];
    // dcols = w^T · dy
    gemm(k, g.c_out, n, (w, 1, k), (dy, n, 1), T::zero(), &mut dcols);
    let mut dx = vec![T::zero(); g.c_in * g.in_positions()];
    col2im(g, &dcols, &mut dx);
    dx
}

pub(crate) fn conv_backward_weight<T: Float>(g: &ConvGeom, cols: &[T], dy: &[T]) -> Vec<T> {
    let k = g.patch_len();
    let n = g.out_positions();
    let mut dw = vec![T::zero(); g.c_out * k];
    // dw = dy · cols^T
    gemm(g.c_out, n, k, (dy, n, 1), (cols, 1, n), T::zero(), &mut dw);
    dw
}

/// Bilinear weights of the four neighbours of a continuous `(row, col)`.
/// Neighbours outside the grid are reported as `None` and contribute zero.
#[inline]
fn bilinear_taps<T: Float>(h: usize, w: usize, r: T, c: T) -> [(Option<usize>, T); 4] {
    let r0 = r.floor();
    let c0 = c.floor();
    let fr = r - r0;
    let fc = c - c0;
    let one = T::one();
    let ri = r0.to_i64().unwrap_or(i64::MIN / 2);
    let ci = c0.to_i64().unwrap_or(i64::MIN / 2);
    let at = |dr: i64, dc: i64| -> Option<usize> {
        let rr = ri.checked_add(dr)?;
        let cc = ci.checked_add(dc)?;
        if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
            Some(rr as usize * w + cc as usize)
        } else {
            None
        }
    };
    [
        (at(0, 0), (one - fr) * (one - fc)),
        (at(0, 1), (one - fr) * fc),
        (at(1, 0), fr * (one - fc)),
        (at(1, 1), fr * fc),
    ]
}

/// Samples `feature: [C, H, W]` at continuous `(row, col)` points given as a
/// flat `[P, 2]` buffer. Returns `[C, P]`. Out-of-grid neighbours read zero.
pub(crate) fn bilinear_forward<T: Float>(
    c: usize,
    h: usize,
    w: usize,
    feature: &[T],
    points: &[T],
) -> Vec<T> {
    let p = points.len() / 2;
    let hw = h * w;
    let mut out = vec![T::zero(); c * p];
    for (i, pt) in points.chunks_exact(2).enumerate() {
        let taps = bilinear_taps(h, w, pt[0], pt[1]);
        for ch in 0..c {
            let plane = &feature[ch * hw..(ch + 1) * hw];
            let mut acc = T::zero();
            for (idx, wt) in taps.iter() {
                if let Some(idx) = idx {
                    acc += *wt * plane[*idx];
                }
            }
            out[ch * p + i] = acc;
        }
    }
    out
}

/// Gradients of [`bilinear_forward`] w.r.t. the feature map and the points.
pub(crate) fn bilinear_backward<T: Float>(
    c: usize,
    h: usize,
    w: usize,
    feature: &[T],
    points: &[T],
    dy: &[T],
    dfeature: Option<&mut [T]>,
    dpoints: Option<&mut [T]>,
) {
    let p = points.len() / 2;
    let hw = h * w;
    if let Some(df) = dfeature {
        for (i, pt) in points.chunks_exact(2).enumerate() {
            let taps = bilinear_taps(h, w, pt[0], pt[1]);
            for ch in 0..c {
                let g = dy[ch * p + i];
                for (idx, wt) in taps.iter() {
                    if let Some(idx) = idx {
                        df[ch * hw + idx] += *wt * g;
                    }
                }
            }
        }
    }
    if let Some(dp) = dpoints {
        let one = T::one();
        for (i, pt) in points.chunks_exact(2).enumerate() {
            let fr = pt[0] - pt[0].floor();
            let fc = pt[1] - pt[1].floor();
            let taps = bilinear_taps(h, w, pt[0], pt[1]);
            let mut gr = T::zero();
            let mut gc = T::zero();
            for ch in 0..c {
                let plane = &feature[ch * hw..(ch + 1) * hw];
                let v = |k: usize| taps[k].0.map_or(T::zero(), |idx| plane[idx]);
                let (v00, v01, v10, v11) = (v(0), v(1), v(2), v(3));
                let g = dy[ch * p + i];
                gr += g * ((one - fc) * (v10 - v00) + fc * (v11 - v01));
                gc += g * ((one - fr) * (v01 - v00) + fr * (v11 - v10));
            }
            dp[2 * i] += gr;
            dp[2 * i + 1] += gc;
        }
    }
}

/// Standalone bilinear sampling on plain tensors: `feature [C,H,W]`,
/// `points` as `(row, col)` pairs. Returns `[C, len(points)]`.
pub fn bilinear_sample<T: Float>(feature: &Tensor<T>, points: &[(T, T)]) -> Result<Tensor<T>> {
    let [c, h, w] = match feature.shape() {
        &[c, h, w] => [c, h, w],
        s => {
            return Err(TensorError::shape(
                "bilinear_sample",
                format!("expected [C,H,W] feature, got {s:?}"),
            ))
        }
    };
    if points.is_empty() {
        return Err(TensorError::shape("bilinear_sample", "no sample points"));
    }
    let flat: Vec<T> = points.iter().flat_map(|&(r, c)| [r, c]).collect();
    let out = bilinear_forward(c, h, w, feature.data(), &flat);
    Tensor::new(vec![c, points.len()], out)
}

/// `(outer, axis, inner)` decomposition of a shape around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_forward<T: Float>(x: &[T], outer: usize, n: usize, inner: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut m = T::neg_infinity();
            for k in 0..n {
                m = m.max(x[base + k * inner]);
            }
            let mut s = T::zero();
            for k in 0..n {
                let e = (x[base + k * inner] - m).exp();
                y[base + k * inner] = e;
                s += e;
            }
            for k in 0..n {
                y[base + k * inner] /= s;
            }
        }
    }
    y
}

pub(crate) fn softmax_backward<T: Float>(
    y: &[T],
    dy: &[T],
    outer: usize,
    n: usize,
    inner: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut dot = T::zero();
            for k in 0..n {
                dot += y[base + k * inner] * dy[base + k * inner];
            }
            for k in 0..n {
                let j = base + k * inner;
                dx[j] = y[j] * (dy[j] - dot);
            }
        }
    }
    dx
}

pub(crate) const NORM_EPS: f64 = 1e-5;

/// Group normalisation over `[C, S]` (S = flattened spatial extent).
/// Returns `(y, xhat, rstd_per_group)`.
pub(crate) fn group_norm_forward<T: Float>(
    x: &[T],
    c: usize,
    s: usize,
    groups: usize,
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cpg = c / groups;
    let m = T::from_usize(cpg * s).unwrap();
    let eps = T::from_f64_lossy(NORM_EPS);
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstds = Vec::with_capacity(groups);
    for gi in 0..groups {
        let span = gi * cpg * s..(gi + 1) * cpg * s;
        let xs = &x[span.clone()];
        let mean = xs.iter().copied().sum::<T>() / m;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
        let rstd = T::one() / (var + eps).sqrt();
        rstds.push(rstd);
        for (j, &v) in xs.iter().enumerate() {
            let ch = gi * cpg + j / s;
            let xh = (v - mean) * rstd;
            xhat[span.start + j] = xh;
            y[span.start + j] = xh * gamma[ch] + beta[ch];
        }
    }
    (y, xhat, rstds)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_backward<T: Float>(
    dy: &[T],
    xhat: &[T],
    rstds: &[T],
    c: usize,
    s: usize,
    groups: usize,
    gamma: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cpg = c / groups;
    let m = T::from_usize(cpg * s).unwrap();
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        for j in ch * s..(ch + 1) * s {
            dgamma[ch] += dy[j] * xhat[j];
            dbeta[ch] += dy[j];
        }
    }
    for gi in 0..groups {
        let span = gi * cpg * s..(gi + 1) * cpg * s;
        let mut sum_dxh = T::zero();
        let mut sum_dxh_xh = T::zero();
        for j in span.clone() {
            let dxh = dy[j] * gamma[j / s];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xhat[j];
        }
        let rstd = rstds[gi];
        for j in span {
            let dxh = dy[j] * gamma[j / s];
            dx[j] = rstd / m * (m * dxh - sum_dxh - xhat[j] * sum_dxh_xh);
        }
    }
    (dx, dgamma, dbeta)
}

/// Source taps for 2× bilinear upsampling along one axis (half-pixel centres,
/// edge-clamped): output `o` reads `(1-l)·in[i0] + l·in[i1]`.
fn upsample_taps<T: Float>(n: usize) -> Vec<(usize, usize, T)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let l = src - i0 as f64;
            (i0, i1, T::from_f64_lossy(l))
        })
        .collect()
}

pub(crate) fn upsample_bilinear_forward<T: Float>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let rt = upsample_taps::<T>(h);
    let ct = upsample_taps::<T>(w);
    let (oh, ow) = (2 * h, 2 * w);
    let one = T::one();
    let mut y = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for (oi, &(r0, r1, lr)) in rt.iter().enumerate() {
            for (oj, &(c0, c1, lc)) in ct.iter().enumerate() {
                let top = (one - lc) * plane[r0 * w + c0] + lc * plane[r0 * w + c1];
                let bot = (one - lc) * plane[r1 * w + c0] + lc * plane[r1 * w + c1];
                y[(ch * oh + oi) * ow + oj] = (one - lr) * top + lr * bot;
            }
        }
    }
    y
}

pub(crate) fn upsample_bilinear_backward<T: Float>(
    dy: &[T],
    c: usize,
    h: usize,
    w: usize,
) -> Vec<T> {
    let rt = upsample_taps::<T>(h);
    let ct = upsample_taps::<T>(w);
    let (oh, ow) = (2 * h, 2 * w);
    let one = T::one();
    let mut dx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for (oi, &(r0, r1, lr)) in rt.iter().enumerate() {
            for (oj, &(c0, c1, lc)) in ct.iter().enumerate() {
                let g = dy[(ch * oh + oi) * ow + oj];
                plane[r0 * w + c0] += (one - lr) * (one - lc) * g;
                plane[r0 * w + c1] += (one - lr) * lc * g;
                plane[r1 * w + c0] += lr * (one - lc) * g;
                plane[r1 * w + c1] += lr * lc * g;
            }
        }
    }
    dx
}
