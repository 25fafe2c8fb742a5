use super::kernels::{self, split_axis, ConvGeom};
use super::{gemm, Float, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`]. Only meaningful for the graph
/// that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias { x: Var, bias: Var, axis: usize },
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Matmul(Var, Var),
    Bmm(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Softmax { x: Var, axis: usize },
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cols: Vec<T> },
    Bilinear { feature: Var, points: Var },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, xhat: Vec<T>, rstd: Vec<T> },
    UpsampleNearest(Var),
    UpsampleBilinear(Var),
    AvgPool(Var),
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    Gather { x: Var, index: Vec<usize> },
    Focal { pred: Var, target: Vec<T>, alpha: T, beta: T, norm: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of executed operations. Nodes only reference earlier nodes, so the
/// insertion order is a topological order and the backward sweep is a single
/// reverse pass.
pub struct Graph<T: Float = f32> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Tensor<T>>>,
    verify: bool,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() {
        return Err(TensorError::shape(op, format!("rank mismatch {a:?} vs {b:?}")));
    }
    for (axis, (&x, &y)) in a.iter().zip(b).enumerate() {
        if x != y {
            return Err(TensorError::Dim {
                op,
                axis,
                expected: x,
                got: y,
            });
        }
    }
    Ok(())
}

fn add_into<T: Float>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            verify: false,
        }
    }

    /// Graph that rejects any operation producing NaN or infinity.
    pub fn with_verification() -> Self {
        Graph {
            verify: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, rg: bool) -> Result<Var> {
        if self.verify {
            if let Some(index) = value.data().iter().position(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite { op: op_name, index });
            }
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad: rg,
        });
        self.leaf_grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.node(*v).requires_grad)
    }

    /// Differentiable leaf (a parameter or an input we want gradients for).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push("param", value, Op::Leaf, true)
            .expect("leaf values are validated by the caller")
    }

    /// Leaf without gradient tracking.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push("constant", value, Op::Leaf, false)
            .expect("leaf values are validated by the caller")
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf_grads[v.0].as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.leaf_grads[v.0].take()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    // ---- elementwise -------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        same_shape(name, self.shape(a), self.shape(b))?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(name, value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let va = self.value(a);
        let value = Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect())?;
        let rg = self.rg(&[a]);
        self.push(name, value, op, rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        self.unary("scale", a, |x| x * s, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, |x| T::one() / (T::one() + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, |x| x.abs(), Op::Abs(a))
    }

    /// Adds a 1-D `bias` broadcast along `axis` of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(bias);
        if axis >= xs.len() || bs.len() != 1 || bs[0] != xs[axis] {
            return Err(TensorError::shape(
                "add_bias",
                format!("bias {bs:?} does not match axis {axis} of {xs:?}"),
            ));
        }
        let (outer, n, inner) = split_axis(&xs, axis);
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for o in 0..outer {
            for k in 0..n {
                let s = (o * n + k) * inner;
                data[s..s + inner].iter_mut().for_each(|v| *v += b[k]);
            }
        }
        let rg = self.rg(&[x, bias]);
        self.push("add_bias", Tensor::new(xs, data)?, Op::AddBias { x, bias, axis }, rg)
    }

    // ---- linear algebra ----------------------------------------------

    /// `[M, K] × [K, N] → [M, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = match (self.shape(a), self.shape(b)) {
            (&[m, k], &[k2, n]) => {
                if k != k2 {
                    return Err(TensorError::Dim {
                        op: "matmul",
                        axis: 0,
                        expected: k,
                        got: k2,
                    });
                }
                (m, k, n)
            }
            (sa, sb) => {
                return Err(TensorError::shape("matmul", format!("expected 2-D operands, got {sa:?} and {sb:?}")))
            }
        };
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, (self.value(a).data(), k, 1), (self.value(b).data(), n, 1), T::zero(), &mut out);
        let rg = self.rg(&[a, b]);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::Matmul(a, b), rg)
    }

    /// Batched `[B, M, K] × [B, K, N] → [B, M, N]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (bt, m, k, n) = match (self.shape(a), self.shape(b)) {
            (&[b1, m, k], &[b2, k2, n]) if b1 == b2 && k == k2 => (b1, m, k, n),
            (sa, sb) => {
                return Err(TensorError::shape("bmm", format!("incompatible operands {sa:?} and {sb:?}")))
            }
        };
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let mut out = vec![T::zero(); bt * m * n];
        for i in 0..bt {
            gemm(
                m,
                k,
                n,
                (&va[i * m * k..(i + 1) * m * k], k, 1),
                (&vb[i * k * n..(i + 1) * k * n], n, 1),
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let rg = self.rg(&[a, b]);
        self.push("bmm", Tensor::new(vec![bt, m, n], out)?, Op::Bmm(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = match self.shape(a) {
            &[r, c] => (r, c),
            s => return Err(TensorError::shape("transpose", format!("expected 2-D, got {s:?}"))),
        };
        let v = self.value(a).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        self.push("transpose", Tensor::new(vec![c, r], out)?, Op::Transpose(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = Tensor::new(shape.to_vec(), self.value(a).data().to_vec())?;
        let rg = self.rg(&[a]);
        self.push("reshape", value, Op::Reshape(a), rg)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| TensorError::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::shape("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != base.len() {
                return Err(TensorError::shape("concat", format!("rank mismatch {base:?} vs {s:?}")));
            }
            for (ax, (&x, &y)) in base.iter().zip(s).enumerate() {
                if ax != axis && x != y {
                    return Err(TensorError::Dim {
                        op: "concat",
                        axis: ax,
                        expected: x,
                        got: y,
                    });
                }
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let n = self.shape(*v)[axis];
                let d = self.value(*v).data();
                out.extend_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(inputs);
        self.push(
            "concat",
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        )
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(TensorError::shape(
                "narrow",
                format!("range {start}..{} invalid on axis {axis} of {s:?}", start + len),
            ));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let b = (o * n + start) * inner;
            out.extend_from_slice(&d[b..b + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(&[x]);
        self.push("narrow", Tensor::new(shape, out)?, Op::Narrow { x, axis, start }, rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(TensorError::shape("softmax", format!("axis {axis} out of range for {s:?}")));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let y = kernels::softmax_forward(self.value(x).data(), outer, n, inner);
        let rg = self.rg(&[x]);
        self.push("softmax", Tensor::new(s, y)?, Op::Softmax { x, axis }, rg)
    }

    // ---- convolution and resampling ------------------------------------

    /// 2-D convolution of `[C_in, H, W]` with `[C_out, C_in, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (ci, h, wd) = match self.shape(x) {
            &[c, h, w] => (c, h, w),
            s => return Err(TensorError::shape("conv2d", format!("expected [C,H,W] input, got {s:?}"))),
        };
        let (co, kh, kw) = match self.shape(w) {
            &[co, c2, kh, kw] => {
                if c2 != ci {
                    return Err(TensorError::Dim {
                        op: "conv2d",
                        axis: 1,
                        expected: ci,
                        got: c2,
                    });
                }
                (co, kh, kw)
            }
            s => return Err(TensorError::shape("conv2d", format!("expected 4-D weight, got {s:?}"))),
        };
        let geom = ConvGeom::new("conv2d", ci, co, [1, h, wd], [1, kh, kw], [1, stride, stride], [0, pad, pad])?;
        self.conv_common("conv2d", x, w, b, geom, vec![co, geom.output[1], geom.output[2]])
    }

    /// 3-D convolution of `[C_in, T, H, W]` with `[C_out, C_in, kt, kh, kw]`.
    /// `stride` and `pad` are per axis `(t, h, w)`.
    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Var> {
        let (ci, t, h, wd) = match self.shape(x) {
            &[c, t, h, w] => (c, t, h, w),
            s => return Err(TensorError::shape("conv3d", format!("expected [C,T,H,W] input, got {s:?}"))),
        };
        let (co, kernel) = match self.shape(w) {
            &[co, c2, kt, kh, kw] => {
                if c2 != ci {
                    return Err(TensorError::Dim {
                        op: "conv3d",
                        axis: 1,
                        expected: ci,
                        got: c2,
                    });
                }
                (co, [kt, kh, kw])
            }
            s => return Err(TensorError::shape("conv3d", format!("expected 5-D weight, got {s:?}"))),
        };
        let geom = ConvGeom::new("conv3d", ci, co, [t, h, wd], kernel, stride, pad)?;
        let [ot, oh, ow] = geom.output;
        self.conv_common("conv3d", x, w, b, geom, vec![co, ot, oh, ow])
    }

    fn conv_common(
        &mut self,
        name: &'static str,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        out_shape: Vec<usize>,
    ) -> Result<Var> {
        if let Some(b) = b {
            if self.shape(b) != [geom.c_out] {
                return Err(TensorError::shape(name, format!("bias shape {:?} != [{}]", self.shape(b), geom.c_out)));
            }
        }
        let (out, cols) = kernels::conv_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        // cols are only needed for the weight gradient
        let cols = if self.node(w).requires_grad { cols } else { Vec::new() };
        self.push(name, Tensor::new(out_shape, out)?, Op::Conv { x, w, b, geom, cols }, rg)
    }

    /// Bilinear sampling of `feature: [C, H, W]` at `points: [P, 2]` holding
    /// continuous `(row, col)` coordinates. Returns `[C, P]`; neighbours
    /// outside the grid read zero. Differentiable w.r.t. both inputs.
    pub fn bilinear_sample(&mut self, feature: Var, points: Var) -> Result<Var> {
        let (c, h, w) = match self.shape(feature) {
            &[c, h, w] => (c, h, w),
            s => return Err(TensorError::shape("bilinear_sample", format!("expected [C,H,W], got {s:?}"))),
        };
        let p = match self.shape(points) {
            &[p, 2] => p,
            s => return Err(TensorError::shape("bilinear_sample", format!("points must be [P,2], got {s:?}"))),
        };
        let out = kernels::bilinear_forward(c, h, w, self.value(feature).data(), self.value(points).data());
        let rg = self.rg(&[feature, points]);
        self.push("bilinear_sample", Tensor::new(vec![c, p], out)?, Op::Bilinear { feature, points }, rg)
    }

    /// Group normalisation of `[C, ...]` with per-channel affine `gamma`, `beta`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || groups == 0 || s[0] % groups != 0 {
            return Err(TensorError::shape("group_norm", format!("{groups} groups incompatible with {s:?}")));
        }
        let c = s[0];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(TensorError::shape("group_norm", "affine parameters must be [C]"));
        }
        let sp: usize = s[1..].iter().product();
        let (y, xhat, rstd) = kernels::group_norm_forward(
            self.value(x).data(),
            c,
            sp,
            groups,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            "group_norm",
            Tensor::new(s, y)?,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            rg,
        )
    }

    fn chw(&self, name: &'static str, x: Var) -> Result<(usize, usize, usize)> {
        match self.shape(x) {
            &[c, h, w] => Ok((c, h, w)),
            s => Err(TensorError::shape(name, format!("expected [C,H,W], got {s:?}"))),
        }
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.chw("upsample_nearest2x", x)?;
        let v = self.value(x).data();
        let (oh, ow) = (2 * h, 2 * w);
        let out = (0..c * oh * ow)
            .map(|i| {
                let ch = i / (oh * ow);
                let r = (i / ow) % oh;
                let col = i % ow;
                v[(ch * h + r / 2) * w + col / 2]
            })
            .collect();
        let rg = self.rg(&[x]);
        self.push("upsample_nearest2x", Tensor::new(vec![c, oh, ow], out)?, Op::UpsampleNearest(x), rg)
    }

    pub fn upsample_bilinear2x(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.chw("upsample_bilinear2x", x)?;
        let out = kernels::upsample_bilinear_forward(self.value(x).data(), c, h, w);
        let rg = self.rg(&[x]);
        self.push(
            "upsample_bilinear2x",
            Tensor::new(vec![c, 2 * h, 2 * w], out)?,
            Op::UpsampleBilinear(x),
            rg,
        )
    }

    /// 2×2 average pooling; spatial sizes must be even.
    pub fn avg_pool2x(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.chw("avg_pool2x", x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::shape("avg_pool2x", format!("spatial size {h}x{w} is not even")));
        }
        let v = self.value(x).data();
        let (oh, ow) = (h / 2, w / 2);
        let q = T::from_f64_lossy(0.25);
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            for r in 0..oh {
                for col in 0..ow {
                    let b = (ch * h + 2 * r) * w + 2 * col;
                    out[(ch * oh + r) * ow + col] = (v[b] + v[b + 1] + v[b + w] + v[b + w + 1]) * q;
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push("avg_pool2x", Tensor::new(vec![c, oh, ow], out)?, Op::AvgPool(x), rg)
    }

    // ---- reductions and indexing ---------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let m = v.sum() / T::from_usize(v.numel()).unwrap();
        let rg = self.rg(&[x]);
        self.push("mean", Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Sum over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(TensorError::shape("sum_axis", format!("axis {axis} out of range for {s:?}")));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let d = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let b = (o * n + k) * inner;
                add_into(&mut out[o * inner..(o + 1) * inner], &d[b..b + inner]);
            }
        }
        let mut shape = s;
        shape.remove(axis);
        let rg = self.rg(&[x]);
        self.push("sum_axis", Tensor::new(shape, out)?, Op::SumAxis { x, axis }, rg)
    }

    /// Selects columns of a `[C, N]` matrix: result `[C, index.len()]`.
    pub fn gather_columns(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (c, n) = match self.shape(x) {
            &[c, n] => (c, n),
            s => return Err(TensorError::shape("gather_columns", format!("expected 2-D, got {s:?}"))),
        };
        if index.is_empty() || index.iter().any(|&i| i >= n) {
            return Err(TensorError::shape("gather_columns", format!("invalid column index for width {n}")));
        }
        let d = self.value(x).data();
        let m = index.len();
        let mut out = vec![T::zero(); c * m];
        for ch in 0..c {
            for (j, &i) in index.iter().enumerate() {
                out[ch * m + j] = d[ch * n + i];
            }
        }
        let rg = self.rg(&[x]);
        self.push(
            "gather_columns",
            Tensor::new(vec![c, m], out)?,
            Op::Gather {
                x,
                index: index.to_vec(),
            },
            rg,
        )
    }

    /// Penalty-reduced focal loss on probabilities `pred` against a Gaussian
    /// `target` heatmap of the same shape. Cells with `target == 1` are
    /// positives; the sum is divided by `max(1, #positives)`. Probabilities
    /// are clamped to `[1e-6, 1 - 1e-6]` before taking logarithms.
    pub fn focal_loss(&mut self, pred: Var, target: &Tensor<T>, alpha: T, beta: T) -> Result<Var> {
        same_shape("focal_loss", self.shape(pred), target.shape())?;
        let p = self.value(pred).data();
        if let Some(i) = p.iter().position(|v| !(*v >= T::zero() && *v <= T::one())) {
            return Err(TensorError::Contract {
                op: "focal_loss",
                msg: format!("prediction {} at index {i} is not a probability", p[i]),
            });
        }
        let eps = T::from_f64_lossy(1e-6);
        let one = T::one();
        let mut total = T::zero();
        let mut positives = 0usize;
        for (&pv, &y) in p.iter().zip(target.data()) {
            let pc = pv.max(eps).min(one - eps);
            if y == one {
                positives += 1;
                total += -(one - pc).powf(alpha) * pc.ln();
            } else {
                total += -(one - y).powf(beta) * pc.powf(alpha) * (one - pc).ln();
            }
        }
        let norm = T::from_usize(positives.max(1)).unwrap();
        let rg = self.rg(&[pred]);
        self.push(
            "focal_loss",
            Tensor::scalar(total / norm),
            Op::Focal {
                pred,
                target: target.data().to_vec(),
                alpha,
                beta,
                norm,
            },
            rg,
        )
    }

    // ---- backward -----------------------------------------------------

    /// Reverse sweep from a scalar `root`. Gradients of differentiable leaves
    /// are added to whatever earlier calls accumulated (see [`Graph::zero_grad`]).
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rs = self.shape(root);
        if !rs.is_empty() && rs.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarRoot(rs.to_vec()));
        }
        if !self.node(root).requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                if node.requires_grad {
                    match &mut self.leaf_grads[i] {
                        Some(acc) => add_into(acc.data_mut(), &g),
                        slot @ None => {
                            *slot = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                        }
                    }
                }
                continue;
            }
            for (input, dg) in self.input_grads(i, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => add_into(acc, &dg),
                    slot @ None => *slot = Some(dg),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of node `i` for each differentiable input.
    fn input_grads(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let mut out = Vec::new();
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.iter().map(|v| -*v).collect()));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    out.push((*a, g.iter().zip(val(*b)).map(|(g, y)| *g * *y).collect()));
                }
                if self.wants(*b) {
                    out.push((*b, g.iter().zip(val(*a)).map(|(g, x)| *g * *x).collect()));
                }
            }
            Op::Scale(a, s) => out.push((*a, g.iter().map(|v| *v * *s).collect())),
            Op::AddBias { x, bias, axis } => {
                out.push((*x, g.to_vec()));
                if self.wants(*bias) {
                    let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                    let mut db = vec![T::zero(); n];
                    for o in 0..outer {
                        for (k, dbk) in db.iter_mut().enumerate() {
                            let s = (o * n + k) * inner;
                            *dbk += g[s..s + inner].iter().copied().sum::<T>();
                        }
                    }
                    out.push((*bias, db));
                }
            }
            Op::Relu(a) => out.push((
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(g, x)| if *x > T::zero() { *g } else { T::zero() })
                    .collect(),
            )),
            Op::Sigmoid(a) => out.push((*a, g.iter().zip(y).map(|(g, s)| *g * *s * (T::one() - *s)).collect())),
            Op::Abs(a) => out.push((
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(g, x)| {
                        if *x > T::zero() {
                            *g
                        } else if *x < T::zero() {
                            -*g
                        } else {
                            T::zero()
                        }
                    })
                    .collect(),
            )),
            Op::Matmul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(m, n, k, (g, n, 1), (val(*b), 1, n), T::zero(), &mut da);
                    out.push((*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(k, m, n, (val(*a), 1, k), (g, n, 1), T::zero(), &mut db);
                    out.push((*b, db));
                }
            }
            Op::Bmm(a, b) => {
                let sa = self.shape(*a);
                let (bt, m, k) = (sa[0], sa[1], sa[2]);
                let n = self.shape(*b)[2];
                let (va, vb) = (val(*a), val(*b));
                if self.wants(*a) {
                    let mut da = vec![T::zero(); bt * m * k];
                    for i in 0..bt {
                        gemm(
                            m,
                            n,
                            k,
                            (&g[i * m * n..(i + 1) * m * n], n, 1),
                            (&vb[i * k * n..(i + 1) * k * n], 1, n),
                            T::zero(),
                            &mut da[i * m * k..(i + 1) * m * k],
                        );
                    }
                    out.push((*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); bt * k * n];
                    for i in 0..bt {
                        gemm(
                            k,
                            m,
                            n,
                            (&va[i * m * k..(i + 1) * m * k], 1, k),
                            (&g[i * m * n..(i + 1) * m * n], n, 1),
                            T::zero(),
                            &mut db[i * k * n..(i + 1) * k * n],
                        );
                    }
                    out.push((*b, db));
                }
            }
            Op::Transpose(a) => {
                // y is [c, r]; the gradient goes back to [r, c]
                let (c, r) = (node.value.shape()[0], node.value.shape()[1]);
                let mut da = vec![T::zero(); r * c];
                for j in 0..c {
                    for i in 0..r {
                        da[i * c + j] = g[j * r + i];
                    }
                }
                out.push((*a, da));
            }
            Op::Reshape(a) => out.push((*a, g.to_vec())),
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for v in inputs {
                    let n = self.shape(*v)[*axis];
                    if self.wants(*v) {
                        let mut d = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let b = (o * total + offset) * inner;
                            d.extend_from_slice(&g[b..b + n * inner]);
                        }
                        out.push((*v, d));
                    }
                    offset += n;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                let mut d = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    let b = (o * n + start) * inner;
                    d[b..b + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((*x, d));
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                out.push((*x, kernels::softmax_backward(y, g, outer, n, inner)));
            }
            Op::Conv { x, w, b, geom, cols } => {
                if self.wants(*x) {
                    out.push((*x, kernels::conv_backward_input(geom, val(*w), g)));
                }
                if self.wants(*w) {
                    out.push((*w, kernels::conv_backward_weight(geom, cols, g)));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let n = geom.out_positions();
                        out.push((*b, g.chunks(n).map(|row| row.iter().copied().sum()).collect()));
                    }
                }
            }
            Op::Bilinear { feature, points } => {
                let s = self.shape(*feature);
                let (c, h, w) = (s[0], s[1], s[2]);
                let mut df = self.wants(*feature).then(|| vec![T::zero(); c * h * w]);
                let mut dp = self.wants(*points).then(|| vec![T::zero(); val(*points).len()]);
                kernels::bilinear_backward(
                    c,
                    h,
                    w,
                    val(*feature),
                    val(*points),
                    g,
                    df.as_deref_mut(),
                    dp.as_deref_mut(),
                );
                if let Some(df) = df {
                    out.push((*feature, df));
                }
                if let Some(dp) = dp {
                    out.push((*points, dp));
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let s = self.shape(*x);
                let c = s[0];
                let sp: usize = s[1..].iter().product();
                let (dx, dgamma, dbeta) =
                    kernels::group_norm_backward(g, xhat, rstd, c, sp, *groups, val(*gamma));
                out.push((*x, dx));
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::UpsampleNearest(x) => {
                let s = self.shape(*x);
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (2 * h, 2 * w);
                let mut d = vec![T::zero(); c * h * w];
                for (i, gv) in g.iter().enumerate() {
                    let ch = i / (oh * ow);
                    let r = (i / ow) % oh;
                    let col = i % ow;
                    d[(ch * h + r / 2) * w + col / 2] += *gv;
                }
                out.push((*x, d));
            }
            Op::UpsampleBilinear(x) => {
                let s = self.shape(*x);
                out.push((*x, kernels::upsample_bilinear_backward(g, s[0], s[1], s[2])));
            }
            Op::AvgPool(x) => {
                let s = self.shape(*x);
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (h / 2, w / 2);
                let q = T::from_f64_lossy(0.25);
                let mut d = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for r in 0..oh {
                        for col in 0..ow {
                            let gv = g[(ch * oh + r) * ow + col] * q;
                            let b = (ch * h + 2 * r) * w + 2 * col;
                            d[b] += gv;
                            d[b + 1] += gv;
                            d[b + w] += gv;
                            d[b + w + 1] += gv;
                        }
                    }
                }
                out.push((*x, d));
            }
            Op::Sum(x) => out.push((*x, vec![g[0]; self.value(*x).numel()])),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                out.push((*x, vec![g[0] / T::from_usize(n).unwrap(); n]));
            }
            Op::SumAxis { x, axis } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let mut d = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    for k in 0..n {
                        let b = (o * n + k) * inner;
                        d[b..b + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                out.push((*x, d));
            }
            Op::Gather { x, index } => {
                let (c, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                let m = index.len();
                let mut d = vec![T::zero(); c * n];
                for ch in 0..c {
                    for (j, &i) in index.iter().enumerate() {
                        d[ch * n + i] += g[ch * m + j];
                    }
                }
                out.push((*x, d));
            }
            Op::Focal {
                pred,
                target,
                alpha,
                beta,
                norm,
            } => {
                let eps = T::from_f64_lossy(1e-6);
                let one = T::one();
                let scale = g[0] / *norm;
                let d = val(*pred)
                    .iter()
                    .zip(target)
                    .map(|(&p, &y)| {
                        if p < eps || p > one - eps {
                            return T::zero();
                        }
                        let a = *alpha;
                        let dl = if y == one {
                            // d/dp [-(1-p)^a ln p]
                            a * (one - p).powf(a - one) * p.ln() - (one - p).powf(a) / p
                        } else {
                            // d/dp [-(1-y)^b p^a ln(1-p)]
                            -(one - y).powf(*beta)
                                * (a * p.powf(a - one) * (one - p).ln() - p.powf(a) / (one - p))
                        };
                        dl * scale
                    })
                    .collect();
                out.push((*pred, d));
            }
        }
        out
    }
}
