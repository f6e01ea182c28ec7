//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] is created per forward pass. Every operation appends one node
//! whose inputs are strictly older nodes, so walking the tape backwards visits
//! each node after all of its consumers. [`Tape::backward`] consumes the tape.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::{numel, strides, DType, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Relu,
    Sigmoid,
    Exp,
    Ln,
    Softplus,
    Sqrt,
}

/// Which axes share normalization statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// `[B, C, ...]`: statistics per channel over batch and space.
    Batch,
    /// `[..., C]`: statistics per row over the last axis.
    Layer,
    /// `[B, C, ...]`: statistics per sample over `C / groups` channels and space.
    Group(usize),
}

#[derive(Clone, Copy, Debug)]
struct NormLayout {
    mode: NormMode,
    channels: usize,
    inner: usize,
}

impl NormLayout {
    /// `(statistic group, channel)` of flat element `i`.
    #[inline]
    fn locate(&self, i: usize) -> (usize, usize) {
        match self.mode {
            NormMode::Layer => (i / self.channels, i % self.channels),
            NormMode::Batch => {
                let c = (i / self.inner) % self.channels;
                (c, c)
            }
            NormMode::Group(g) => {
                let c = (i / self.inner) % self.channels;
                let b = i / (self.inner * self.channels);
                (b * g + c / (self.channels / g), c)
            }
        }
    }
}

/// Deliberate corruption of one backward rule, for negative-control checks
/// of the gradient harness.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BackwardFault {
    ScaleSigmoid(f64),
    ScaleConvWeight(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Binary { kind: BinaryKind, a: Var, b: Var },
    Unary { kind: UnaryKind, x: Var },
    Affine { x: Var, scale: f64 },
    ReduceAxis { x: Var, axis: usize, factor: f64 },
    ReduceAll { x: Var, factor: f64 },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    MatMul { a: Var, b: Var, trans_b: bool, batch: usize, m: usize, k: usize, n: usize, shared_b: bool },
    Conv2d { x: Var, w: Var, b: Option<Var>, geo: ConvGeometry },
    PadReplicate { x: Var, pad: usize },
    Softmax { x: Var, axis: usize },
    Norm { x: Var, scale: Var, shift: Var, layout: NormLayout, xhat: Vec<f64>, inv_std: Vec<f64>, mean: Vec<f64>, var: Vec<f64> },
    Rotary { x: Var, cos: Vec<f64>, sin: Vec<f64> },
    CrossEntropy { logits: Var, labels: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-owner record of one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    fault: Option<BackwardFault>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn same_rank(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(dim_err(op, None, format!("rank mismatch {a:?} vs {b:?}")));
    }
    a.iter()
        .zip(b)
        .enumerate()
        .map(|(axis, (&x, &y))| {
            if x == y || y == 1 {
                Ok(x)
            } else if x == 1 {
                Ok(y)
            } else {
                Err(dim_err(op, Some(axis), format!("cannot broadcast {x} with {y}")))
            }
        })
        .collect()
}

/// Calls `f(out, ia, ib)` for every element of the broadcast result.
fn for_each_broadcast(out: &[usize], a: &[usize], b: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    let (sa, sb) = (strides(a), strides(b));
    let sa: Vec<usize> = (0..rank).map(|d| if a[d] == 1 { 0 } else { sa[d] }).collect();
    let sb: Vec<usize> = (0..rank).map(|d| if b[d] == 1 { 0 } else { sb[d] }).collect();
    let last = rank - 1;
    let inner = out[last];
    let outer = numel(out) / inner;
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..outer {
        for j in 0..inner {
            f(o * inner + j, ia + j * sa[last], ib + j * sb[last]);
        }
        // odometer over leading axes
        let mut d = last;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        libm::log1p(libm::exp(x))
    }
}

/// `(outer, axis_len, inner)` decomposition around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            fault: None,
        }
    }

    pub fn inject_fault(&mut self, fault: BackwardFault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dtype(&self, v: Var) -> DType {
        self.nodes[v.0].value.dtype()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn emit(&mut self, name: &'static str, shape: Vec<usize>, mut data: Vec<f64>, dtype: DType, op: Op, inputs: &[Var]) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        if dtype == DType::F32 {
            data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Tensor::from_parts(shape, data, dtype), op, requires_grad))
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Records a named trainable value. Names are unique per tape.
    pub fn param(&mut self, name: &str, t: Tensor) -> Result<Var> {
        if self.params.contains_key(name) {
            return Err(Error::Usage(format!("parameter {name} registered twice")));
        }
        let v = self.push(t, Op::Param, true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    // ---- elementwise ----

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = same_rank(name, &sa, &sb)?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; numel(&out_shape)];
        if sa == sb {
            for ((o, x), y) in out.iter_mut().zip(da).zip(db) {
                *o = apply_binary(kind, *x, *y);
            }
        } else {
            for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| out[o] = apply_binary(kind, da[ia], db[ib]));
        }
        let dtype = self.dtype(a).promote(self.dtype(b));
        self.emit(name, out_shape, out, dtype, Op::Binary { kind, a, b }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let name = match kind {
            UnaryKind::Relu => "relu",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Exp => "exp",
            UnaryKind::Ln => "ln",
            UnaryKind::Softplus => "softplus",
            UnaryKind::Sqrt => "sqrt",
        };
        let t = self.value(x);
        let out = t
            .data()
            .iter()
            .map(|&v| match kind {
                UnaryKind::Relu => v.max(0.0),
                UnaryKind::Sigmoid => sigmoid(v),
                UnaryKind::Exp => libm::exp(v),
                UnaryKind::Ln => libm::log(v),
                UnaryKind::Softplus => softplus(v),
                UnaryKind::Sqrt => libm::sqrt(v),
            })
            .collect();
        let (shape, dtype) = (t.shape().to_vec(), t.dtype());
        self.emit(name, shape, out, dtype, Op::Unary { kind, x }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x)
    }

    /// Natural logarithm; non-positive inputs raise [`Error::NonFinite`].
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Ln, x)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Softplus, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sqrt, x)
    }

    /// `scale · x + offset`.
    pub fn affine(&mut self, x: Var, scale: f64, offset: f64) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().iter().map(|v| scale * v + offset).collect();
        let (shape, dtype) = (t.shape().to_vec(), t.dtype());
        self.emit("affine", shape, out, dtype, Op::Affine { x, scale }, &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.affine(x, c, 0.0)
    }

    // ---- reductions and layout ----

    fn reduce_axis(&mut self, x: Var, axis: usize, factor: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(dim_err("reduce", Some(axis), format!("axis out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let row = &src[(o * len + a) * inner..(o * len + a + 1) * inner];
                add_into(&mut out[o * inner..(o + 1) * inner], row);
            }
        }
        out.iter_mut().for_each(|v| *v *= factor);
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let dtype = self.dtype(x);
        self.emit("reduce", out_shape, out, dtype, Op::ReduceAxis { x, axis, factor }, &[x])
    }

    /// Sum along `axis`, keeping it with length 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, 1.0)
    }

    /// Mean along `axis`, keeping it with length 1.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| dim_err("mean", Some(axis), "axis out of range".into()))?;
        self.reduce_axis(x, axis, 1.0 / len as f64)
    }

    fn reduce_all(&mut self, x: Var, factor: f64) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        let dtype = self.dtype(x);
        self.emit("reduce_all", vec![1], vec![s * factor], dtype, Op::ReduceAll { x, factor }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.reduce_all(x, 1.0)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        self.reduce_all(x, 1.0 / n)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let requires_grad = self.nodes[x.0].requires_grad;
        Ok(self.push(t, Op::Reshape { x }, requires_grad))
    }

    /// Reorders axes so that output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || core::mem::replace(&mut seen[p], true)) {
            return Err(dim_err("permute", None, format!("{perm:?} is not a permutation of rank {}", shape.len())));
        }
        let out = permute_data(self.value(x).data(), &shape, perm);
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        let dtype = self.dtype(x);
        self.emit("permute", out_shape, out, dtype, Op::Permute { x, perm: perm.to_vec() }, &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(dim_err("concat", Some(axis), "axis out of range".into()));
        }
        let mut total = 0;
        let mut dtype = self.dtype(xs[0]);
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len() || s.iter().zip(&first).enumerate().any(|(d, (a, b))| d != axis && a != b) {
                return Err(dim_err("concat", Some(axis), format!("{s:?} vs {first:?}")));
            }
            total += s[axis];
            dtype = dtype.promote(self.dtype(v));
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis];
                out.extend_from_slice(&self.value(v).data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.emit("concat", shape, out, dtype, Op::Concat { xs: xs.to_vec(), axis }, xs)
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(dim_err("narrow", Some(axis), format!("[{start}, {}) outside {shape:?}", start + len)));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let dtype = self.dtype(x);
        self.emit("narrow", out_shape, out, dtype, Op::Narrow { x, axis, start }, &[x])
    }

    // ---- linear algebra ----

    /// Batched matrix product `a[..., M, K] · b[..., K, N]`.
    ///
    /// With `trans_b`, `b` is laid out `[..., N, K]`. A rank-2 `b` is shared
    /// across all batch entries of `a`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(dim_err("matmul", None, "operands need rank >= 2".into()));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(dim_err("matmul", Some(sa.len() - 1), format!("inner dimensions {k} vs {kb}")));
        }
        let batch = numel(&sa[..sa.len() - 2]);
        let shared_b = sb.len() == 2;
        if !shared_b && sb[..sb.len() - 2] != sa[..sa.len() - 2] {
            return Err(dim_err("matmul", Some(0), format!("batch dims {sa:?} vs {sb:?}")));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            let bo = if shared_b { 0 } else { i * k * n };
            kernels::gemm(false, trans_b, m, n, k, &da[i * m * k..(i + 1) * m * k], &db[bo..bo + k * n], &mut out[i * m * n..(i + 1) * m * n]);
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend_from_slice(&[m, n]);
        let dtype = self.dtype(a).promote(self.dtype(b));
        self.emit("matmul", shape, out, dtype, Op::MatMul { a, b, trans_b, batch, m, k, n, shared_b }, &[a, b])
    }

    /// `x[N, Cin] · weight[Cout, Cin]ᵀ + bias`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, weight, true)?;
        match bias {
            Some(b) => {
                let len = self.shape(b)[0];
                let mut bshape = vec![1; self.shape(y).len()];
                *bshape.last_mut().unwrap() = len;
                let b = self.reshape(b, &bshape)?;
                self.add(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize, groups: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(dim_err("conv2d", None, format!("expected rank-4 input and weight, got {sx:?} and {sw:?}")));
        }
        if groups == 0 || sx[1] % groups != 0 || sw[0] % groups != 0 {
            return Err(Error::Config(format!("conv2d groups {groups} must divide in {} and out {} channels", sx[1], sw[0])));
        }
        if sw[1] != sx[1] / groups {
            return Err(dim_err("conv2d", Some(1), format!("weight expects {} input channels per group, input has {}", sw[1], sx[1] / groups)));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        if sx[2] + 2 * padding < sw[2] {
            return Err(dim_err("conv2d", Some(2), format!("kernel height {} exceeds padded input {}", sw[2], sx[2] + 2 * padding)));
        }
        if sx[3] + 2 * padding < sw[3] {
            return Err(dim_err("conv2d", Some(3), format!("kernel width {} exceeds padded input {}", sw[3], sx[3] + 2 * padding)));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(dim_err("conv2d", Some(0), format!("bias shape {:?} for {} outputs", self.shape(b), sw[0])));
            }
        }
        let geo = ConvGeometry {
            batch: sx[0],
            in_channels: sx[1],
            height: sx[2],
            width: sx[3],
            out_channels: sw[0],
            kernel_h: sw[2],
            kernel_w: sw[3],
            stride,
            padding,
            groups,
        };
        let out = kernels::conv2d_forward(&geo, self.value(x).data(), self.value(w).data(), b.map(|b| self.value(b).data()));
        let mut dtype = self.dtype(x).promote(self.dtype(w));
        let mut inputs = vec![x, w];
        if let Some(b) = b {
            dtype = dtype.promote(self.dtype(b));
            inputs.push(b);
        }
        let shape = vec![geo.batch, geo.out_channels, geo.out_h(), geo.out_w()];
        self.emit("conv2d", shape, out, dtype, Op::Conv2d { x, w, b, geo }, &inputs)
    }

    /// Pads the two trailing axes by repeating edge values.
    pub fn pad_replicate(&mut self, x: Var, pad: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(dim_err("pad_replicate", None, "needs rank >= 2".into()));
        }
        let r = shape.len();
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let planes = numel(&shape[..r - 2]);
        let src = self.value(x).data();
        let mut out = vec![0.0; planes * ph * pw];
        for p in 0..planes {
            for y in 0..ph {
                let sy = y.saturating_sub(pad).min(h - 1);
                for xx in 0..pw {
                    let sx = xx.saturating_sub(pad).min(w - 1);
                    out[(p * ph + y) * pw + xx] = src[(p * h + sy) * w + sx];
                }
            }
        }
        let mut out_shape = shape;
        out_shape[r - 2] = ph;
        out_shape[r - 1] = pw;
        let dtype = self.dtype(x);
        self.emit("pad_replicate", out_shape, out, dtype, Op::PadReplicate { x, pad }, &[x])
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(dim_err("softmax", Some(axis), "axis out of range".into()));
        }
        let out = softmax_data(self.value(x).data(), &shape, axis);
        let dtype = self.dtype(x);
        self.emit("softmax", shape, out, dtype, Op::Softmax { x, axis }, &[x])
    }

    /// Normalization with statistics computed from `x` itself, followed by a
    /// per-channel affine map `scale · x̂ + shift`.
    pub fn normalize(&mut self, x: Var, mode: NormMode, scale: Var, shift: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (channels, inner) = match mode {
            NormMode::Layer => (*shape.last().unwrap(), 1),
            NormMode::Batch | NormMode::Group(_) => {
                if shape.len() < 2 {
                    return Err(dim_err("normalize", None, format!("{shape:?} lacks a channel axis")));
                }
                (shape[1], numel(&shape[2..]))
            }
        };
        if let NormMode::Group(g) = mode {
            if g == 0 || channels % g != 0 {
                return Err(Error::Config(format!("{channels} channels not divisible into {g} groups")));
            }
        }
        for (what, v) in [("scale", scale), ("shift", shift)] {
            if self.shape(v) != [channels] {
                return Err(dim_err("normalize", Some(0), format!("{what} has shape {:?}, expected [{channels}]", self.shape(v))));
            }
        }
        let layout = NormLayout { mode, channels, inner };
        let n_stats = match mode {
            NormMode::Layer => numel(&shape) / channels,
            NormMode::Batch => channels,
            NormMode::Group(g) => shape[0] * g,
        };
        let src = self.value(x).data();
        let mut sum = vec![0.0; n_stats];
        let mut count = vec![0usize; n_stats];
        for (i, v) in src.iter().enumerate() {
            let (s, _) = layout.locate(i);
            sum[s] += v;
            count[s] += 1;
        }
        let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect();
        let mut var = vec![0.0; n_stats];
        for (i, v) in src.iter().enumerate() {
            let (s, _) = layout.locate(i);
            let d = v - mean[s];
            var[s] += d * d;
        }
        var.iter_mut().zip(&count).for_each(|(v, &c)| *v /= c as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
        let (gamma, beta) = (self.value(scale).data(), self.value(shift).data());
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        for (i, v) in src.iter().enumerate() {
            let (s, c) = layout.locate(i);
            xhat[i] = (v - mean[s]) * inv_std[s];
            out[i] = gamma[c] * xhat[i] + beta[c];
        }
        let dtype = self.dtype(x).promote(self.dtype(scale));
        let op = Op::Norm { x, scale, shift, layout, xhat, inv_std, mean, var };
        self.emit("normalize", shape, out, dtype, op, &[x, scale, shift])
    }

    /// Biased batch mean and variance recorded by a [`NormMode::Batch`] node.
    pub fn batch_statistics(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.0].op {
            Op::Norm { layout, mean, var, .. } if layout.mode == NormMode::Batch => Some((mean, var)),
            _ => None,
        }
    }

    /// Rotates consecutive feature pairs of `x[..., L, D]` by per-token angles
    /// given as `cos[L, D/2]`, `sin[L, D/2]`.
    pub fn rotary(&mut self, x: Var, cos: &[f64], sin: &[f64]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 2 {
            return Err(dim_err("rotary", None, "needs rank >= 2".into()));
        }
        let (l, d) = (shape[r - 2], shape[r - 1]);
        if d % 2 != 0 {
            return Err(Error::Config(format!("rotary feature size {d} must be even")));
        }
        if cos.len() != l * d / 2 || sin.len() != l * d / 2 {
            return Err(dim_err("rotary", Some(r - 2), format!("tables cover {} entries, need {}", cos.len(), l * d / 2)));
        }
        let out = rotate_pairs(self.value(x).data(), l, d, cos, sin, 1.0);
        let dtype = self.dtype(x);
        self.emit("rotary", shape, out, dtype, Op::Rotary { x, cos: cos.to_vec(), sin: sin.to_vec() }, &[x])
    }

    /// Mean (optionally class-weighted) softmax cross-entropy of `logits[B, K]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], class_weights: Option<&[f64]>) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(dim_err("cross_entropy", Some(0), format!("logits {shape:?} for {} labels", labels.len())));
        }
        let k = shape[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Data(format!("label {bad} outside [0, {k})")));
        }
        let probs = softmax_data(self.value(logits).data(), &shape, 1);
        let z = self.value(logits).data();
        let weights: Vec<f64> = labels.iter().map(|&y| class_weights.map_or(1.0, |w| w[y])).collect();
        let total_w: f64 = weights.iter().sum();
        let mut loss = 0.0;
        for (b, &y) in labels.iter().enumerate() {
            let row = &z[b * k..(b + 1) * k];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + libm::log(row.iter().map(|v| libm::exp(v - mx)).sum::<f64>());
            loss += weights[b] * (lse - row[y]);
        }
        let weights = weights.iter().map(|w| w / total_w).collect();
        let dtype = self.dtype(logits);
        let op = Op::CrossEntropy { logits, labels: labels.to_vec(), weights, probs };
        self.emit("cross_entropy", vec![1], vec![loss / total_w], dtype, op, &[logits])
    }

    /// Sign pattern of every ReLU input; equal patterns mean two evaluations
    /// lie on the same smooth piece of the network.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut pattern = Vec::new();
        for node in &self.nodes {
            if let Op::Unary { kind: UnaryKind::Relu, x } = node.op {
                pattern.extend(self.nodes[x.0].value.data().iter().map(|&v| v > 0.0));
            }
        }
        pattern
    }

    /// Reverse sweep from a scalar `loss`; returns gradients of every named
    /// parameter (zeros for parameters not connected to the loss).
    pub fn backward(self, loss: Var) -> Result<BTreeMap<String, Tensor>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);
        let needs = |v: Var| nodes[v.0].requires_grad;

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if matches!(node.op, Op::Param) {
                grads[i] = Some(g);
                continue;
            }
            if !node.requires_grad {
                continue;
            }
            macro_rules! acc {
                ($v:expr, $len:expr) => {
                    grads[$v.0].get_or_insert_with(|| vec![0.0; $len])
                };
            }
            match &node.op {
                Op::Leaf | Op::Param => {}
                Op::Binary { kind, a, b } => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (da, db) = (ta.data(), tb.data());
                    let out_shape = node.value.shape();
                    let (na, nb) = (needs(*a), needs(*b));
                    let mut ga = if na { vec![0.0; da.len()] } else { Vec::new() };
                    let mut gb = if nb { vec![0.0; db.len()] } else { Vec::new() };
                    let mut step = |o: usize, ia: usize, ib: usize| {
                        let go = g[o];
                        let (pa, pb) = match kind {
                            BinaryKind::Add => (go, go),
                            BinaryKind::Sub => (go, -go),
                            BinaryKind::Mul => (go * db[ib], go * da[ia]),
                            BinaryKind::Div => (go / db[ib], -go * da[ia] / (db[ib] * db[ib])),
                        };
                        if na {
                            ga[ia] += pa;
                        }
                        if nb {
                            gb[ib] += pb;
                        }
                    };
                    if ta.shape() == tb.shape() {
                        for o in 0..g.len() {
                            step(o, o, o);
                        }
                    } else {
                        for_each_broadcast(out_shape, ta.shape(), tb.shape(), step);
                    }
                    if na {
                        add_into(acc!(*a, da.len()), &ga);
                    }
                    if nb {
                        add_into(acc!(*b, db.len()), &gb);
                    }
                }
                Op::Unary { kind, x } => {
                    let xin = nodes[x.0].value.data();
                    let y = node.value.data();
                    let fault = match (self.fault, kind) {
                        (Some(BackwardFault::ScaleSigmoid(f)), UnaryKind::Sigmoid) => f,
                        _ => 1.0,
                    };
                    let gx = acc!(*x, xin.len());
                    for j in 0..g.len() {
                        let d = match kind {
                            UnaryKind::Relu => {
                                if xin[j] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Sigmoid => y[j] * (1.0 - y[j]) * fault,
                            UnaryKind::Exp => y[j],
                            UnaryKind::Ln => 1.0 / xin[j],
                            UnaryKind::Softplus => sigmoid(xin[j]),
                            UnaryKind::Sqrt => 0.5 / y[j],
                        };
                        gx[j] += g[j] * d;
                    }
                }
                Op::Affine { x, scale } => {
                    let gx = acc!(*x, g.len());
                    for (d, s) in gx.iter_mut().zip(&g) {
                        *d += scale * s;
                    }
                }
                Op::ReduceAxis { x, axis, factor } => {
                    let shape = nodes[x.0].value.shape();
                    let (outer, len, inner) = split_axis(shape, *axis);
                    let gx = acc!(*x, outer * len * inner);
                    for o in 0..outer {
                        for a in 0..len {
                            let dst = &mut gx[(o * len + a) * inner..(o * len + a + 1) * inner];
                            for (d, s) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *d += factor * s;
                            }
                        }
                    }
                }
                Op::ReduceAll { x, factor } => {
                    let n = nodes[x.0].value.numel();
                    let gx = acc!(*x, n);
                    gx.iter_mut().for_each(|d| *d += factor * g[0]);
                }
                Op::Reshape { x } => add_into(acc!(*x, g.len()), &g),
                Op::Permute { x, perm } => {
                    let mut inverse = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inverse[p] = i;
                    }
                    let back = permute_data(&g, node.value.shape(), &inverse);
                    add_into(acc!(*x, g.len()), &back);
                }
                Op::Concat { xs, axis } => {
                    let shape = node.value.shape();
                    let (outer, total, inner) = split_axis(shape, *axis);
                    let mut offset = 0;
                    for &v in xs {
                        let len = nodes[v.0].value.shape()[*axis];
                        if needs(v) {
                            let gv = acc!(v, outer * len * inner);
                            for o in 0..outer {
                                let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                                add_into(&mut gv[o * len * inner..(o + 1) * len * inner], src);
                            }
                        }
                        offset += len;
                    }
                }
                Op::Narrow { x, axis, start } => {
                    let shape = nodes[x.0].value.shape();
                    let (outer, full, inner) = split_axis(shape, *axis);
                    let len = node.value.shape()[*axis];
                    let gx = acc!(*x, outer * full * inner);
                    for o in 0..outer {
                        let dst = &mut gx[(o * full + start) * inner..(o * full + start + len) * inner];
                        add_into(dst, &g[o * len * inner..(o + 1) * len * inner]);
                    }
                }
                Op::MatMul { a, b, trans_b, batch, m, k, n, shared_b } => {
                    let (m, k, n) = (*m, *k, *n);
                    let (da, db) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if needs(*a) {
                        let ga = acc!(*a, da.len());
                        for i in 0..*batch {
                            let bo = if *shared_b { 0 } else { i * k * n };
                            // dA = dC · op(B)ᵀ
                            kernels::gemm(false, !*trans_b, m, k, n, &g[i * m * n..(i + 1) * m * n], &db[bo..bo + k * n], &mut ga[i * m * k..(i + 1) * m * k]);
                        }
                    }
                    if needs(*b) {
                        let gb = acc!(*b, db.len());
                        for i in 0..*batch {
                            let bo = if *shared_b { 0 } else { i * k * n };
                            let a_i = &da[i * m * k..(i + 1) * m * k];
                            let g_i = &g[i * m * n..(i + 1) * m * n];
                            if *trans_b {
                                // dB[n,k] = dCᵀ · A
                                kernels::gemm(true, false, n, k, m, g_i, a_i, &mut gb[bo..bo + k * n]);
                            } else {
                                // dB[k,n] = Aᵀ · dC
                                kernels::gemm(true, false, k, n, m, a_i, g_i, &mut gb[bo..bo + k * n]);
                            }
                        }
                    }
                }
                Op::Conv2d { x, w, b, geo } => {
                    let (dx, dw) = (nodes[x.0].value.data(), nodes[w.0].value.data());
                    let mut gx = if needs(*x) { Some(vec![0.0; dx.len()]) } else { None };
                    let mut gw = if needs(*w) { Some(vec![0.0; dw.len()]) } else { None };
                    kernels::conv2d_backward(geo, dx, dw, &g, gx.as_deref_mut(), gw.as_deref_mut());
                    if let Some(gx) = gx {
                        add_into(acc!(*x, dx.len()), &gx);
                    }
                    if let Some(mut gw) = gw {
                        if let Some(BackwardFault::ScaleConvWeight(f)) = self.fault {
                            gw.iter_mut().for_each(|v| *v *= f);
                        }
                        add_into(acc!(*w, dw.len()), &gw);
                    }
                    if let Some(b) = b {
                        if needs(*b) {
                            let plane = geo.out_h() * geo.out_w();
                            let gb = acc!(*b, geo.out_channels);
                            for bi in 0..geo.batch {
                                for o in 0..geo.out_channels {
                                    let s = (bi * geo.out_channels + o) * plane;
                                    gb[o] += g[s..s + plane].iter().sum::<f64>();
                                }
                            }
                        }
                    }
                }
                Op::PadReplicate { x, pad } => {
                    let shape = nodes[x.0].value.shape();
                    let r = shape.len();
                    let (h, w) = (shape[r - 2], shape[r - 1]);
                    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
                    let planes = numel(&shape[..r - 2]);
                    let gx = acc!(*x, planes * h * w);
                    for p in 0..planes {
                        for y in 0..ph {
                            let sy = y.saturating_sub(*pad).min(h - 1);
                            for xx in 0..pw {
                                let sx = xx.saturating_sub(*pad).min(w - 1);
                                gx[(p * h + sy) * w + sx] += g[(p * ph + y) * pw + xx];
                            }
                        }
                    }
                }
                Op::Softmax { x, axis } => {
                    let shape = node.value.shape();
                    let (outer, len, inner) = split_axis(shape, *axis);
                    let y = node.value.data();
                    let gx = acc!(*x, y.len());
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |a: usize| (o * len + a) * inner + j;
                            let dotv: f64 = (0..len).map(|a| g[at(a)] * y[at(a)]).sum();
                            for a in 0..len {
                                gx[at(a)] += y[at(a)] * (g[at(a)] - dotv);
                            }
                        }
                    }
                }
                Op::Norm { x, scale, shift, layout, xhat, inv_std, .. } => {
                    let gamma = nodes[scale.0].value.data();
                    let n_stats = inv_std.len();
                    let mut m1 = vec![0.0; n_stats];
                    let mut m2 = vec![0.0; n_stats];
                    let mut count = vec![0usize; n_stats];
                    let mut dgamma = vec![0.0; layout.channels];
                    let mut dbeta = vec![0.0; layout.channels];
                    for i in 0..g.len() {
                        let (s, c) = layout.locate(i);
                        let dxhat = g[i] * gamma[c];
                        m1[s] += dxhat;
                        m2[s] += dxhat * xhat[i];
                        count[s] += 1;
                        dgamma[c] += g[i] * xhat[i];
                        dbeta[c] += g[i];
                    }
                    if needs(*x) {
                        let gx = acc!(*x, g.len());
                        for i in 0..g.len() {
                            let (s, c) = layout.locate(i);
                            let n = count[s] as f64;
                            gx[i] += inv_std[s] * (g[i] * gamma[c] - m1[s] / n - xhat[i] * m2[s] / n);
                        }
                    }
                    if needs(*scale) {
                        add_into(acc!(*scale, layout.channels), &dgamma);
                    }
                    if needs(*shift) {
                        add_into(acc!(*shift, layout.channels), &dbeta);
                    }
                }
                Op::Rotary { x, cos, sin } => {
                    let shape = node.value.shape();
                    let r = shape.len();
                    let back = rotate_pairs(&g, shape[r - 2], shape[r - 1], cos, sin, -1.0);
                    add_into(acc!(*x, g.len()), &back);
                }
                Op::CrossEntropy { logits, labels, weights, probs } => {
                    let k = nodes[logits.0].value.shape()[1];
                    let gz = acc!(*logits, probs.len());
                    for (b, &y) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            gz[b * k + j] += g[0] * weights[b] * (probs[b * k + j] - onehot);
                        }
                    }
                }
            }
        }

        let mut out = BTreeMap::new();
        for (name, &v) in &self.params {
            let t = &nodes[v.0].value;
            let data = grads[v.0].take().unwrap_or_else(|| vec![0.0; t.numel()]);
            out.insert(name.clone(), Tensor::from_parts(t.shape().to_vec(), data, DType::F64));
        }
        Ok(out)
    }
}

#[inline]
fn apply_binary(kind: BinaryKind, x: f64, y: f64) -> f64 {
    match kind {
        BinaryKind::Add => x + y,
        BinaryKind::Sub => x - y,
        BinaryKind::Mul => x * y,
        BinaryKind::Div => x / y,
    }
}

pub(crate) fn permute_data(src: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    let last = rank - 1;
    let inner = out_shape[last];
    for _ in 0..src.len() / inner {
        for j in 0..inner {
            out.push(src[offset + j * step[last]]);
        }
        let mut d = last;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            offset += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= step[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

pub(crate) fn softmax_data(src: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for j in 0..inner {
            let at = |a: usize| (o * len + a) * inner + j;
            let mx = (0..len).map(|a| src[at(a)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for a in 0..len {
                let e = libm::exp(src[at(a)] - mx);
                out[at(a)] = e;
                total += e;
            }
            for a in 0..len {
                out[at(a)] /= total;
            }
        }
    }
    out
}

/// Applies the pair rotation with angle sign `dir` (−1 is the inverse).
fn rotate_pairs(src: &[f64], l: usize, d: usize, cos: &[f64], sin: &[f64], dir: f64) -> Vec<f64> {
    let half = d / 2;
    let mut out = vec![0.0; src.len()];
    for (row, chunk) in src.chunks(d).enumerate() {
        let t = row % l;
        let dst = &mut out[row * d..(row + 1) * d];
        for k in 0..half {
            let (c, s) = (cos[t * half + k], dir * sin[t * half + k]);
            let (x0, x1) = (chunk[2 * k], chunk[2 * k + 1]);
            dst[2 * k] = x0 * c - x1 * s;
            dst[2 * k + 1] = x0 * s + x1 * c;
        }
    }
    out
}
