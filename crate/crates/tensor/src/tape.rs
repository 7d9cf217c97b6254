//! Wengert-list reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward rule. Nodes are only ever appended, so the list is
//! always in topological order and [`Tape::backward`] is a single reverse
//! sweep.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{Scalar, Tensor};

/// Epsilon added to the variance inside layer and group normalization.
pub const NORM_EPS: f64 = 1e-5;

/// Probability clamp applied before taking logs in [`Tape::domain_bce`].
pub const PROB_CLAMP: f64 = 1e-7;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    MulCols(Var, Var),
    MulRows(Var, Var),
    ChannelAffine(Var, Var, Var),
    Relu(Var),
    Softmax {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Normalize {
        x: Var,
        n: usize,
        rstd: Vec<T>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    RowMax {
        x: Var,
        argmax: Vec<usize>,
    },
    MinMax {
        x: Var,
        imin: usize,
        imax: usize,
        range: Option<T>,
    },
    Sum(Var),
    Mean(Var),
    Index(Var, usize),
    Stack(Vec<Var>),
    Grl(Var, T),
    SoftmaxCe {
        logits: Var,
        probs: Vec<T>,
        targets: Vec<usize>,
        weights: Vec<T>,
    },
    SmoothL1 {
        pred: Var,
        target: Vec<T>,
        weights: Vec<T>,
    },
    DomainBce {
        probs: Var,
        target: T,
        clamped: Vec<bool>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Recording of a forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    seed: u64,
    dropout_calls: u64,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn as_matrix(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [m, n] => Some((*m, *n)),
        _ => None,
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self::with_seed(0)
    }

    /// Tape whose dropout masks are drawn from streams derived from `seed`
    /// and a per-call counter.
    pub fn with_seed(seed: u64) -> Self {
        Tape {
            nodes: Vec::new(),
            seed,
            dropout_calls: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
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

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        as_matrix(self.shape(v)).ok_or_else(|| shape_err(op, self.shape(v), &[0, 0]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let x = self.value(a);
        Tensor::new(x.shape().to_vec(), x.data().iter().map(|&p| f(p)).collect()).expect("shape preserved")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix("matmul", a)?;
        let (k2, n) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            T::zero(),
            &mut out,
        );
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix("transpose", a)?;
        let x = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        self.push("transpose", Tensor::new(vec![n, m], out)?, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |p, q| p + q);
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |p, q| p - q);
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |p, q| p * q);
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let v = self.map(a, |p| p * factor);
        self.push("scale", v, Op::Scale(a, factor), &[a])
    }

    fn last_dim(&self, op: &'static str, x: Var, vec: Var) -> Result<usize> {
        let n = *self.shape(x).last().unwrap();
        if self.value(vec).numel() != n {
            return Err(shape_err(op, self.shape(x), self.shape(vec)));
        }
        Ok(n)
    }

    /// Adds `bias` (length = last dimension) to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.last_dim("add_bias", x, bias)?;
        let b = self.value(bias).data();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_exact_mut(n) {
            for (d, &bb) in row.iter_mut().zip(b) {
                *d += bb;
            }
        }
        self.push("add_bias", v, Op::AddBias(x, bias), &[x, bias])
    }

    /// Multiplies every row of `x` element-wise by `g` (length = last dimension).
    pub fn mul_cols(&mut self, x: Var, g: Var) -> Result<Var> {
        let n = self.last_dim("mul_cols", x, g)?;
        let s = self.value(g).data();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_exact_mut(n) {
            for (d, &ss) in row.iter_mut().zip(s) {
                *d *= ss;
            }
        }
        self.push("mul_cols", v, Op::MulCols(x, g), &[x, g])
    }

    /// Scales row `i` of the matrix `x` by `v[i]`.
    pub fn mul_rows(&mut self, x: Var, v: Var) -> Result<Var> {
        let (m, n) = self.matrix("mul_rows", x)?;
        if self.value(v).numel() != m {
            return Err(shape_err("mul_rows", self.shape(x), self.shape(v)));
        }
        let s = self.value(v).data();
        let mut out = self.value(x).clone();
        for (row, &ss) in out.data_mut().chunks_exact_mut(n).zip(s) {
            for d in row {
                *d *= ss;
            }
        }
        self.push("mul_rows", out, Op::MulRows(x, v), &[x, v])
    }

    /// Per-channel `gamma * x + beta` over a channel-first tensor.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let c = self.shape(x)[0];
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(shape_err("channel_affine", self.shape(x), self.shape(gamma)));
        }
        let l = self.value(x).numel() / c;
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = self.value(x).clone();
        for (ch, plane) in out.data_mut().chunks_exact_mut(l).enumerate() {
            for d in plane {
                *d = *d * g[ch] + b[ch];
            }
        }
        self.push(
            "channel_affine",
            out,
            Op::ChannelAffine(x, gamma, beta),
            &[x, gamma, beta],
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.map(x, |p| if p > T::zero() { p } else { T::zero() });
        self.push("relu", v, Op::Relu(x), &[x])
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Usage(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer = shape[..axis].iter().product();
        let n = shape[axis];
        let inner = shape[axis + 1..].iter().product();
        let mut out = vec![T::zero(); self.value(x).numel()];
        kernels::softmax(self.value(x).data(), outer, n, inner, &mut out);
        self.push(
            "softmax",
            Tensor::new(shape, out)?,
            Op::Softmax { x, outer, n, inner },
            &[x],
        )
    }

    /// Cross-correlation of `x: [C_in, H, W]` with `w: [C_out, C_in, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (&[c_in, h, wd], &[c_out, wc, kh, kw]) = (xs.as_slice(), ws.as_slice()) else {
            return Err(shape_err("conv2d", &xs, &ws));
        };
        if wc != c_in || kh != kw {
            return Err(shape_err("conv2d", &xs, &ws));
        }
        if stride == 0 {
            return Err(TensorError::Config("conv2d stride must be positive".into()));
        }
        if kh > h + 2 * padding || kh > wd + 2 * padding {
            return Err(shape_err("conv2d", &xs, &ws));
        }
        if let Some(b) = b {
            if self.value(b).numel() != c_out {
                return Err(shape_err("conv2d bias", &ws, self.shape(b)));
            }
        }
        let geom = ConvGeom {
            in_channels: c_in,
            height: h,
            width: wd,
            kernel: kh,
            stride,
            padding,
        };
        let (kl, l) = (geom.patch_len(), geom.out_len());
        let mut cols = vec![T::zero(); kl * l];
        kernels::im2col(self.value(x).data(), &geom, &mut cols);
        let mut out = vec![T::zero(); c_out * l];
        T::gemm(
            c_out,
            kl,
            l,
            T::one(),
            self.value(w).data(),
            false,
            &cols,
            false,
            T::zero(),
            &mut out,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (plane, &bb) in out.chunks_exact_mut(l).zip(bias) {
                for d in plane {
                    *d += bb;
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let needs_grad = inputs.iter().any(|&v| self.requires_grad(v));
        if !needs_grad {
            cols = Vec::new();
        }
        let value = Tensor::new(vec![c_out, geom.out_height(), geom.out_width()], out)?;
        self.push("conv2d", value, Op::Conv2d { x, w, b, geom, cols }, &inputs)
    }

    /// Max pooling over `x: [C, H, W]` without padding.
    pub fn maxpool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let &[c, h, w] = xs.as_slice() else {
            return Err(shape_err("maxpool2d", &xs, &[kernel, kernel]));
        };
        if kernel == 0 || stride == 0 || kernel > h || kernel > w {
            return Err(shape_err("maxpool2d", &xs, &[kernel, kernel]));
        }
        let (oh, ow) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = ch * h * w + oy * stride * w + ox * stride;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let i = ch * h * w + (oy * stride + ky) * w + ox * stride + kx;
                            if data[i] > data[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        self.push(
            "maxpool2d",
            Tensor::new(vec![c, oh, ow], out)?,
            Op::MaxPool2d { x, argmax },
            &[x],
        )
    }

    /// Inverted dropout. With `training == false` (or `p == 0`) returns `x`
    /// itself.
    pub fn dropout(&mut self, x: Var, p: f64, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let call = self.dropout_calls;
        self.dropout_calls += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(self.seed ^ splitmix64(call)));
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let v = {
            let xv = self.value(x);
            let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
            Tensor::new(xv.shape().to_vec(), data)?
        };
        self.push("dropout", v, Op::Dropout { x, mask }, &[x])
    }

    fn normalize(&mut self, name: &'static str, x: Var, n: usize) -> Result<Var> {
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.numel()];
        let rstd = kernels::normalize_rows(xv.data(), n, T::of(NORM_EPS), &mut out);
        let v = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(name, v, Op::Normalize { x, n, rstd }, &[x])
    }

    /// Normalizes over the last dimension (no affine).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap();
        self.normalize("layer_norm", x, n)
    }

    /// Normalizes each group of channels of a channel-first tensor (no affine).
    pub fn group_norm(&mut self, x: Var, groups: usize) -> Result<Var> {
        let c = self.shape(x)[0];
        if groups == 0 || !c.is_multiple_of(groups) {
            return Err(TensorError::Config(format!(
                "group_norm: {groups} groups do not divide {c} channels"
            )));
        }
        let n = self.value(x).numel() / groups;
        self.normalize("group_norm", x, n)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.matrix("slice_cols", x)?;
        if len == 0 || start + len > n {
            return Err(shape_err("slice_cols", &[m, n], &[start, len]));
        }
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for row in data.chunks_exact(n) {
            out.extend_from_slice(&row[start..start + len]);
        }
        self.push(
            "slice_cols",
            Tensor::new(vec![m, len], out)?,
            Op::SliceCols { x, start },
            &[x],
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Usage("concat_cols of nothing".into()))?;
        let (m, _) = self.matrix("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.matrix("concat_cols", p)?;
            if pm != m {
                return Err(shape_err("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        self.push(
            "concat_cols",
            Tensor::new(vec![m, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            parts,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Usage("concat_rows of nothing".into()))?;
        let (_, n) = self.matrix("concat_rows", first)?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pm, pn) = self.matrix("concat_rows", p)?;
            if pn != n {
                return Err(shape_err("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += pm;
            out.extend_from_slice(self.value(p).data());
        }
        self.push(
            "concat_rows",
            Tensor::new(vec![rows, n], out)?,
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    /// Maximum of every row of a matrix, shape `[m]`.
    pub fn row_max(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix("row_max", x)?;
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(m);
        let mut argmax = Vec::with_capacity(m);
        for (r, row) in data.chunks_exact(n).enumerate() {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            out.push(row[best]);
            argmax.push(r * n + best);
        }
        self.push("row_max", Tensor::new(vec![m], out)?, Op::RowMax { x, argmax }, &[x])
    }

    /// `(x - min) / (max - min)` over the whole tensor; a constant tensor maps
    /// to all zeros.
    pub fn minmax_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data();
        let (mut imin, mut imax) = (0, 0);
        for (i, &v) in data.iter().enumerate() {
            if v < data[imin] {
                imin = i;
            }
            if v > data[imax] {
                imax = i;
            }
        }
        let (lo, hi) = (data[imin], data[imax]);
        let range = if hi > lo { Some(hi - lo) } else { None };
        let out = match range {
            Some(r) => data.iter().map(|&v| (v - lo) / r).collect(),
            None => vec![T::zero(); data.len()],
        };
        let v = Tensor::new(xv.shape().to_vec(), out)?;
        self.push("minmax_normalize", v, Op::MinMax { x, imin, imax, range }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.sum() / T::from_usize(xv.numel()).unwrap();
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Single element of the flattened tensor, shape `[1]`.
    pub fn index(&mut self, x: Var, i: usize) -> Result<Var> {
        let xv = self.value(x);
        if i >= xv.numel() {
            return Err(shape_err("index", xv.shape(), &[i]));
        }
        let v = xv.data()[i];
        self.push("index", Tensor::scalar(v), Op::Index(x, i), &[x])
    }

    /// Stacks single-element tensors into a vector.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Usage("stack of nothing".into()));
        }
        let mut out = Vec::with_capacity(parts.len());
        for &p in parts {
            let pv = self.value(p);
            if pv.numel() != 1 {
                return Err(shape_err("stack", pv.shape(), &[1]));
            }
            out.push(pv.data()[0]);
        }
        self.push(
            "stack",
            Tensor::new(vec![parts.len()], out)?,
            Op::Stack(parts.to_vec()),
            parts,
        )
    }

    /// Gradient reversal: identity forward, upstream gradient times `-lambda`
    /// backward.
    pub fn grl(&mut self, x: Var, lambda: f64) -> Result<Var> {
        if !(lambda >= 0.0) {
            return Err(TensorError::Config(format!(
                "GRL coefficient must be >= 0, got {lambda}"
            )));
        }
        let v = self.value(x).clone();
        self.push("grl", v, Op::Grl(x, T::of(lambda)), &[x])
    }

    /// Copy of `x` that is cut off from the graph.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    /// `sum_i weights[i] * CE(softmax(logits[i]), targets[i])` for `logits: [N, K]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        let (n, k) = self.matrix("softmax_cross_entropy", logits)?;
        if targets.len() != n || weights.len() != n {
            return Err(shape_err(
                "softmax_cross_entropy",
                &[n, k],
                &[targets.len(), weights.len()],
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(TensorError::Usage(format!(
                "target class {t} out of range for {k} classes"
            )));
        }
        let mut probs = vec![T::zero(); n * k];
        kernels::softmax(self.value(logits).data(), n, k, 1, &mut probs);
        let lv = self.value(logits).data();
        let mut loss = T::zero();
        for i in 0..n {
            if weights[i] == T::zero() {
                continue;
            }
            let row = &lv[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            loss += weights[i] * (lse - row[targets[i]]);
        }
        let op = Op::SoftmaxCe {
            logits,
            probs,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
        };
        self.push("softmax_cross_entropy", Tensor::scalar(loss), op, &[logits])
    }

    /// `sum_i weights[i] * sum_j smoothL1(pred[i, j] - target[i, j])`.
    pub fn smooth_l1_loss(&mut self, pred: Var, target: &[T], weights: &[T]) -> Result<Var> {
        let (n, d) = self.matrix("smooth_l1_loss", pred)?;
        if target.len() != n * d || weights.len() != n {
            return Err(shape_err("smooth_l1_loss", &[n, d], &[target.len(), weights.len()]));
        }
        let pv = self.value(pred).data();
        let mut loss = T::zero();
        for i in 0..n {
            if weights[i] == T::zero() {
                continue;
            }
            let s: T = (0..d)
                .map(|j| kernels::smooth_l1(pv[i * d + j] - target[i * d + j]))
                .sum();
            loss += weights[i] * s;
        }
        let op = Op::SmoothL1 {
            pred,
            target: target.to_vec(),
            weights: weights.to_vec(),
        };
        self.push("smooth_l1_loss", Tensor::scalar(loss), op, &[pred])
    }

    /// Binary cross-entropy of domain probabilities averaged over entries:
    /// `-(1/S) sum_s [t log p_s + (1 - t) log(1 - p_s)]`, with `p_s` clamped
    /// to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
    pub fn domain_bce(&mut self, probs: Var, target: f64) -> Result<Var> {
        if target != 0.0 && target != 1.0 {
            return Err(TensorError::Usage(format!("domain tag must be 0 or 1, got {target}")));
        }
        let pv = self.value(probs).data();
        let s = T::from_usize(pv.len()).unwrap();
        let (lo, hi) = (T::of(PROB_CLAMP), T::one() - T::of(PROB_CLAMP));
        let t = T::of(target);
        let mut clamped = Vec::with_capacity(pv.len());
        let mut total = T::zero();
        for &p in pv {
            clamped.push(p < lo || p > hi);
            let p = p.max(lo).min(hi);
            total += t * p.ln() + (T::one() - t) * (T::one() - p).ln();
        }
        let op = Op::DomainBce {
            probs,
            target: t,
            clamped,
        };
        self.push("domain_bce", Tensor::scalar(-total / s), op, &[probs])
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite("backward"));
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let acc = |grads: &mut [Option<Vec<T>>], v: Var, f: &mut dyn FnMut(&mut [T])| {
            if nodes[v.0].requires_grad {
                let len = nodes[v.0].value.numel();
                f(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]));
            }
        };
        let val = |v: Var| nodes[v.0].value.data();
        let out = nodes[i].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = as_matrix(nodes[a.0].value.shape()).unwrap();
                let n = g.len() / m;
                acc(grads, *a, &mut |d| {
                    T::gemm(m, n, k, T::one(), g, false, val(*b), true, T::one(), d)
                });
                acc(grads, *b, &mut |d| {
                    T::gemm(k, m, n, T::one(), val(*a), true, g, false, T::one(), d)
                });
            }
            Op::Transpose(a) => {
                let (m, n) = as_matrix(nodes[a.0].value.shape()).unwrap();
                acc(grads, *a, &mut |d| {
                    for r in 0..m {
                        for c in 0..n {
                            d[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(grads, *a, &mut |d| add_into(d, g)),
            Op::Add(a, b) => {
                acc(grads, *a, &mut |d| add_into(d, g));
                acc(grads, *b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(grads, *a, &mut |d| add_into(d, g));
                acc(grads, *b, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g));
            }
            Op::Mul(a, b) => {
                acc(grads, *a, &mut |d| {
                    d.iter_mut().zip(g).zip(val(*b)).for_each(|((d, &g), &y)| *d += g * y)
                });
                acc(grads, *b, &mut |d| {
                    d.iter_mut().zip(g).zip(val(*a)).for_each(|((d, &g), &x)| *d += g * x)
                });
            }
            Op::Scale(a, c) => acc(grads, *a, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += *c * g)),
            Op::AddBias(x, bias) => {
                let n = val(*bias).len();
                acc(grads, *x, &mut |d| add_into(d, g));
                acc(grads, *bias, &mut |d| {
                    for row in g.chunks_exact(n) {
                        add_into(d, row);
                    }
                });
            }
            Op::MulCols(x, s) => {
                let n = val(*s).len();
                acc(grads, *x, &mut |d| {
                    for (drow, grow) in d.chunks_exact_mut(n).zip(g.chunks_exact(n)) {
                        for ((d, &g), &ss) in drow.iter_mut().zip(grow).zip(val(*s)) {
                            *d += g * ss;
                        }
                    }
                });
                acc(grads, *s, &mut |d| {
                    for (grow, xrow) in g.chunks_exact(n).zip(val(*x).chunks_exact(n)) {
                        for ((d, &g), &xv) in d.iter_mut().zip(grow).zip(xrow) {
                            *d += g * xv;
                        }
                    }
                });
            }
            Op::MulRows(x, v) => {
                let n = g.len() / val(*v).len();
                acc(grads, *x, &mut |d| {
                    for ((drow, grow), &s) in d.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(val(*v)) {
                        drow.iter_mut().zip(grow).for_each(|(d, &g)| *d += g * s);
                    }
                });
                acc(grads, *v, &mut |d| {
                    for ((dv, grow), xrow) in d.iter_mut().zip(g.chunks_exact(n)).zip(val(*x).chunks_exact(n)) {
                        *dv += grow.iter().zip(xrow).map(|(&a, &b)| a * b).sum::<T>();
                    }
                });
            }
            Op::ChannelAffine(x, gamma, beta) => {
                let c = val(*gamma).len();
                let l = g.len() / c;
                acc(grads, *x, &mut |d| {
                    for ((dp, gp), &s) in d.chunks_exact_mut(l).zip(g.chunks_exact(l)).zip(val(*gamma)) {
                        dp.iter_mut().zip(gp).for_each(|(d, &g)| *d += g * s);
                    }
                });
                acc(grads, *gamma, &mut |d| {
                    for ((dv, gp), xp) in d.iter_mut().zip(g.chunks_exact(l)).zip(val(*x).chunks_exact(l)) {
                        *dv += gp.iter().zip(xp).map(|(&a, &b)| a * b).sum::<T>();
                    }
                });
                acc(grads, *beta, &mut |d| {
                    for (dv, gp) in d.iter_mut().zip(g.chunks_exact(l)) {
                        *dv += gp.iter().copied().sum::<T>();
                    }
                });
            }
            Op::Relu(x) => acc(grads, *x, &mut |d| {
                for ((d, &g), &y) in d.iter_mut().zip(g).zip(out) {
                    if y > T::zero() {
                        *d += g;
                    }
                }
            }),
            Op::Softmax { x, outer, n, inner } => acc(grads, *x, &mut |d| {
                for o in 0..*outer {
                    let base = o * n * inner;
                    for ii in 0..*inner {
                        let at = |j: usize| base + j * inner + ii;
                        let dot: T = (0..*n).map(|j| out[at(j)] * g[at(j)]).sum();
                        for j in 0..*n {
                            d[at(j)] += out[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }),
            Op::Conv2d { x, w, b, geom, cols } => {
                let (kl, l) = (geom.patch_len(), geom.out_len());
                let c_out = g.len() / l;
                acc(grads, *w, &mut |d| {
                    T::gemm(c_out, l, kl, T::one(), g, false, cols, true, T::one(), d)
                });
                if let Some(b) = b {
                    acc(grads, *b, &mut |d| {
                        for (dv, gp) in d.iter_mut().zip(g.chunks_exact(l)) {
                            *dv += gp.iter().copied().sum::<T>();
                        }
                    });
                }
                acc(grads, *x, &mut |d| {
                    let mut dcols = vec![T::zero(); kl * l];
                    T::gemm(kl, c_out, l, T::one(), val(*w), true, g, false, T::zero(), &mut dcols);
                    kernels::col2im(&dcols, geom, d);
                });
            }
            Op::MaxPool2d { x, argmax } => acc(grads, *x, &mut |d| {
                for (&src, &gv) in argmax.iter().zip(g) {
                    d[src] += gv;
                }
            }),
            Op::Dropout { x, mask } => acc(grads, *x, &mut |d| {
                d.iter_mut().zip(g).zip(mask).for_each(|((d, &g), &m)| *d += g * m)
            }),
            Op::Normalize { x, n, rstd } => acc(grads, *x, &mut |d| {
                kernels::normalize_rows_backward(g, out, rstd, *n, d)
            }),
            Op::SliceCols { x, start } => {
                let (_, n) = as_matrix(nodes[x.0].value.shape()).unwrap();
                let len = nodes[i].value.shape()[1];
                acc(grads, *x, &mut |d| {
                    for (drow, grow) in d.chunks_exact_mut(n).zip(g.chunks_exact(len)) {
                        add_into(&mut drow[*start..start + len], grow);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = nodes[i].value.shape()[1];
                let mut offset = 0;
                for p in parts {
                    let w = nodes[p.0].value.shape()[1];
                    acc(grads, *p, &mut |d| {
                        for (drow, grow) in d.chunks_exact_mut(w).zip(g.chunks_exact(total)) {
                            add_into(drow, &grow[offset..offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.numel();
                    acc(grads, *p, &mut |d| add_into(d, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::RowMax { x, argmax } => acc(grads, *x, &mut |d| {
                for (&src, &gv) in argmax.iter().zip(g) {
                    d[src] += gv;
                }
            }),
            Op::MinMax { x, imin, imax, range } => {
                if let Some(r) = range {
                    let inv = T::one() / *r;
                    acc(grads, *x, &mut |d| {
                        let mut dmin = T::zero();
                        let mut dmax = T::zero();
                        for ((d, &gv), &y) in d.iter_mut().zip(g).zip(out) {
                            *d += gv * inv;
                            dmin += gv * (y - T::one()) * inv;
                            dmax -= gv * y * inv;
                        }
                        d[*imin] += dmin;
                        d[*imax] += dmax;
                    });
                }
            }
            Op::Sum(x) => acc(grads, *x, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let n = T::from_usize(nodes[x.0].value.numel()).unwrap();
                acc(grads, *x, &mut |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::Index(x, j) => acc(grads, *x, &mut |d| d[*j] += g[0]),
            Op::Stack(parts) => {
                for (k, p) in parts.iter().enumerate() {
                    acc(grads, *p, &mut |d| d[0] += g[k]);
                }
            }
            Op::Grl(x, lambda) => acc(grads, *x, &mut |d| {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += -*lambda * g)
            }),
            Op::SoftmaxCe {
                logits,
                probs,
                targets,
                weights,
            } => {
                let k = probs.len() / targets.len();
                acc(grads, *logits, &mut |d| {
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == T::zero() {
                            continue;
                        }
                        let s = g[0] * w;
                        for j in 0..k {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            d[r * k + j] += s * (probs[r * k + j] - onehot);
                        }
                    }
                });
            }
            Op::SmoothL1 { pred, target, weights } => {
                let dcols = target.len() / weights.len();
                acc(grads, *pred, &mut |d| {
                    let pv = val(*pred);
                    for (r, &w) in weights.iter().enumerate() {
                        if w == T::zero() {
                            continue;
                        }
                        for j in 0..dcols {
                            let k = r * dcols + j;
                            let diff = (pv[k] - target[k]).max(-T::one()).min(T::one());
                            d[k] += g[0] * w * diff;
                        }
                    }
                });
            }
            Op::DomainBce { probs, target, clamped } => {
                let pv = val(*probs);
                let s = T::from_usize(pv.len()).unwrap();
                acc(grads, *probs, &mut |d| {
                    for ((d, &p), &c) in d.iter_mut().zip(pv).zip(clamped) {
                        if !c {
                            let t = *target;
                            *d += -g[0] / s * (t / p - (T::one() - t) / (T::one() - p));
                        }
                    }
                });
            }
        }
    }
}

fn add_into<T: Scalar>(d: &mut [T], g: &[T]) {
    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
}
