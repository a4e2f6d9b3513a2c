use super::gemm::{gemm, gemm_strided};
use super::param::{Gradients, ParamId, ParamStore};
use super::tensor::quantize;
use super::{KernelError, KernelResult, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar { x: Var, s: Var },
    AddRow { x: Var, b: Var },
    AddCol { x: Var, v: Var },
    MulCol { x: Var, v: Var },
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    MeanLast(Var),
    SumLast(Var),
    SumAll(Var),
    ConvDown2 { x: Var, k: Var },
    DwConvSame { x: Var, k: Var },
    Upsample { x: Var, factor: usize },
    SegmentMean { x: Var, seg: usize },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    NarrowCols { x: Var, start: usize },
    Transpose(Var),
    Reshape(Var),
    Rope { x: Var, heads: usize, positions: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    GatherRows { x: Var, idx: Vec<usize> },
    ReplaceRows { x: Var, token: Var, keep: Vec<bool> },
    SmoothL1 { pred: Var, target: Var },
    CrossEntropy { logits: Var, targets: Tensor, probs: Vec<f64> },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Affine { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            MatMul { a, b } | Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            Scale(x, _) | Gelu(x) | Sigmoid(x) | Softmax(x) | MeanLast(x) | SumLast(x) | SumAll(x)
            | Transpose(x) | Reshape(x) => vec![*x],
            MulScalar { x, s } => vec![*x, *s],
            AddRow { x, b } => vec![*x, *b],
            AddCol { x, v } | MulCol { x, v } => vec![*x, *v],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            ConvDown2 { x, k } | DwConvSame { x, k } => vec![*x, *k],
            Upsample { x, .. } | SegmentMean { x, .. } | SliceRows { x, .. } | NarrowCols { x, .. } | Rope { x, .. } | GatherRows { x, .. } => {
                vec![*x]
            }
            ConcatRows(xs) => xs.clone(),
            Attention { q, k, v, .. } => vec![*q, *k, *v],
            ReplaceRows { x, token, .. } => vec![*x, *token],
            SmoothL1 { pred, target } => vec![*pred, *target],
            CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// Tape of recorded operations over a borrowed [`ParamStore`].
///
/// Parameter leaves read their value from the store; every other node owns
/// its output. A graph is built for one forward pass and then discarded.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Rotary frequency of pair `j` for a head of width `dh`.
pub(crate) fn rope_theta(j: usize, dh: usize) -> f64 {
    10000f64.powf(-2.0 * j as f64 / dh as f64)
}

fn softmax_rows_inplace(data: &mut [f64], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

fn smooth_l1(u: f64) -> f64 {
    if u.abs() < 1.0 {
        0.5 * u * u
    } else {
        u.abs() - 0.5
    }
}

fn smooth_l1_grad(u: f64) -> f64 {
    if u.abs() < 1.0 {
        u
    } else {
        u.signum()
    }
}

fn with_last(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    *s.last_mut().unwrap() = last;
    s
}

fn require_2d(op: &'static str, t: &Tensor) -> KernelResult<(usize, usize)> {
    if t.ndim() != 2 {
        return Err(KernelError::shape(op, format!("expected 2-D input, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self { store, nodes: Vec::with_capacity(256) }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    /// Leaf reading a parameter from the store.
    pub fn param(&mut self, id: ParamId) -> Var {
        let needs_grad = self.store.get(id).trainable;
        self.nodes.push(Node { value: Value::Param(id), op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf holding a value that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: Value::Owned(t), op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Copies `v`'s value into a new constant leaf, stopping gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn push(&mut self, op_name: &'static str, mut t: Tensor, op: Op) -> KernelResult<Var> {
        quantize(t.data_mut());
        if !t.is_finite() {
            return Err(KernelError::NonFinite { op: op_name });
        }
        let needs_grad = op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value: Value::Owned(t), op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- linear algebra -------------------------------------------------

    /// `y = x W + b`, applied over the last axis of `x`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> KernelResult<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (din, dout) = require_2d("affine", wv)?;
        if xv.last_dim() != din {
            return Err(KernelError::shape("affine", format!("x {:?} vs W {:?}", xv.shape(), wv.shape())));
        }
        let n = xv.outer();
        let mut out = vec![0.0; n * dout];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != dout {
                return Err(KernelError::shape("affine", format!("bias {:?} vs out {dout}", bv.shape())));
            }
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm(n, din, dout, xv.data(), false, wv.data(), false, &mut out, if b.is_some() { 1.0 } else { 0.0 });
        let shape = with_last(xv.shape(), dout);
        self.push("affine", Tensor::from_parts(shape, out), Op::Affine { x, w, b })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> KernelResult<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = require_2d("matmul", av)?;
        let (k2, n) = require_2d("matmul", bv)?;
        if k != k2 {
            return Err(KernelError::shape("matmul", format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, 0.0);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b })
    }

    pub fn transpose(&mut self, x: Var) -> KernelResult<Var> {
        let xv = self.value(x);
        let (r, c) = require_2d("transpose", xv)?;
        let src = xv.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push("transpose", Tensor::from_parts(vec![c, r], out), Op::Transpose(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> KernelResult<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push("reshape", t, Op::Reshape(x))
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> KernelResult<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(KernelError::shape(name, format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_parts(av.shape().to_vec(), data);
        self.push(name, t, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> KernelResult<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> KernelResult<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> KernelResult<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> KernelResult<Var> {
        let t = self.value(x).map(|v| v * s);
        self.push("scale", t, Op::Scale(x, s))
    }

    /// Multiplies every element of `x` by the single-element node `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> KernelResult<Var> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(KernelError::shape("mul_scalar", format!("scalar expected, got {:?}", sv.shape())));
        }
        let s0 = sv.data()[0];
        let t = self.value(x).map(|v| v * s0);
        self.push("mul_scalar", t, Op::MulScalar { x, s })
    }

    /// Adds a length-`d` vector to every last-axis slice.
    pub fn add_row(&mut self, x: Var, b: Var) -> KernelResult<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let d = xv.last_dim();
        if bv.len() != d {
            return Err(KernelError::shape("add_row", format!("{:?} + {:?}", xv.shape(), bv.shape())));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(d) {
            for (v, b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push("add_row", t, Op::AddRow { x, b })
    }

    /// Adds `v[r]` to every element of row `r`.
    pub fn add_col(&mut self, x: Var, v: Var) -> KernelResult<Var> {
        let (xv, vv) = (self.value(x), self.value(v));
        let (r, c) = (xv.rows(), xv.cols());
        if vv.len() != r {
            return Err(KernelError::shape("add_col", format!("{:?} + {:?}", xv.shape(), vv.shape())));
        }
        let mut data = xv.data().to_vec();
        for (row, &b) in data.chunks_mut(c).zip(vv.data()) {
            row.iter_mut().for_each(|e| *e += b);
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push("add_col", t, Op::AddCol { x, v })
    }

    /// Multiplies every element of row `r` by `v[r]`.
    pub fn mul_col(&mut self, x: Var, v: Var) -> KernelResult<Var> {
        let (xv, vv) = (self.value(x), self.value(v));
        let (r, c) = (xv.rows(), xv.cols());
        if vv.len() != r {
            return Err(KernelError::shape("mul_col", format!("{:?} * {:?}", xv.shape(), vv.shape())));
        }
        let mut data = xv.data().to_vec();
        for (row, &s) in data.chunks_mut(c).zip(vv.data()) {
            row.iter_mut().for_each(|e| *e *= s);
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push("mul_col", t, Op::MulCol { x, v })
    }

    pub fn gelu(&mut self, x: Var) -> KernelResult<Var> {
        let t = self.value(x).map(gelu);
        self.push("gelu", t, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> KernelResult<Var> {
        let t = self.value(x).map(sigmoid);
        self.push("sigmoid", t, Op::Sigmoid(x))
    }

    /// Softmax over the last axis, stabilised by max subtraction.
    pub fn softmax(&mut self, x: Var) -> KernelResult<Var> {
        let xv = self.value(x);
        let mut data = xv.data().to_vec();
        softmax_rows_inplace(&mut data, xv.last_dim());
        let t = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push("softmax", t, Op::Softmax(x))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> KernelResult<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = xv.last_dim();
        if d < 2 || gv.len() != d || bv.len() != d {
            return Err(KernelError::shape("layer_norm", format!("x {:?}, gamma {:?}", xv.shape(), gv.shape())));
        }
        let rows = xv.outer();
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push("layer_norm", t, Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    // ---- reductions -----------------------------------------------------

    fn reduce_last(&mut self, x: Var, mean: bool) -> KernelResult<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let div = if mean { d as f64 } else { 1.0 };
        let data: Vec<f64> = xv.data().chunks(d).map(|r| r.iter().sum::<f64>() / div).collect();
        let shape = if xv.ndim() > 1 { xv.shape()[..xv.ndim() - 1].to_vec() } else { vec![1] };
        let t = Tensor::from_parts(shape, data);
        if mean {
            self.push("mean_last", t, Op::MeanLast(x))
        } else {
            self.push("sum_last", t, Op::SumLast(x))
        }
    }

    /// Mean over the last axis; the axis is removed.
    pub fn mean_last(&mut self, x: Var) -> KernelResult<Var> {
        self.reduce_last(x, true)
    }

    pub fn sum_last(&mut self, x: Var) -> KernelResult<Var> {
        self.reduce_last(x, false)
    }

    pub fn sum_all(&mut self, x: Var) -> KernelResult<Var> {
        let s = self.value(x).sum();
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> KernelResult<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n)
    }

    // ---- signal ops -----------------------------------------------------

    /// Depthwise correlation with stride 2: `out[c][n] = Σ_u x[c][2n+u]·k[c][u]`,
    /// zero-padded on the right so the output length is exactly `⌊T/2⌋`.
    pub fn conv1d_depthwise_down2(&mut self, x: Var, k: Var) -> KernelResult<Var> {
        let (xv, kv) = (self.value(x), self.value(k));
        let (c, t) = require_2d("conv1d_depthwise_down2", xv)?;
        let (ck, kl) = require_2d("conv1d_depthwise_down2", kv)?;
        if ck != c || kl < 2 {
            return Err(KernelError::shape("conv1d_depthwise_down2", format!("x {:?}, k {:?}", xv.shape(), kv.shape())));
        }
        let n_out = t / 2;
        if n_out == 0 {
            return Err(KernelError::invalid("conv1d_depthwise_down2", format!("signal length {t} < 2")));
        }
        let mut out = vec![0.0; c * n_out];
        for ch in 0..c {
            let xs = &xv.data()[ch * t..(ch + 1) * t];
            let ks = &kv.data()[ch * kl..(ch + 1) * kl];
            for n in 0..n_out {
                let start = 2 * n;
                let end = (start + kl).min(t);
                out[ch * n_out + n] = xs[start..end].iter().zip(ks).map(|(a, b)| a * b).sum();
            }
        }
        self.push("conv1d_depthwise_down2", Tensor::from_parts(vec![c, n_out], out), Op::ConvDown2 { x, k })
    }

    /// Depthwise same-length correlation with an odd kernel centred on each sample.
    pub fn conv1d_depthwise_same(&mut self, x: Var, k: Var) -> KernelResult<Var> {
        let (xv, kv) = (self.value(x), self.value(k));
        let (c, t) = require_2d("conv1d_depthwise_same", xv)?;
        let (ck, kl) = require_2d("conv1d_depthwise_same", kv)?;
        if ck != c || kl % 2 == 0 {
            return Err(KernelError::shape("conv1d_depthwise_same", format!("x {:?}, k {:?}", xv.shape(), kv.shape())));
        }
        let half = kl / 2;
        let mut out = vec![0.0; c * t];
        for ch in 0..c {
            let xs = &xv.data()[ch * t..(ch + 1) * t];
            let ks = &kv.data()[ch * kl..(ch + 1) * kl];
            for n in 0..t {
                let mut acc = 0.0;
                for (u, &kw) in ks.iter().enumerate() {
                    let idx = n + u;
                    if idx >= half && idx - half < t {
                        acc += xs[idx - half] * kw;
                    }
                }
                out[ch * t + n] = acc;
            }
        }
        self.push("conv1d_depthwise_same", Tensor::from_parts(vec![c, t], out), Op::DwConvSame { x, k })
    }

    /// Nearest-neighbour upsampling along the last axis: `out[n] = x[⌊n/f⌋]`.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> KernelResult<Var> {
        if factor == 0 {
            return Err(KernelError::invalid("upsample_nearest", "factor 0".into()));
        }
        let xv = self.value(x);
        let t = xv.last_dim();
        let mut out = Vec::with_capacity(xv.len() * factor);
        for row in xv.data().chunks(t) {
            for &v in row {
                out.extend(std::iter::repeat_n(v, factor));
            }
        }
        let shape = with_last(xv.shape(), t * factor);
        self.push("upsample_nearest", Tensor::from_parts(shape, out), Op::Upsample { x, factor })
    }

    pub fn upsample_nearest2(&mut self, x: Var) -> KernelResult<Var> {
        self.upsample_nearest(x, 2)
    }

    /// Means over consecutive non-overlapping segments of the last axis.
    pub fn segment_mean(&mut self, x: Var, seg: usize) -> KernelResult<Var> {
        let xv = self.value(x);
        let t = xv.last_dim();
        if seg == 0 || !t.is_multiple_of(seg) {
            return Err(KernelError::shape("segment_mean", format!("length {t} not divisible by {seg}")));
        }
        let out: Vec<f64> = xv.data().chunks(seg).map(|s| s.iter().sum::<f64>() / seg as f64).collect();
        let shape = with_last(xv.shape(), t / seg);
        self.push("segment_mean", Tensor::from_parts(shape, out), Op::SegmentMean { x, seg })
    }

    // ---- structural -----------------------------------------------------

    /// Stacks 2-D nodes with equal column counts along the row axis.
    pub fn concat_rows(&mut self, xs: &[Var]) -> KernelResult<Var> {
        if xs.is_empty() {
            return Err(KernelError::invalid("concat_rows", "no inputs".into()));
        }
        let cols = self.value(xs[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &x in xs {
            let v = self.value(x);
            if v.cols() != cols {
                return Err(KernelError::shape("concat_rows", format!("cols {} vs {cols}", v.cols())));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        self.push("concat_rows", Tensor::from_parts(vec![rows, cols], data), Op::ConcatRows(xs.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> KernelResult<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if len == 0 || start + len > r {
            return Err(KernelError::shape("slice_rows", format!("rows {start}..{} of {r}", start + len)));
        }
        let t = Tensor::from_parts(vec![len, c], xv.data()[start * c..(start + len) * c].to_vec());
        self.push("slice_rows", t, Op::SliceRows { x, start })
    }

    /// Columns `start..start + len` of a 2-D node.
    pub fn narrow_cols(&mut self, x: Var, start: usize, len: usize) -> KernelResult<Var> {
        let xv = self.value(x);
        let (r, c) = require_2d("narrow_cols", xv)?;
        if len == 0 || start + len > c {
            return Err(KernelError::shape("narrow_cols", format!("cols {start}..{} of {c}", start + len)));
        }
        let mut data = Vec::with_capacity(r * len);
        for row in xv.data().chunks(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        self.push("narrow_cols", Tensor::from_parts(vec![r, len], data), Op::NarrowCols { x, start })
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> KernelResult<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if idx.is_empty() || idx.iter().any(|&i| i >= r) {
            return Err(KernelError::shape("gather_rows", format!("indices out of range for {r} rows")));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(xv.row(i));
        }
        let t = Tensor::from_parts(vec![idx.len(), c], data);
        self.push("gather_rows", t, Op::GatherRows { x, idx: idx.to_vec() })
    }

    /// Replaces every row `r` with `keep[r] == false` by the vector `token`.
    pub fn replace_rows(&mut self, x: Var, token: Var, keep: &[bool]) -> KernelResult<Var> {
        let (xv, tv) = (self.value(x), self.value(token));
        let (r, c) = (xv.rows(), xv.cols());
        if keep.len() != r || tv.len() != c {
            return Err(KernelError::shape("replace_rows", format!("x {:?}, token {:?}, mask {}", xv.shape(), tv.shape(), keep.len())));
        }
        let mut data = xv.data().to_vec();
        for (row, &k) in data.chunks_mut(c).zip(keep) {
            if !k {
                row.copy_from_slice(tv.data());
            }
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push("replace_rows", t, Op::ReplaceRows { x, token, keep: keep.to_vec() })
    }

    // ---- attention ------------------------------------------------------

    /// Rotates consecutive pairs within each head by `position·θ_j`,
    /// `θ_j = 10000^(-2j/d_head)`.
    pub fn rope(&mut self, x: Var, heads: usize, positions: &[f64]) -> KernelResult<Var> {
        let xv = self.value(x);
        let (n, d) = require_2d("rope", xv)?;
        if heads == 0 || d % heads != 0 || !(d / heads).is_multiple_of(2) {
            return Err(KernelError::shape("rope", format!("width {d} with {heads} heads needs an even head size")));
        }
        if positions.len() != n {
            return Err(KernelError::shape("rope", format!("{} positions for {n} rows", positions.len())));
        }
        let mut out = xv.data().to_vec();
        rotate_pairs(&mut out, d, d / heads, positions, 1.0);
        self.push("rope", Tensor::from_parts(vec![n, d], out), Op::Rope { x, heads, positions: positions.to_vec() })
    }

    /// Multi-head scaled dot-product attention with scale `1/sqrt(d/heads)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> KernelResult<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (nq, d) = require_2d("attention", qv)?;
        let (nk, dk) = require_2d("attention", kv)?;
        if dk != d || vv.shape() != kv.shape() || heads == 0 || d % heads != 0 {
            return Err(KernelError::shape(
                "attention",
                format!("q {:?}, k {:?}, v {:?}, heads {heads}", qv.shape(), kv.shape(), vv.shape()),
            ));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * nq * nk];
        let mut out = vec![0.0; nq * d];
        for h in 0..heads {
            let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
            let off = h * dh;
            gemm_strided(nq, dh, nk, &qv.data()[off..], (d, 1), &kv.data()[off..], (1, d), p, (nk, 1), 0.0);
            p.iter_mut().for_each(|s| *s *= scale);
            softmax_rows_inplace(p, nk);
            gemm_strided(nq, nk, dh, p, (nk, 1), &vv.data()[off..], (d, 1), &mut out[off..], (d, 1), 0.0);
        }
        self.push("attention", Tensor::from_parts(vec![nq, d], out), Op::Attention { q, k, v, heads, probs })
    }

    // ---- losses ---------------------------------------------------------

    /// Mean Smooth-L1 (transition at |u| = 1) over all elements.
    pub fn smooth_l1(&mut self, pred: Var, target: Var) -> KernelResult<Var> {
        let (pv, tv) = (self.value(pred), self.value(target));
        if pv.shape() != tv.shape() {
            return Err(KernelError::shape("smooth_l1", format!("{:?} vs {:?}", pv.shape(), tv.shape())));
        }
        let n = pv.len() as f64;
        let s = pv.data().iter().zip(tv.data()).map(|(p, t)| smooth_l1(p - t)).sum::<f64>() / n;
        self.push("smooth_l1", Tensor::scalar(s), Op::SmoothL1 { pred, target })
    }

    /// Mean cross-entropy of `logits [B, n]` against soft target rows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &Tensor) -> KernelResult<Var> {
        let lv = self.value(logits);
        let n = lv.last_dim();
        if targets.shape() != lv.shape() {
            return Err(KernelError::shape("cross_entropy", format!("{:?} vs {:?}", lv.shape(), targets.shape())));
        }
        let mut probs = lv.data().to_vec();
        softmax_rows_inplace(&mut probs, n);
        let b = lv.outer();
        let mut loss = 0.0;
        for (row, trow) in lv.data().chunks(n).zip(targets.data().chunks(n)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += trow.iter().zip(row).map(|(t, z)| t * (lse - z)).sum::<f64>();
        }
        let t = Tensor::scalar(loss / b as f64);
        self.push("cross_entropy", t, Op::CrossEntropy { logits, targets: targets.clone(), probs })
    }

    // ---- backward -------------------------------------------------------

    /// Reverse pass from a single-element node.
    pub fn backward(&self, loss: Var) -> KernelResult<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(KernelError::shape("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_grads: Vec<Option<Tensor>> = (0..self.store.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if !g.is_finite() {
                return Err(KernelError::NonFinite { op: "backward" });
            }
            if let (Op::Leaf, Value::Param(id)) = (&node.op, &node.value) {
                match &mut param_grads[id.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
                continue;
            }
            self.backprop(i, g, &mut grads);
        }
        Ok(Gradients { params: param_grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(a) => a.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop(&self, i: usize, g: Tensor, grads: &mut [Option<Tensor>]) {
        let out = self.nodes[i].value_owned();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (din, dout) = (wv.shape()[0], wv.shape()[1]);
                let n = xv.outer();
                if self.needs(*x) {
                    let mut dx = vec![0.0; n * din];
                    gemm(n, dout, din, g.data(), false, wv.data(), true, &mut dx, 0.0);
                    self.acc(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; din * dout];
                    gemm(din, n, dout, xv.data(), true, g.data(), false, &mut dw, 0.0);
                    self.acc(grads, *w, Tensor::from_parts(vec![din, dout], dw));
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let bshape = self.value(*b).shape().to_vec();
                        self.acc(grads, *b, Tensor::from_parts(bshape, col_sums(g.data(), dout)));
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), true, &mut da, 0.0);
                    self.acc(grads, *a, Tensor::from_parts(vec![m, k], da));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, g.data(), false, &mut db, 0.0);
                    self.acc(grads, *b, Tensor::from_parts(vec![k, n], db));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *b, g.clone());
                self.acc(grads, *a, g);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *b, g.map(|v| -v));
                self.acc(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = zip_map(&g, bv, |g, y| g * y);
                let db = zip_map(&g, av, |g, x| g * x);
                self.acc(grads, *a, da);
                self.acc(grads, *b, db);
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.acc(grads, *x, g.map(|v| v * s));
            }
            Op::MulScalar { x, s } => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                let s0 = sv.data()[0];
                let ds: f64 = g.data().iter().zip(xv.data()).map(|(g, x)| g * x).sum();
                let sshape = sv.shape().to_vec();
                self.acc(grads, *s, Tensor::from_parts(sshape, vec![ds]));
                self.acc(grads, *x, g.map(|v| v * s0));
            }
            Op::AddRow { x, b } => {
                let bshape = self.value(*b).shape().to_vec();
                let d = g.last_dim();
                self.acc(grads, *b, Tensor::from_parts(bshape, col_sums(g.data(), d)));
                self.acc(grads, *x, g);
            }
            Op::AddCol { x, v } => {
                let vshape = self.value(*v).shape().to_vec();
                let sums = g.data().chunks(g.cols()).map(|r| r.iter().sum()).collect();
                self.acc(grads, *v, Tensor::from_parts(vshape, sums));
                self.acc(grads, *x, g);
            }
            Op::MulCol { x, v } => {
                let (xv, vv) = (self.value(*x), self.value(*v));
                let c = xv.cols();
                let dv = g
                    .data()
                    .chunks(c)
                    .zip(xv.data().chunks(c))
                    .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                    .collect();
                let mut dx = g.into_data();
                for (row, &s) in dx.chunks_mut(c).zip(vv.data()) {
                    row.iter_mut().for_each(|e| *e *= s);
                }
                self.acc(grads, *v, Tensor::from_parts(vv.shape().to_vec(), dv));
                self.acc(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
            }
            Op::Gelu(x) => {
                let dx = zip_map(&g, self.value(*x), |g, x| g * gelu_grad(x));
                self.acc(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = zip_map(&g, out, |g, y| g * y * (1.0 - y));
                self.acc(grads, *x, dx);
            }
            Op::Softmax(x) => {
                let d = out.last_dim();
                let mut dx = vec![0.0; out.len()];
                for ((dr, gr), yr) in dx.chunks_mut(d).zip(g.data().chunks(d)).zip(out.data().chunks(d)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(grads, *x, Tensor::from_parts(out.shape().to_vec(), dx));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gv = self.value(*gamma);
                let d = gv.len();
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dx = vec![0.0; xhat.len()];
                for (r, &rs) in rstd.iter().enumerate() {
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                        let dh = gr[j] * gv.data()[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let dh = gr[j] * gv.data()[j];
                        dx[r * d + j] = rs * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                let xshape = self.value(*x).shape().to_vec();
                self.acc(grads, *gamma, Tensor::from_parts(gv.shape().to_vec(), dgamma));
                self.acc(grads, *beta, Tensor::from_parts(self.value(*beta).shape().to_vec(), dbeta));
                self.acc(grads, *x, Tensor::from_parts(xshape, dx));
            }
            Op::MeanLast(x) | Op::SumLast(x) => {
                let xv = self.value(*x);
                let d = xv.last_dim();
                let div = if matches!(self.nodes[i].op, Op::MeanLast(_)) { d as f64 } else { 1.0 };
                let mut dx = Vec::with_capacity(xv.len());
                for &gv in g.data() {
                    dx.extend(std::iter::repeat_n(gv / div, d));
                }
                self.acc(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
            }
            Op::SumAll(x) => {
                let xv = self.value(*x);
                self.acc(grads, *x, Tensor::full(xv.shape(), g.data()[0]));
            }
            Op::ConvDown2 { x, k } => {
                let (xv, kv) = (self.value(*x), self.value(*k));
                let (c, t) = (xv.shape()[0], xv.shape()[1]);
                let kl = kv.shape()[1];
                let n_out = t / 2;
                let mut dx = vec![0.0; c * t];
                let mut dk = vec![0.0; c * kl];
                for ch in 0..c {
                    let xs = &xv.data()[ch * t..(ch + 1) * t];
                    let ks = &kv.data()[ch * kl..(ch + 1) * kl];
                    let gs = &g.data()[ch * n_out..(ch + 1) * n_out];
                    let dxs = &mut dx[ch * t..(ch + 1) * t];
                    let dks = &mut dk[ch * kl..(ch + 1) * kl];
                    for (n, &gn) in gs.iter().enumerate() {
                        let start = 2 * n;
                        let end = (start + kl).min(t);
                        for (u, idx) in (start..end).enumerate() {
                            dxs[idx] += gn * ks[u];
                            dks[u] += gn * xs[idx];
                        }
                    }
                }
                self.acc(grads, *x, Tensor::from_parts(vec![c, t], dx));
                self.acc(grads, *k, Tensor::from_parts(vec![c, kl], dk));
            }
            Op::DwConvSame { x, k } => {
                let (xv, kv) = (self.value(*x), self.value(*k));
                let (c, t) = (xv.shape()[0], xv.shape()[1]);
                let kl = kv.shape()[1];
                let half = kl / 2;
                let mut dx = vec![0.0; c * t];
                let mut dk = vec![0.0; c * kl];
                for ch in 0..c {
                    for n in 0..t {
                        let gn = g.data()[ch * t + n];
                        for u in 0..kl {
                            let idx = n + u;
                            if idx >= half && idx - half < t {
                                let xi = ch * t + idx - half;
                                dx[xi] += gn * kv.data()[ch * kl + u];
                                dk[ch * kl + u] += gn * xv.data()[xi];
                            }
                        }
                    }
                }
                self.acc(grads, *x, Tensor::from_parts(vec![c, t], dx));
                self.acc(grads, *k, Tensor::from_parts(vec![c, kl], dk));
            }
            Op::Upsample { x, factor } => {
                let xv = self.value(*x);
                let dx = g.data().chunks(*factor).map(|s| s.iter().sum()).collect();
                self.acc(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
            }
            Op::SegmentMean { x, seg } => {
                let xv = self.value(*x);
                let mut dx = Vec::with_capacity(xv.len());
                for &gv in g.data() {
                    dx.extend(std::iter::repeat_n(gv / *seg as f64, *seg));
                }
                self.acc(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let xv = self.value(x);
                    let n = xv.len();
                    let part = Tensor::from_parts(xv.shape().to_vec(), g.data()[offset..offset + n].to_vec());
                    offset += n;
                    self.acc(grads, x, part);
                }
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                dx[start * c..start * c + g.len()].copy_from_slice(g.data());
                self.acc(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
            }
            Op::NarrowCols { x, start } => {
                let xv = self.value(*x);
                let (c, len) = (xv.cols(), g.cols());
                let mut dx = vec![0.0; xv.len()];
                for (drow, grow) in dx.chunks_mut(c).zip(g.data().chunks(len)) {
                    drow[*start..start + len].copy_from_slice(grow);
                }
                self.acc(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
            }
            Op::Transpose(x) => {
                let (r, c) = (g.shape()[0], g.shape()[1]);
                let mut dx = vec![0.0; r * c];
                for a in 0..r {
                    for b in 0..c {
                        dx[b * r + a] = g.data()[a * c + b];
                    }
                }
                self.acc(grads, *x, Tensor::from_parts(vec![c, r], dx));
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.acc(grads, *x, Tensor::from_parts(shape, g.into_data()));
            }
            Op::Rope { x, heads, positions } => {
                let d = g.cols();
                let mut dx = g.data().to_vec();
                rotate_pairs(&mut dx, d, d / heads, positions, -1.0);
                self.acc(grads, *x, Tensor::from_parts(g.shape().to_vec(), dx));
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (nq, d) = (qv.shape()[0], qv.shape()[1]);
                let nk = kv.shape()[0];
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = vec![0.0; nq * d];
                let mut dk = vec![0.0; nk * d];
                let mut dv = vec![0.0; nk * d];
                let mut dp = vec![0.0; nq * nk];
                for h in 0..*heads {
                    let p = &probs[h * nq * nk..(h + 1) * nq * nk];
                    let off = h * dh;
                    gemm_strided(nk, nq, dh, p, (1, nk), &g.data()[off..], (d, 1), &mut dv[off..], (d, 1), 0.0);
                    gemm_strided(nq, dh, nk, &g.data()[off..], (d, 1), &vv.data()[off..], (1, d), &mut dp, (nk, 1), 0.0);
                    for (dr, pr) in dp.chunks_mut(nk).zip(p.chunks(nk)) {
                        let dot: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                        for j in 0..nk {
                            dr[j] = pr[j] * (dr[j] - dot) * scale;
                        }
                    }
                    gemm_strided(nq, nk, dh, &dp, (nk, 1), &kv.data()[off..], (d, 1), &mut dq[off..], (d, 1), 0.0);
                    gemm_strided(nk, nq, dh, &dp, (1, nk), &qv.data()[off..], (d, 1), &mut dk[off..], (d, 1), 0.0);
                }
                self.acc(grads, *q, Tensor::from_parts(vec![nq, d], dq));
                self.acc(grads, *k, Tensor::from_parts(vec![nk, d], dk));
                self.acc(grads, *v, Tensor::from_parts(vec![nk, d], dv));
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                for (j, &r) in idx.iter().enumerate() {
                    for (a, b) in dx[r * c..(r + 1) * c].iter_mut().zip(&g.data()[j * c..(j + 1) * c]) {
                        *a += b;
                    }
                }
                self.acc(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
            }
            Op::ReplaceRows { x, token, keep } => {
                let tv = self.value(*token);
                let c = tv.len();
                let mut dtok = vec![0.0; c];
                let mut dx = g.into_data();
                for (row, &k) in dx.chunks_mut(c).zip(keep) {
                    if !k {
                        for (a, b) in dtok.iter_mut().zip(row.iter()) {
                            *a += b;
                        }
                        row.iter_mut().for_each(|e| *e = 0.0);
                    }
                }
                self.acc(grads, *token, Tensor::from_parts(tv.shape().to_vec(), dtok));
                let xshape = self.value(*x).shape().to_vec();
                self.acc(grads, *x, Tensor::from_parts(xshape, dx));
            }
            Op::SmoothL1 { pred, target } => {
                let (pv, tv) = (self.value(*pred), self.value(*target));
                let s = g.data()[0] / pv.len() as f64;
                let dp = zip_map(pv, tv, |p, t| s * smooth_l1_grad(p - t));
                self.acc(grads, *target, dp.map(|v| -v));
                self.acc(grads, *pred, dp);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let lv = self.value(*logits);
                let b = lv.outer() as f64;
                let s = g.data()[0] / b;
                let dl = probs.iter().zip(targets.data()).map(|(p, t)| s * (p - t)).collect();
                self.acc(grads, *logits, Tensor::from_parts(lv.shape().to_vec(), dl));
            }
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }
}

impl Node {
    fn value_owned(&self) -> &Tensor {
        match &self.value {
            Value::Owned(t) => t,
            Value::Param(_) => unreachable!("parameter leaves carry no op"),
        }
    }
}

fn col_sums(data: &[f64], d: usize) -> Vec<f64> {
    let mut s = vec![0.0; d];
    for row in data.chunks(d) {
        for (a, b) in s.iter_mut().zip(row) {
            *a += b;
        }
    }
    s
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn rotate_pairs(data: &mut [f64], d: usize, dh: usize, positions: &[f64], sign: f64) {
    let thetas: Vec<f64> = (0..dh / 2).map(|j| rope_theta(j, dh)).collect();
    for (row, &pos) in data.chunks_mut(d).zip(positions) {
        let rot: Vec<(f64, f64)> = thetas.iter().map(|&t| (pos * t).sin_cos()).collect();
        for head in row.chunks_mut(dh) {
            for (j, &(s, c)) in rot.iter().enumerate() {
                let s = sign * s;
                let (x0, x1) = (head[2 * j], head[2 * j + 1]);
                head[2 * j] = x0 * c - x1 * s;
                head[2 * j + 1] = x0 * s + x1 * c;
            }
        }
    }
}
