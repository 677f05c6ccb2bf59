//! Dynamic computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order; backward walks it once in reverse.

use crate::autodiff::param::{ParamId, ParamStore};
use crate::error::TensorError;
use crate::tensor::{matmul_nt_acc, matmul_raw, matmul_tn_acc, transpose_raw, Tensor};

type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise unary operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Sigmoid,
    Exp,
    Log,
    Abs,
}

/// Pointwise binary operations over equal shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Unary(Unary, NodeId),
    Binary(Binary, NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    ClampMin(NodeId, f64),
    AddRow(NodeId, NodeId),
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        pad: usize,
        cols: Vec<f64>,
    },
    Norm {
        input: NodeId,
        gain: NodeId,
        bias: NodeId,
        axis: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(NodeId, usize),
    LogSoftmax(NodeId, usize),
    SliceCols {
        input: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    SelectRows(NodeId, Vec<usize>),
    Gather(NodeId, Vec<usize>),
    Sum(NodeId),
    Mean(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Unary(Unary::Relu, _) => "relu",
            Op::Unary(Unary::Sigmoid, _) => "sigmoid",
            Op::Unary(Unary::Exp, _) => "exp",
            Op::Unary(Unary::Log, _) => "log",
            Op::Unary(Unary::Abs, _) => "abs",
            Op::Binary(Binary::Add, ..) => "add",
            Op::Binary(Binary::Sub, ..) => "sub",
            Op::Binary(Binary::Mul, ..) => "mul",
            Op::Binary(Binary::Div, ..) => "div",
            Op::Binary(Binary::Min, ..) => "min",
            Op::Binary(Binary::Max, ..) => "max",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::ClampMin(..) => "clamp_min",
            Op::AddRow(..) => "add_row",
            Op::Conv2d { .. } => "conv2d",
            Op::Norm { .. } => "norm",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::SelectRows(..) => "select_rows",
            Op::Gather(..) => "gather",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// A per-forward-pass computation graph.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

/// Output geometry of a 2-D convolution.
pub fn conv_output_size(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    t.dims2().ok_or_else(|| TensorError::Rank {
        op,
        expected: 2,
        shape: t.shape().to_vec(),
    })
}

/// `(outer, axis_len, inner)` strides for an axis.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn softmax_forward(x: &Tensor, axis: usize, log: bool) -> Tensor {
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            let max = (0..n).map(|k| src[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for k in 0..n {
                sum += (src[idx(k)] - max).exp();
            }
            if log {
                let lse = sum.ln();
                for k in 0..n {
                    out[idx(k)] = src[idx(k)] - max - lse;
                }
            } else {
                for k in 0..n {
                    out[idx(k)] = (src[idx(k)] - max).exp() / sum;
                }
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

fn grad_buf<'a>(nodes: &[Node], grads: &'a mut [Option<Tensor>], id: NodeId) -> &'a mut [f64] {
    grads[id.0]
        .get_or_insert_with(|| Tensor::zeros(nodes[id.0].value.shape()))
        .data_mut()
}

/// Output positions `o` in `0..n_out` for which `o * stride + k - pad` lies in `0..n_in`.
fn valid_range(n_in: usize, n_out: usize, k: usize, stride: usize, pad: usize) -> std::ops::Range<usize> {
    let lo = pad.saturating_sub(k).div_ceil(stride);
    let hi = if n_in + pad > k {
        ((n_in + pad - k - 1) / stride + 1).min(n_out)
    } else {
        0
    };
    lo..hi.max(lo)
}

fn im2col(
    x: &[f64],
    (c_in, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    (ho, wo): (usize, usize),
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let cols_n = ho * wo;
    let mut cols = vec![0.0; c_in * kh * kw * cols_n];
    for ci in 0..c_in {
        for ki in 0..kh {
            let ys = valid_range(h, ho, ki, stride, pad);
            for kj in 0..kw {
                let xs = valid_range(w, wo, kj, stride, pad);
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                for oy in ys.clone() {
                    let iy = oy * stride + ki - pad;
                    let src_row = &x[(ci * h + iy) * w..(ci * h + iy + 1) * w];
                    let d = &mut dst[oy * wo..(oy + 1) * wo];
                    if stride == 1 {
                        let off = kj as isize - pad as isize;
                        let (a, b) = (xs.start, xs.end);
                        let s0 = (a as isize + off) as usize;
                        d[a..b].copy_from_slice(&src_row[s0..s0 + (b - a)]);
                    } else {
                        for ox in xs.clone() {
                            d[ox] = src_row[ox * stride + kj - pad];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_acc(
    cols: &[f64],
    (c_in, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    (ho, wo): (usize, usize),
    stride: usize,
    pad: usize,
    out: &mut [f64],
) {
    let cols_n = ho * wo;
    for ci in 0..c_in {
        for ki in 0..kh {
            let ys = valid_range(h, ho, ki, stride, pad);
            for kj in 0..kw {
                let xs = valid_range(w, wo, kj, stride, pad);
                let row = (ci * kh + ki) * kw + kj;
                let src = &cols[row * cols_n..(row + 1) * cols_n];
                for oy in ys.clone() {
                    let iy = oy * stride + ki - pad;
                    let base = (ci * h + iy) * w;
                    let s = &src[oy * wo..(oy + 1) * wo];
                    for ox in xs.clone() {
                        out[base + ox * stride + kj - pad] += s[ox];
                    }
                }
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward pass with respect to this node, if it was reached.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    /// Inputs of a node (empty for leaves).
    pub fn parents(&self, id: NodeId) -> Vec<NodeId> {
        match &self.nodes[id.0].op {
            Op::Input | Op::Param(_) => vec![],
            Op::MatMul(a, b) | Op::Binary(_, a, b) | Op::AddRow(a, b) => vec![*a, *b],
            Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
            Op::Norm { input, gain, bias, .. } => vec![*input, *gain, *bias],
            Op::ConcatCols(parts) => parts.clone(),
            Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Unary(_, a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::ClampMin(a, _)
            | Op::Softmax(a, _)
            | Op::LogSoftmax(a, _)
            | Op::SliceCols { input: a, .. }
            | Op::SelectRows(a, _)
            | Op::Gather(a, _)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
        }
    }

    /// A constant leaf.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input)
    }

    /// A leaf bound to a trainable parameter; backward accumulates into the store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let value = store.get(id).value.clone();
        self.push(value, Op::Param(id))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = rank2("matmul", av)?;
        let (k2, n) = rank2("matmul", bv)?;
        if k != k2 {
            return Err(mismatch("matmul", av, bv));
        }
        let out = matmul_raw(av.data(), bv.data(), m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let (r, c) = rank2("transpose", av)?;
        let out = transpose_raw(av.data(), r, c);
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    pub fn unary(&mut self, kind: Unary, a: NodeId) -> NodeId {
        let f: fn(f64) -> f64 = match kind {
            Unary::Relu => |x| x.max(0.0),
            Unary::Sigmoid => |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Abs => f64::abs,
        };
        let v = self.value(a).map(f);
        self.push(v, Op::Unary(kind, a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Relu, a)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Log, a)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Abs, a)
    }

    pub fn binary(&mut self, kind: Binary, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch(
                match kind {
                    Binary::Add => "add",
                    Binary::Sub => "sub",
                    Binary::Mul => "mul",
                    Binary::Div => "div",
                    Binary::Min => "min",
                    Binary::Max => "max",
                },
                av,
                bv,
            ));
        }
        let f: fn(f64, f64) -> f64 = match kind {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
            Binary::Div => |x, y| x / y,
            Binary::Min => |x, y| if x <= y { x } else { y },
            Binary::Max => |x, y| if x >= y { x } else { y },
        };
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let v = Tensor::from_parts(av.shape().to_vec(), data);
        Ok(self.push(v, Op::Binary(kind, a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Div, a, b)
    }

    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Min, a, b)
    }

    pub fn maximum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Max, a, b)
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    /// `max(x, floor)` elementwise; gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, a: NodeId, floor: f64) -> NodeId {
        let v = self.value(a).map(|x| x.max(floor));
        self.push(v, Op::ClampMin(a, floor))
    }

    /// Adds a length-`n` vector to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (av, rv) = (self.value(a), self.value(row));
        let (m, n) = rank2("add_row", av)?;
        if rv.numel() != n || rv.ndim() != 1 {
            return Err(mismatch("add_row", av, rv));
        }
        let mut data = av.data().to_vec();
        for r in 0..m {
            for (x, b) in data[r * n..(r + 1) * n].iter_mut().zip(rv.data()) {
                *x += b;
            }
        }
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::AddRow(a, row)))
    }

    /// Cross-correlation of a `[C_in, H, W]` input with a `[C_out, C_in, kh, kw]` kernel.
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let (xv, kv) = (self.value(input), self.value(kernel));
        let &[c_in, h, w] = xv.shape() else {
            return Err(TensorError::Rank {
                op: "conv2d",
                expected: 3,
                shape: xv.shape().to_vec(),
            });
        };
        let &[c_out, kc, kh, kw] = kv.shape() else {
            return Err(TensorError::Rank {
                op: "conv2d",
                expected: 4,
                shape: kv.shape().to_vec(),
            });
        };
        if kc != c_in {
            return Err(mismatch("conv2d", xv, kv));
        }
        if stride == 0 {
            return Err(TensorError::ZeroStride);
        }
        let (Some(ho), Some(wo)) = (
            conv_output_size(h, kh, stride, pad),
            conv_output_size(w, kw, stride, pad),
        ) else {
            return Err(TensorError::KernelTooLarge {
                kernel: kv.shape().to_vec(),
                input: xv.shape().to_vec(),
                pad,
            });
        };
        let cols = im2col(xv.data(), (c_in, h, w), (kh, kw), (ho, wo), stride, pad);
        let out = matmul_raw(kv.data(), &cols, c_out, c_in * kh * kw, ho * wo);
        Ok(self.push(
            Tensor::from_parts(vec![c_out, ho, wo], out),
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
                cols,
            },
        ))
    }

    /// Layer normalization over the last axis with per-feature gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let axis = self.value(x).ndim() - 1;
        self.norm_axis("layer_norm", x, gain, bias, axis, eps)
    }

    /// Normalizes a `[C, H, W]` map across channels independently at every
    /// spatial position, then applies a per-channel affine.
    pub fn channel_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.ndim() != 3 {
            return Err(TensorError::Rank {
                op: "channel_norm",
                expected: 3,
                shape: xv.shape().to_vec(),
            });
        }
        self.norm_axis("channel_norm", x, gain, bias, 0, eps)
    }

    fn norm_axis(
        &mut self,
        op: &'static str,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        axis: usize,
        eps: f64,
    ) -> Result<NodeId> {
        let xv = self.value(x);
        let (outer, n, inner) = axis_split(xv.shape(), axis);
        for p in [gain, bias] {
            let pv = self.value(p);
            if pv.numel() != n {
                return Err(TensorError::LengthMismatch {
                    op,
                    expected: n,
                    got: pv.numel(),
                });
            }
        }
        let src = xv.data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; outer * inner];
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let mean = (0..n).map(|k| src[idx(k)]).sum::<f64>() / n as f64;
                let var = (0..n).map(|k| (src[idx(k)] - mean).powi(2)).sum::<f64>() / n as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[o * inner + i] = is;
                for k in 0..n {
                    let xh = (src[idx(k)] - mean) * is;
                    xhat[idx(k)] = xh;
                    out[idx(k)] = xh * g[k] + b[k];
                }
            }
        }
        let shape = xv.shape().to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Norm {
                input: x,
                gain,
                bias,
                axis,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if axis >= xv.ndim() {
            return Err(TensorError::InvalidAxis {
                axis,
                shape: xv.shape().to_vec(),
            });
        }
        let v = softmax_forward(xv, axis, false);
        Ok(self.push(v, Op::Softmax(x, axis)))
    }

    pub fn log_softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if axis >= xv.ndim() {
            return Err(TensorError::InvalidAxis {
                axis,
                shape: xv.shape().to_vec(),
            });
        }
        let v = softmax_forward(xv, axis, true);
        Ok(self.push(v, Op::LogSoftmax(x, axis)))
    }

    /// Columns `start..start+len` of an `[m, n]` matrix.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let (m, n) = rank2("slice_cols", xv)?;
        if len == 0 || start + len > n {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                size: n,
            });
        }
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&xv.data()[r * n + start..r * n + start + len]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![m, len], data),
            Op::SliceCols { input: x, start },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::EmptySelection { op: "concat_cols" });
        };
        let (m, _) = rank2("concat_cols", self.value(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let pv = self.value(p);
            let (pm, pn) = rank2("concat_cols", pv)?;
            if pm != m {
                return Err(mismatch("concat_cols", self.value(first), pv));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&p, &pw) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * pw..(r + 1) * pw]);
            }
        }
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::ConcatCols(parts.to_vec())))
    }

    /// Gathers rows of an `[m, n]` matrix (rows may repeat).
    pub fn select_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let xv = self.value(x);
        let (m, n) = rank2("select_rows", xv)?;
        if rows.is_empty() {
            return Err(TensorError::EmptySelection { op: "select_rows" });
        }
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(TensorError::IndexOutOfRange {
                    op: "select_rows",
                    index: r,
                    size: m,
                });
            }
            data.extend_from_slice(xv.row(r));
        }
        Ok(self.push(
            Tensor::from_parts(vec![rows.len(), n], data),
            Op::SelectRows(x, rows.to_vec()),
        ))
    }

    /// Picks one column per row of an `[m, n]` matrix, giving `[m]`.
    pub fn gather(&mut self, x: NodeId, cols: &[usize]) -> Result<NodeId> {
        let xv = self.value(x);
        let (m, n) = rank2("gather", xv)?;
        if cols.len() != m {
            return Err(TensorError::LengthMismatch {
                op: "gather",
                expected: m,
                got: cols.len(),
            });
        }
        let mut data = Vec::with_capacity(m);
        for (r, &c) in cols.iter().enumerate() {
            if c >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather",
                    index: c,
                    size: n,
                });
            }
            data.push(xv.data()[r * n + c]);
        }
        Ok(self.push(Tensor::from_parts(vec![m], data), Op::Gather(x, cols.to_vec())))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let s = v.sum() / v.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Affine map `x W + b` for `x: [m, in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let y = self.matmul(x, weight)?;
        self.add_row(y, bias)
    }

    /// Reverse pass from a scalar node.
    ///
    /// Node gradients from any previous pass are discarded first. Parameter
    /// gradients are added onto whatever the store already holds, so callers
    /// zero the store between optimizer steps. Returns the number of nodes visited.
    pub fn backward(&mut self, loss: NodeId, store: &mut ParamStore) -> Result<usize> {
        let shape = self.value(loss).shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(Tensor::full(&shape, 1.0));
        let mut visited = 0;
        for i in (0..=loss.0).rev() {
            let Some(grad) = self.grads[i].take() else {
                continue;
            };
            visited += 1;
            self.propagate(i, &grad, store);
            self.grads[i] = Some(grad);
        }
        Ok(visited)
    }

    fn propagate(&mut self, i: usize, g: &Tensor, store: &mut ParamStore) {
        let (nodes, grads) = (&self.nodes, &mut self.grads);
        let node = &nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Input => {}
            Op::Param(pid) => store.accumulate_grad(*pid, g),
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k) = av.dims2().unwrap();
                let n = bv.shape()[1];
                matmul_nt_acc(gd, bv.data(), m, n, k, grad_buf(nodes, grads, *a));
                matmul_tn_acc(av.data(), gd, m, k, n, grad_buf(nodes, grads, *b));
            }
            Op::Transpose(a) => {
                let (r, c) = nodes[a.0].value.dims2().unwrap();
                let t = transpose_raw(gd, c, r);
                for (o, v) in grad_buf(nodes, grads, *a).iter_mut().zip(t) {
                    *o += v;
                }
            }
            Op::Reshape(a) | Op::AddScalar(a) => {
                for (o, v) in grad_buf(nodes, grads, *a).iter_mut().zip(gd) {
                    *o += v;
                }
            }
            Op::Unary(kind, a) => {
                let x = nodes[a.0].value.data();
                let y = node.value.data();
                let out = grad_buf(nodes, grads, *a);
                for j in 0..out.len() {
                    out[j] += gd[j]
                        * match kind {
                            Unary::Relu => {
                                if x[j] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Sigmoid => y[j] * (1.0 - y[j]),
                            Unary::Exp => y[j],
                            Unary::Log => 1.0 / x[j],
                            Unary::Abs => {
                                if x[j] > 0.0 {
                                    1.0
                                } else if x[j] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                }
            }
            Op::Binary(kind, a, b) => {
                let x = nodes[a.0].value.data().to_vec();
                let y = nodes[b.0].value.data().to_vec();
                let (ga, gb): (Vec<f64>, Vec<f64>) = (0..gd.len())
                    .map(|j| {
                        let (xa, yb, gj) = (x[j], y[j], gd[j]);
                        match kind {
                            Binary::Add => (gj, gj),
                            Binary::Sub => (gj, -gj),
                            Binary::Mul => (gj * yb, gj * xa),
                            Binary::Div => (gj / yb, -gj * xa / (yb * yb)),
                            Binary::Min => {
                                if xa <= yb {
                                    (gj, 0.0)
                                } else {
                                    (0.0, gj)
                                }
                            }
                            Binary::Max => {
                                if xa >= yb {
                                    (gj, 0.0)
                                } else {
                                    (0.0, gj)
                                }
                            }
                        }
                    })
                    .unzip();
                for (o, v) in grad_buf(nodes, grads, *a).iter_mut().zip(ga) {
                    *o += v;
                }
                for (o, v) in grad_buf(nodes, grads, *b).iter_mut().zip(gb) {
                    *o += v;
                }
            }
            Op::Scale(a, c) => {
                for (o, v) in grad_buf(nodes, grads, *a).iter_mut().zip(gd) {
                    *o += v * c;
                }
            }
            Op::ClampMin(a, floor) => {
                let x = nodes[a.0].value.data();
                let out = grad_buf(nodes, grads, *a);
                for j in 0..out.len() {
                    if x[j] > *floor {
                        out[j] += gd[j];
                    }
                }
            }
            Op::AddRow(a, row) => {
                for (o, v) in grad_buf(nodes, grads, *a).iter_mut().zip(gd) {
                    *o += v;
                }
                let rb = grad_buf(nodes, grads, *row);
                let n = rb.len();
                for (j, v) in gd.iter().enumerate() {
                    rb[j % n] += v;
                }
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
                cols,
            } => {
                let (xv, kv) = (&nodes[input.0].value, &nodes[kernel.0].value);
                let &[c_in, h, w] = xv.shape() else { unreachable!() };
                let &[c_out, _, kh, kw] = kv.shape() else {
                    unreachable!()
                };
                let &[_, ho, wo] = node.value.shape() else {
                    unreachable!()
                };
                let ckk = c_in * kh * kw;
                matmul_nt_acc(gd, cols, c_out, ho * wo, ckk, grad_buf(nodes, grads, *kernel));
                let mut dcols = vec![0.0; ckk * ho * wo];
                matmul_tn_acc(kv.data(), gd, c_out, ckk, ho * wo, &mut dcols);
                col2im_acc(
                    &dcols,
                    (c_in, h, w),
                    (kh, kw),
                    (ho, wo),
                    *stride,
                    *pad,
                    grad_buf(nodes, grads, *input),
                );
            }
            Op::Norm {
                input,
                gain,
                bias,
                axis,
                xhat,
                inv_std,
            } => {
                let gain_v = nodes[gain.0].value.data().to_vec();
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                {
                    let gg = grad_buf(nodes, grads, *gain);
                    for (j, (&gj, &xh)) in gd.iter().zip(xhat).enumerate() {
                        gg[(j / inner) % n] += gj * xh;
                    }
                }
                {
                    let gb = grad_buf(nodes, grads, *bias);
                    for (j, &gj) in gd.iter().enumerate() {
                        gb[(j / inner) % n] += gj;
                    }
                }
                let gx = grad_buf(nodes, grads, *input);
                let len = n as f64;
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        let is = inv_std[o * inner + i];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for k in 0..n {
                            let dxh = gd[idx(k)] * gain_v[k];
                            s1 += dxh;
                            s2 += dxh * xhat[idx(k)];
                        }
                        for k in 0..n {
                            let dxh = gd[idx(k)] * gain_v[k];
                            gx[idx(k)] += is / len * (len * dxh - s1 - xhat[idx(k)] * s2);
                        }
                    }
                }
            }
            Op::Softmax(a, axis) | Op::LogSoftmax(a, axis) => {
                let is_log = matches!(node.op, Op::LogSoftmax(..));
                let y = node.value.data();
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                let out = grad_buf(nodes, grads, *a);
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        if is_log {
                            let gs: f64 = (0..n).map(|k| gd[idx(k)]).sum();
                            for k in 0..n {
                                out[idx(k)] += gd[idx(k)] - y[idx(k)].exp() * gs;
                            }
                        } else {
                            let dot: f64 = (0..n).map(|k| gd[idx(k)] * y[idx(k)]).sum();
                            for k in 0..n {
                                out[idx(k)] += y[idx(k)] * (gd[idx(k)] - dot);
                            }
                        }
                    }
                }
            }
            Op::SliceCols { input, start } => {
                let n = nodes[input.0].value.shape()[1];
                let (m, len) = node.value.dims2().unwrap();
                let out = grad_buf(nodes, grads, *input);
                for r in 0..m {
                    for c in 0..len {
                        out[r * n + start + c] += gd[r * len + c];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = node.value.dims2().unwrap();
                let mut offset = 0;
                for p in parts {
                    let pw = nodes[p.0].value.shape()[1];
                    let out = grad_buf(nodes, grads, *p);
                    for r in 0..m {
                        for c in 0..pw {
                            out[r * pw + c] += gd[r * n + offset + c];
                        }
                    }
                    offset += pw;
                }
            }
            Op::SelectRows(a, rows) => {
                let n = node.value.shape()[1];
                let out = grad_buf(nodes, grads, *a);
                for (k, &r) in rows.iter().enumerate() {
                    for c in 0..n {
                        out[r * n + c] += gd[k * n + c];
                    }
                }
            }
            Op::Gather(a, cols) => {
                let n = nodes[a.0].value.shape()[1];
                let out = grad_buf(nodes, grads, *a);
                for (r, &c) in cols.iter().enumerate() {
                    out[r * n + c] += gd[r];
                }
            }
            Op::Sum(a) => {
                for o in grad_buf(nodes, grads, *a).iter_mut() {
                    *o += gd[0];
                }
            }
            Op::Mean(a) => {
                let out = grad_buf(nodes, grads, *a);
                let s = gd[0] / out.len() as f64;
                for o in out.iter_mut() {
                    *o += s;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamGroup;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let i2 = g.input(Tensor::eye(2));
        let a = g.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.input(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let ia = g.matmul(i2, a).unwrap();
        assert_eq!(g.value(ia).data(), &[1.0, 2.0, 3.0, 4.0]);
        let ab = g.matmul(a, b).unwrap();
        assert_eq!(g.value(ab).data(), &[19.0, 22.0, 43.0, 50.0]);
        let x = g.input(Tensor::zeros(&[2, 3]));
        let err = g.matmul(x, x).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn conv2d_examples() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[1, 3, 3], 1.0));
        let k = g.input(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1]);
        assert_eq!(g.value(y).item(), 9.0);
        let y = g.conv2d(x, k, 1, 1).unwrap();
        assert_eq!(g.value(y).data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
        let x4 = g.input(Tensor::full(&[1, 4, 4], 1.0));
        let k2 = g.input(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = g.conv2d(x4, k2, 2, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 2, 2]);
        let big = g.input(Tensor::full(&[1, 1, 5, 5], 1.0));
        assert!(matches!(
            g.conv2d(x, big, 1, 0),
            Err(TensorError::KernelTooLarge { .. })
        ));
        assert!(g.conv2d(x, big, 1, 1).is_ok());
    }

    #[test]
    fn conv2d_matches_direct_loops() {
        let mut seed = 7u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (seed >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for (c_in, c_out, h, w, k, stride, pad) in [
            (2, 3, 5, 7, 3, 1, 1),
            (1, 2, 6, 6, 3, 2, 1),
            (3, 1, 7, 5, 2, 3, 2),
            (2, 2, 4, 4, 1, 1, 0),
            (1, 1, 3, 3, 3, 2, 2),
        ] {
            let x: Vec<f64> = (0..c_in * h * w).map(|_| next()).collect();
            let kern: Vec<f64> = (0..c_out * c_in * k * k).map(|_| next()).collect();
            let ho = conv_output_size(h, k, stride, pad).unwrap();
            let wo = conv_output_size(w, k, stride, pad).unwrap();
            let mut direct = vec![0.0; c_out * ho * wo];
            for co in 0..c_out {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = 0.0;
                        for ci in 0..c_in {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        s += kern[((co * c_in + ci) * k + ki) * k + kj]
                                            * x[(ci * h + iy as usize) * w + ix as usize];
                                    }
                                }
                            }
                        }
                        direct[(co * ho + oy) * wo + ox] = s;
                    }
                }
            }
            let mut g = Graph::new();
            let xi = g.input(Tensor::new(&[c_in, h, w], x).unwrap());
            let ki = g.input(Tensor::new(&[c_out, c_in, k, k], kern).unwrap());
            let y = g.conv2d(xi, ki, stride, pad).unwrap();
            for (a, b) in g.value(y).data().iter().zip(&direct) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let z = g.input(Tensor::zeros(&[3]));
        let s = g.softmax(z, 0).unwrap();
        for &p in g.value(s).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.input(t(&[3], &[1.0, 2.0, 3.0]));
        let s = g.softmax(x, 0).unwrap();
        let expected = [0.09003, 0.24473, 0.66524];
        for (p, e) in g.value(s).data().iter().zip(expected) {
            assert!((p - e).abs() < 1e-5);
        }
        let xs = g.input(t(&[3], &[1001.0, 1002.0, 1003.0]));
        let ss = g.softmax(xs, 0).unwrap();
        for (p, q) in g.value(ss).data().iter().zip(g.value(s).data()) {
            assert!((p - q).abs() < 1e-12);
        }
        assert!(matches!(g.softmax(x, 1), Err(TensorError::InvalidAxis { .. })));
    }

    #[test]
    fn softmax_along_first_axis() {
        let mut g = Graph::new();
        let x = g.input(t(&[2, 2], &[0.0, 5.0, 0.0, 1.0]));
        let s = g.softmax(x, 0).unwrap();
        let v = g.value(s);
        assert!((v.at(&[0, 0]) - 0.5).abs() < 1e-15);
        assert!((v.at(&[0, 1]) + v.at(&[1, 1]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let one = g.input(Tensor::full(&[2], 1.0));
        let zero = g.input(Tensor::zeros(&[2]));
        let c = g.input(t(&[1, 2], &[3.0, 3.0]));
        let y = g.layer_norm(c, one, zero, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);
        let x = g.input(t(&[1, 2], &[1.0, 3.0]));
        let y = g.layer_norm(x, one, zero, 1e-5).unwrap();
        assert!((g.value(y).data()[0] + 1.0).abs() < 1e-4);
        assert!((g.value(y).data()[1] - 1.0).abs() < 1e-4);
        let five = g.input(Tensor::full(&[2], 5.0));
        let y = g.layer_norm(x, zero, five, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, 5.0]);
        let short = g.input(Tensor::full(&[3], 1.0));
        assert!(matches!(
            g.layer_norm(x, short, zero, 1e-5),
            Err(TensorError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let x = g.input(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = g.input(Tensor::scalar(0.0));
        let s = g.sigmoid(z);
        assert_eq!(g.value(s).item(), 0.5);
        let a = g.input(t(&[2], &[2.0, 3.0]));
        let b = g.input(t(&[2], &[4.0, 5.0]));
        let m = g.mul(a, b).unwrap();
        assert_eq!(g.value(m).data(), &[8.0, 15.0]);
        assert!(g.add(a, x).is_err());
        let big = g.input(t(&[2], &[-800.0, 800.0]));
        let s = g.sigmoid(big);
        assert!(g.value(s).all_finite());
    }

    #[test]
    fn backward_square_sum() {
        let mut store = ParamStore::new();
        let pid = store.add("x", ParamGroup::Head, t(&[3], &[1.0, 2.0, 3.0]));
        let mut g = Graph::new();
        let x = g.param(&store, pid);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(pid).grad.as_ref().unwrap().data(), &[2.0, 4.0, 6.0]);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(pid).grad.as_ref().unwrap().data(), &[4.0, 8.0, 12.0]);
        store.zero_grad();
        assert_eq!(store.get(pid).grad.as_ref().unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut store = ParamStore::new();
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2]));
        assert_eq!(g.backward(x, &mut store), Err(TensorError::NonScalarLoss(vec![2])));
    }

    #[test]
    fn backward_visits_each_node_once() {
        let mut store = ParamStore::new();
        let pid = store.add("w", ParamGroup::Head, t(&[2], &[0.5, -1.5]));
        let mut g = Graph::new();
        let w = g.param(&store, pid);
        let a = g.mul(w, w).unwrap();
        let b = g.add(a, w).unwrap();
        let c = g.mul(b, a).unwrap();
        let d = g.add(c, b).unwrap();
        let loss = g.sum(d);
        let visited = g.backward(loss, &mut store).unwrap();
        assert_eq!(visited, g.len());
        for id in 0..g.len() {
            for p in g.parents(NodeId(id)) {
                assert!(p.0 < id, "parents precede children");
            }
        }
    }

    #[test]
    fn unreached_nodes_have_no_grad() {
        let mut store = ParamStore::new();
        let mut g = Graph::new();
        let a = g.input(Tensor::scalar(1.0));
        let side = g.input(Tensor::scalar(2.0));
        let loss = g.scale(a, 3.0);
        assert_eq!(g.backward(loss, &mut store).unwrap(), 2);
        assert!(g.grad(side).is_none());
        assert_eq!(g.grad(a).unwrap().item(), 3.0);
    }
}
