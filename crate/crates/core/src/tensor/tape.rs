//! Recorded tensor operations and reverse-mode gradient accumulation.
//!
//! Every operation appends a node to the [`Tape`]; node inputs always precede
//! the node itself, so a single reverse sweep visits each operation once.
//! Gradients are accumulated only into leaves created with
//! [`Tape::param`]; intermediate adjoints live for the duration of one
//! [`Tape::backward`] call.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Sigmoid,
    Relu,
    Tanh,
    Gelu,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// Which operand (if any) of a binary op is a one-element broadcast.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    None,
    Left,
    Right,
}

const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(BinaryKind, Var, Var, Broadcast),
    Scale(Var, f64),
    Unary(UnaryKind, Var),
    AddRowBias(Var, Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    ScatterRows {
        src: Var,
        index: Vec<usize>,
        weights: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    Rotate {
        x: Var,
        r: Var,
        eps: f64,
    },
    Sum(Var),
    WeightedSum(Var, Vec<f64>),
    BceLogits {
        logits: Var,
        targets: Vec<f64>,
    },
    BceProbs {
        probs: Var,
        targets: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// True when the node is, or depends on, a `requires_grad` leaf.
    tracks: bool,
}

/// An append-only record of tensor operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the caller supplies slices whose extents cover every index
    // reachable through the given dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Adjoint buffer of `v`, created on first use, when `v` takes part in
/// differentiation.
fn slot<'a>(nodes: &[Node], adj: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].tracks {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(adj[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl UnaryKind {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            UnaryKind::Sigmoid => sigmoid(x),
            UnaryKind::Relu => x.max(0.0),
            UnaryKind::Tanh => x.tanh(),
            UnaryKind::Gelu => gelu(x),
            UnaryKind::Identity => x,
        }
    }

    /// Derivative given the input `x` and the output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryKind::Sigmoid => y * (1.0 - y),
            // subgradient 0 at the kink
            UnaryKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryKind::Tanh => 1.0 - y * y,
            UnaryKind::Gelu => gelu_grad(x),
            UnaryKind::Identity => 1.0,
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracks: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: false,
            tracks,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].requires_grad = true;
        v
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn tracks(&self, v: Var) -> bool {
        self.nodes[v.0].tracks
    }

    /// Accumulated gradient of a `param` leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    // ---- elementwise ------------------------------------------------------

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (na, nb) = (self.value(a).numel(), self.value(b).numel());
        let bc = if sa == sb {
            Broadcast::None
        } else if na == 1 {
            Broadcast::Left
        } else if nb == 1 {
            Broadcast::Right
        } else {
            return Err(Error::shape("elementwise", &sa, &sb));
        };
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let n = na.max(nb);
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let data: Vec<f64> = match bc {
            Broadcast::None => va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Left => vb.iter().map(|&y| f(va[0], y)).collect(),
            Broadcast::Right => va.iter().map(|&x| f(x, vb[0])).collect(),
        };
        debug_assert_eq!(data.len(), n);
        let shape = if bc == Broadcast::Left { sb } else { sa };
        let tracks = self.tracks(a) || self.tracks(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Binary(kind, a, b, bc), tracks))
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

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| e * c).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let tracks = self.tracks(x);
        self.push(t, Op::Scale(x, c), tracks)
    }

    pub fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| kind.apply(e)).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let tracks = self.tracks(x);
        self.push(t, Op::Unary(kind, x), tracks)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Tanh, x)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Gelu, x)
    }

    /// Adds a `[n]` bias to every row of `x` (last axis `n`).
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.value(bias).numel() != n {
            return Err(Error::shape("add_row_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let v = self.value(x);
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(&b).for_each(|(e, bb)| *e += bb);
        }
        let t = Tensor::new(v.shape().to_vec(), data)?;
        let tracks = self.tracks(x) || self.tracks(bias);
        Ok(self.push(t, Op::AddRowBias(x, bias), tracks))
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            &mut out,
            0.0,
        );
        let tracks = self.tracks(a) || self.tracks(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), tracks))
    }

    /// `[batch, m, k] x [batch, k, n] -> [batch, m, n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("batch_matmul", sa, sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &va[i * m * k..],
                (k as isize, 1),
                &vb[i * k * n..],
                (n as isize, 1),
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let tracks = self.tracks(a) || self.tracks(b);
        Ok(self.push(Tensor::new(vec![bs, m, n], out)?, Op::BatchMatMul(a, b), tracks))
    }

    /// Swaps the last two axes of a 2-D or 3-D tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (bs, m, n) = match s.len() {
            2 => (1, s[0], s[1]),
            3 => (s[0], s[1], s[2]),
            _ => return Err(Error::shape("transpose", &s, &[])),
        };
        let v = self.value(x).data();
        let mut out = vec![0.0; v.len()];
        for b in 0..bs {
            for i in 0..m {
                for j in 0..n {
                    out[b * m * n + j * m + i] = v[b * m * n + i * n + j];
                }
            }
        }
        let mut shape = s.clone();
        let l = shape.len();
        shape.swap(l - 2, l - 1);
        let tracks = self.tracks(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Transpose(x), tracks))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let tracks = self.tracks(x);
        Ok(self.push(t, Op::Reshape(x), tracks))
    }

    // ---- normalization ----------------------------------------------------

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of range for shape {s:?}"
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let v = self.value(x).data();
        let mut out = vec![0.0; v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| v[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                if !max.is_finite() {
                    return Err(Error::Numeric(format!(
                        "softmax row has no finite entry (max = {max})"
                    )));
                }
                let mut total = 0.0;
                for j in 0..len {
                    let e = (v[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[idx(j)] /= total;
                }
            }
        }
        let tracks = self.tracks(x);
        Ok(self.push(
            Tensor::new(s, out)?,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            tracks,
        ))
    }

    /// Normalizes each row (last axis) to zero mean and unit variance, then
    /// applies `gain` and `bias` of the row's width.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let n = self.value(x).cols();
        if n < 2 {
            return Err(Error::Contract(format!(
                "layer_norm needs a normalized axis of length >= 2, got {n}"
            )));
        }
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let v = self.value(x);
        let rows = v.rows();
        let mut xhat = vec![0.0; v.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; v.numel()];
        for r in 0..rows {
            let row = v.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let tracks = self.tracks(x) || self.tracks(gain) || self.tracks(bias);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            tracks,
        ))
    }

    // ---- indexing ---------------------------------------------------------

    /// Selects rows of a 2-D table: `[n, d] -> [index.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::shape("gather_rows", s, &[]));
        }
        let (n, d) = (s[0], s[1]);
        if index.is_empty() {
            return Err(Error::Contract("gather_rows with empty index".into()));
        }
        let v = self.value(table).data();
        let mut out = Vec::with_capacity(index.len() * d);
        for &i in index {
            if i >= n {
                return Err(Error::Contract(format!("row {i} out of range for {n} rows")));
            }
            out.extend_from_slice(&v[i * d..(i + 1) * d]);
        }
        let tracks = self.tracks(table);
        Ok(self.push(
            Tensor::new(vec![index.len(), d], out)?,
            Op::GatherRows(table, index.to_vec()),
            tracks,
        ))
    }

    /// `out[index[i]] += weights[i] * src[i]` into a fresh `[rows, d]` table.
    pub fn scatter_rows(
        &mut self,
        src: Var,
        index: &[usize],
        weights: &[f64],
        rows: usize,
    ) -> Result<Var> {
        let s = self.shape(src);
        if s.len() != 2 || s[0] != index.len() || index.len() != weights.len() {
            return Err(Error::shape("scatter_rows", s, &[index.len(), weights.len()]));
        }
        let d = s[1];
        let v = self.value(src).data();
        let mut out = vec![0.0; rows * d];
        for (i, (&dst, &w)) in index.iter().zip(weights).enumerate() {
            if dst >= rows {
                return Err(Error::Contract(format!("row {dst} out of range for {rows} rows")));
            }
            let o = &mut out[dst * d..(dst + 1) * d];
            o.iter_mut()
                .zip(&v[i * d..(i + 1) * d])
                .for_each(|(a, b)| *a += w * b);
        }
        let tracks = self.tracks(src);
        Ok(self.push(
            Tensor::new(vec![rows, d], out)?,
            Op::ScatterRows {
                src,
                index: index.to_vec(),
                weights: weights.to_vec(),
            },
            tracks,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let rows = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::shape("concat_cols", self.shape(*first), s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let tracks = parts.iter().any(|&p| self.tracks(p));
        Ok(self.push(
            Tensor::new(vec![rows, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            tracks,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let d = self.value(*first).cols();
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != d {
                return Err(Error::shape("concat_rows", self.shape(*first), s));
            }
            out.extend_from_slice(self.value(p).data());
        }
        let rows = out.len() / d;
        let tracks = parts.iter().any(|&p| self.tracks(p));
        Ok(self.push(
            Tensor::new(vec![rows, d], out)?,
            Op::ConcatRows(parts.to_vec()),
            tracks,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || start + len > s[1] || len == 0 {
            return Err(Error::shape("slice_cols", s, &[start, len]));
        }
        let rows = s[0];
        let v = self.value(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&v.row(r)[start..start + len]);
        }
        let tracks = self.tracks(x);
        Ok(self.push(
            Tensor::new(vec![rows, len], out)?,
            Op::SliceCols { x, start },
            tracks,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || start + len > s[0] || len == 0 {
            return Err(Error::shape("slice_rows", s, &[start, len]));
        }
        let d = s[1];
        let out = self.value(x).data()[start * d..(start + len) * d].to_vec();
        let tracks = self.tracks(x);
        Ok(self.push(
            Tensor::new(vec![len, d], out)?,
            Op::SliceRows { x, start },
            tracks,
        ))
    }

    // ---- composition ------------------------------------------------------

    /// Row-wise complex rotation of `x` by the unit-modulus normalization of
    /// `r`. Even columns hold real parts, odd columns imaginary parts; moduli
    /// of `r` below `eps` are divided by `eps` instead.
    pub fn rotate(&mut self, x: Var, r: Var, eps: f64) -> Result<Var> {
        let (sx, sr) = (self.shape(x), self.shape(r));
        if sx != sr {
            return Err(Error::shape("rotate", sx, sr));
        }
        let d = self.value(x).cols();
        if d % 2 != 0 {
            return Err(Error::Config(format!(
                "rotation composition needs an even dimension, got {d}"
            )));
        }
        let (vx, vr) = (self.value(x).data(), self.value(r).data());
        let mut out = vec![0.0; vx.len()];
        for p in 0..vx.len() / 2 {
            let (xr, xi) = (vx[2 * p], vx[2 * p + 1]);
            let (rr, ri) = (vr[2 * p], vr[2 * p + 1]);
            let n = (rr * rr + ri * ri).sqrt().max(eps);
            let (cr, ci) = (rr / n, ri / n);
            out[2 * p] = xr * cr - xi * ci;
            out[2 * p + 1] = xr * ci + xi * cr;
        }
        let t = Tensor::new(sx.to_vec(), out)?;
        let tracks = self.tracks(x) || self.tracks(r);
        Ok(self.push(t, Op::Rotate { x, r, eps }, tracks))
    }

    // ---- reductions and losses --------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let tracks = self.tracks(x);
        self.push(Tensor::scalar(s), Op::Sum(x), tracks)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `sum_i weights[i] * x[i]` over the flattened tensor.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let v = self.value(x).data();
        if v.len() != weights.len() {
            return Err(Error::shape("weighted_sum", self.shape(x), &[weights.len()]));
        }
        let s = v.iter().zip(weights).map(|(a, w)| a * w).sum();
        let tracks = self.tracks(x);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(x, weights.to_vec()), tracks))
    }

    fn check_targets(&self, x: Var, targets: &Tensor, op: &'static str) -> Result<()> {
        let s = self.shape(x);
        if s.len() != 2 || targets.shape() != s {
            return Err(Error::shape(op, s, targets.shape()));
        }
        Ok(())
    }

    /// Per-row mean binary cross-entropy of `sigmoid(logits)` against `targets`,
    /// computed in the overflow-free form. `[b, n] -> [b]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        self.check_targets(logits, targets, "bce_with_logits")?;
        let v = self.value(logits);
        let n = v.cols();
        let out: Vec<f64> = v
            .data()
            .chunks(n)
            .zip(targets.data().chunks(n))
            .map(|(row, t)| {
                row.iter()
                    .zip(t)
                    .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
                    .sum::<f64>()
                    / n as f64
            })
            .collect();
        let tracks = self.tracks(logits);
        Ok(self.push(
            Tensor::vector(out),
            Op::BceLogits {
                logits,
                targets: targets.data().to_vec(),
            },
            tracks,
        ))
    }

    /// Per-row mean binary cross-entropy of probabilities against `targets`,
    /// with log arguments clamped at 1e-12. `[b, n] -> [b]`.
    pub fn bce_probs(&mut self, probs: Var, targets: &Tensor) -> Result<Var> {
        self.check_targets(probs, targets, "bce_probs")?;
        let v = self.value(probs);
        if let Some(bad) = v.data().iter().find(|p| !p.is_finite()) {
            return Err(Error::Numeric(format!("non-finite probability {bad}")));
        }
        let n = v.cols();
        let out: Vec<f64> = v
            .data()
            .chunks(n)
            .zip(targets.data().chunks(n))
            .map(|(row, t)| {
                -row.iter()
                    .zip(t)
                    .map(|(&p, &y)| {
                        y * p.max(LOG_CLAMP).ln() + (1.0 - y) * (1.0 - p).max(LOG_CLAMP).ln()
                    })
                    .sum::<f64>()
                    / n as f64
            })
            .collect();
        let tracks = self.tracks(probs);
        Ok(self.push(
            Tensor::vector(out),
            Op::BceProbs {
                probs,
                targets: targets.data().to_vec(),
            },
            tracks,
        ))
    }

    // ---- reverse sweep ----------------------------------------------------

    /// Accumulates d(loss)/d(leaf) into every reachable `param` leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracks {
                continue;
            }
            if node.requires_grad {
                match &mut self.grads[i] {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => {
                        *slot = Some(Tensor::new(node.value.shape().to_vec(), g.clone())?)
                    }
                }
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b, bc) => {
                let (va, vb) = (val(*a), val(*b));
                // d(out)/d(operand) is the other operand for Mul, a sign otherwise
                let accumulate = |s: &mut Vec<f64>, other: &[f64], sign: f64, reduce: bool| {
                    let mul = *kind == BinaryKind::Mul;
                    let o = |j: usize| if other.len() == 1 { other[0] } else { other[j] };
                    if reduce {
                        s[0] += if mul {
                            g.iter().enumerate().map(|(j, gj)| gj * o(j)).sum::<f64>()
                        } else {
                            sign * g.iter().sum::<f64>()
                        };
                    } else if mul {
                        s.iter_mut().zip(g).enumerate().for_each(|(j, (e, gj))| *e += gj * o(j));
                    } else {
                        s.iter_mut().zip(g).for_each(|(e, gj)| *e += sign * gj);
                    }
                };
                let sign_b = if *kind == BinaryKind::Sub { -1.0 } else { 1.0 };
                if let Some(s) = slot(nodes, adj, *a) {
                    accumulate(s, vb, 1.0, *bc == Broadcast::Left);
                }
                if let Some(s) = slot(nodes, adj, *b) {
                    accumulate(s, va, sign_b, *bc == Broadcast::Right);
                }
            }
            Op::Scale(x, c) => {
                if let Some(s) = slot(nodes, adj, *x) {
                    s.iter_mut().zip(g).for_each(|(e, gj)| *e += c * gj);
                }
            }
            Op::Unary(kind, x) => {
                let vx = val(*x);
                let y = node.value.data();
                if let Some(s) = slot(nodes, adj, *x) {
                    for (((e, gj), &a), &b) in s.iter_mut().zip(g).zip(vx).zip(y) {
                        *e += gj * kind.derivative(a, b);
                    }
                }
            }
            Op::AddRowBias(x, b) => {
                if let Some(s) = slot(nodes, adj, *x) {
                    s.iter_mut().zip(g).for_each(|(e, gj)| *e += gj);
                }
                let n = nodes[b.0].value.numel();
                if let Some(s) = slot(nodes, adj, *b) {
                    for row in g.chunks(n) {
                        s.iter_mut().zip(row).for_each(|(e, gj)| *e += gj);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (val(*a), val(*b));
                if let Some(s) = slot(nodes, adj, *a) {
                    // dA = dC B^T
                    gemm(m, n, k, g, (n as isize, 1), vb, (1, n as isize), s, 1.0);
                }
                if let Some(s) = slot(nodes, adj, *b) {
                    // dB = A^T dC
                    gemm(k, m, n, va, (1, k as isize), g, (n as isize, 1), s, 1.0);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (va, vb) = (val(*a), val(*b));
                if let Some(s) = slot(nodes, adj, *a) {
                    for t in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            &g[t * m * n..],
                            (n as isize, 1),
                            &vb[t * k * n..],
                            (1, n as isize),
                            &mut s[t * m * k..(t + 1) * m * k],
                            1.0,
                        );
                    }
                }
                if let Some(s) = slot(nodes, adj, *b) {
                    for t in 0..bs {
                        gemm(
                            k,
                            m,
                            n,
                            &va[t * m * k..],
                            (1, k as isize),
                            &g[t * m * n..],
                            (n as isize, 1),
                            &mut s[t * k * n..(t + 1) * k * n],
                            1.0,
                        );
                    }
                }
            }
            Op::Transpose(x) => {
                let s_out = node.value.shape();
                let l = s_out.len();
                let (bs, n, m) = if l == 2 {
                    (1, s_out[0], s_out[1])
                } else {
                    (s_out[0], s_out[1], s_out[2])
                };
                // output is [n, m]; input was [m, n]
                if let Some(s) = slot(nodes, adj, *x) {
                    for b in 0..bs {
                        for i in 0..m {
                            for j in 0..n {
                                s[b * m * n + i * n + j] += g[b * m * n + j * m + i];
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(s) = slot(nodes, adj, *x) {
                    s.iter_mut().zip(g).for_each(|(e, gj)| *e += gj);
                }
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = node.value.data();
                if let Some(s) = slot(nodes, adj, *x) {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..*len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..*len {
                                s[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = val(*gain);
                let n = gv.len();
                if let Some(s) = slot(nodes, adj, *x) {
                    let mut dh = vec![0.0; n];
                    for (r, is) in inv_std.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        dh.iter_mut().zip(gr.iter().zip(gv)).for_each(|(d, (a, b))| *d = a * b);
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dhh =
                            dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            s[r * n + j] += is * (dh[j] - mean_dh - hr[j] * mean_dhh);
                        }
                    }
                }
                if let Some(s) = slot(nodes, adj, *gain) {
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            s[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(s) = slot(nodes, adj, *bias) {
                    for gr in g.chunks(n) {
                        s.iter_mut().zip(gr).for_each(|(e, gj)| *e += gj);
                    }
                }
            }
            Op::GatherRows(table, index) => {
                let d = node.value.cols();
                if let Some(s) = slot(nodes, adj, *table) {
                    for (k, &i) in index.iter().enumerate() {
                        s[i * d..(i + 1) * d]
                            .iter_mut()
                            .zip(&g[k * d..(k + 1) * d])
                            .for_each(|(e, gj)| *e += gj);
                    }
                }
            }
            Op::ScatterRows {
                src,
                index,
                weights,
            } => {
                let d = node.value.cols();
                if let Some(s) = slot(nodes, adj, *src) {
                    for (k, (&i, &w)) in index.iter().zip(weights).enumerate() {
                        s[k * d..(k + 1) * d]
                            .iter_mut()
                            .zip(&g[i * d..(i + 1) * d])
                            .for_each(|(e, gj)| *e += w * gj);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p.0].value.cols();
                    if let Some(s) = slot(nodes, adj, p) {
                        for r in 0..rows {
                            s[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(&g[r * total + offset..r * total + offset + w])
                                .for_each(|(e, gj)| *e += gj);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = nodes[p.0].value.numel();
                    if let Some(s) = slot(nodes, adj, p) {
                        s.iter_mut()
                            .zip(&g[offset..offset + n])
                            .for_each(|(e, gj)| *e += gj);
                    }
                    offset += n;
                }
            }
            Op::SliceCols { x, start } => {
                let width = nodes[x.0].value.cols();
                let len = node.value.cols();
                if let Some(s) = slot(nodes, adj, *x) {
                    for (r, gr) in g.chunks(len).enumerate() {
                        s[r * width + start..r * width + start + len]
                            .iter_mut()
                            .zip(gr)
                            .for_each(|(e, gj)| *e += gj);
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let d = node.value.cols();
                if let Some(s) = slot(nodes, adj, *x) {
                    s[start * d..start * d + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(e, gj)| *e += gj);
                }
            }
            Op::Rotate { x, r, eps } => {
                let (vx, vr) = (val(*x).to_vec(), val(*r).to_vec());
                let pairs = vx.len() / 2;
                let mut dx = vec![0.0; vx.len()];
                let mut dr = vec![0.0; vx.len()];
                for p in 0..pairs {
                    let (xr, xi) = (vx[2 * p], vx[2 * p + 1]);
                    let (rr, ri) = (vr[2 * p], vr[2 * p + 1]);
                    let (gr, gi) = (g[2 * p], g[2 * p + 1]);
                    let modulus = (rr * rr + ri * ri).sqrt();
                    let n = modulus.max(*eps);
                    let (cr, ci) = (rr / n, ri / n);
                    dx[2 * p] = gr * cr + gi * ci;
                    dx[2 * p + 1] = -gr * ci + gi * cr;
                    let dcr = gr * xr + gi * xi;
                    let dci = -gr * xi + gi * xr;
                    if modulus < *eps {
                        // below the guard the normalizer is the constant eps
                        dr[2 * p] = dcr / n;
                        dr[2 * p + 1] = dci / n;
                    } else {
                        let n3 = n * n * n;
                        dr[2 * p] = dcr * (1.0 / n - rr * rr / n3) - dci * rr * ri / n3;
                        dr[2 * p + 1] = -dcr * rr * ri / n3 + dci * (1.0 / n - ri * ri / n3);
                    }
                }
                if let Some(s) = slot(nodes, adj, *x) {
                    s.iter_mut().zip(dx).for_each(|(e, d)| *e += d);
                }
                if let Some(s) = slot(nodes, adj, *r) {
                    s.iter_mut().zip(dr).for_each(|(e, d)| *e += d);
                }
            }
            Op::Sum(x) => {
                if let Some(s) = slot(nodes, adj, *x) {
                    s.iter_mut().for_each(|e| *e += g[0]);
                }
            }
            Op::WeightedSum(x, w) => {
                if let Some(s) = slot(nodes, adj, *x) {
                    s.iter_mut().zip(w).for_each(|(e, wj)| *e += g[0] * wj);
                }
            }
            Op::BceLogits { logits, targets } => {
                let v = val(*logits).to_vec();
                let n = nodes[logits.0].value.cols();
                if let Some(s) = slot(nodes, adj, *logits) {
                    for (j, (e, (&x, &y))) in s.iter_mut().zip(v.iter().zip(targets)).enumerate() {
                        *e += g[j / n] * (sigmoid(x) - y) / n as f64;
                    }
                }
            }
            Op::BceProbs { probs, targets } => {
                let v = val(*probs).to_vec();
                let n = nodes[probs.0].value.cols();
                if let Some(s) = slot(nodes, adj, *probs) {
                    for (j, (e, (&p, &y))) in s.iter_mut().zip(v.iter().zip(targets)).enumerate() {
                        let mut d = 0.0;
                        if p > LOG_CLAMP {
                            d -= y / p;
                        }
                        if 1.0 - p > LOG_CLAMP {
                            d += (1.0 - y) / (1.0 - p);
                        }
                        *e += g[j / n] * d / n as f64;
                    }
                }
            }
        }
    }
}
