//! Reverse-mode computation tape.
//!
//! Every operation appends a node holding its output value and enough
//! information to apply the chain rule later. Nodes are only ever appended,
//! so the node order is a topological order and [`Tape::backward`] is a
//! single reverse sweep.

use crate::error::{Result, TensorError};
use crate::kernels::{self, split_axis};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    Sigmoid(Var),
    Relu(Var),
    Ln(Var),
    Clamp(Var, T, T),
    Softmax(Var),
    Conv1d(Var, Var),
    MaxReduce(Vec<Var>, Vec<usize>),
    MaxAxis(Var, Vec<usize>),
    Gather(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize, usize),
    Sum(Var),
    SumAxis(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        x_hat: Vec<T>,
        inv_std: Vec<T>,
    },
    Cube(Var, Var, Var),
    Bmm(Var, Var, bool),
    SegmentAttention {
        q: Var,
        k: Var,
        v: Var,
        lengths: Vec<usize>,
        heads: usize,
        probs: Vec<T>,
    },
    SegmentMean(Var, Vec<usize>),
    SegmentMax(Var, Vec<usize>),
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations for one forward pass.
///
/// A tape optionally borrows a [`ParamStore`]; parameters enter the tape
/// through [`Tape::param`] without being copied.
pub struct Tape<'p, T: Real> {
    store: Option<&'p ParamStore<T>>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

impl<T: Real> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            param_vars: Vec::new(),
        }
    }

    pub fn with_params(store: &'p ParamStore<T>) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::with_capacity(256),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.expect("param node without store").get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free input whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// The tape node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        let store = self.store.ok_or(TensorError::NoParamStore)?;
        store.try_get(id)?;
        if let Some(Some(v)) = self.param_vars.get(id.0) {
            return Ok(*v);
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        self.param_vars[id.0] = Some(v);
        Ok(v)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn map(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.requires_grad(x);
        self.push(out, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let [rows, cols] = *t.shape() else {
            return Err(TensorError::Rank {
                op: "transpose",
                expected: 2,
                shape: t.shape().to_vec(),
            });
        };
        let out = Tensor::new([cols, rows], kernels::transpose_raw(t.data(), rows, cols))?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    fn zip(&mut self, op_name: &'static str, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        self.map(x, Op::Scale(x, factor), |v| v * factor)
    }

    /// `x[..., n] + bias[n]`, broadcasting the bias over leading axes.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = tx.shape().last().copied().unwrap_or(1);
        if tb.rank() != 1 || tb.numel() != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                left: tx.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), kernels::sigmoid_scalar)
    }

    /// `max(0, x)`; the subgradient at zero is zero.
    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.map(x, Op::Ln(x), |v| v.ln())
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.map(x, Op::Clamp(x, lo, hi), |v| v.max(lo).min(hi))
    }

    /// Softmax of a non-empty vector.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = kernels::softmax(self.value(x))?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Softmax over the last axis. Positions with `mask[j] == false` get zero
    /// probability; a row with no unmasked position stays all zero.
    pub fn softmax_last(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let t = self.value(x);
        let n = match t.shape().last() {
            Some(&n) if n > 0 => n,
            _ => return Err(TensorError::Empty { op: "softmax" }),
        };
        if let Some(m) = mask {
            if m.len() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax mask",
                    left: t.shape().to_vec(),
                    right: vec![m.len()],
                });
            }
        }
        let out = Tensor::new(t.shape().to_vec(), kernels::softmax_rows_raw(t.data(), n, mask))?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    pub fn conv1d(&mut self, seq: Var, kernel: Var) -> Result<Var> {
        let out = kernels::conv1d(self.value(seq), self.value(kernel))?;
        let rg = self.any_grad(&[seq, kernel]);
        Ok(self.push(out, Op::Conv1d(seq, kernel), rg))
    }

    /// Elementwise max across `vars`; an empty list yields `fallback` itself.
    pub fn max_reduce(&mut self, vars: &[Var], fallback: Var) -> Result<Var> {
        if vars.is_empty() {
            return Ok(fallback);
        }
        let tensors: Vec<&Tensor<T>> = vars.iter().map(|&v| self.value(v)).collect();
        let (out, winners) = kernels::max_reduce_raw(&tensors, self.value(fallback))?;
        let rg = self.any_grad(vars);
        Ok(self.push(out, Op::MaxReduce(vars.to_vec(), winners), rg))
    }

    /// Max along `axis` (first index wins ties); the axis is removed.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() || t.shape()[axis] == 0 {
            return Err(TensorError::Axis {
                op: "max_axis",
                axis,
                shape: t.shape().to_vec(),
            });
        }
        let (values, src) = kernels::max_axis_raw(t.data(), t.shape(), axis);
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let out = Tensor::new(shape, values)?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::MaxAxis(x, src), rg))
    }

    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let out = kernels::gather(self.value(table), indices)?;
        let rg = self.requires_grad(table);
        Ok(self.push(out, Op::Gather(table, indices.to_vec()), rg))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, vars: &[Var], axis: usize) -> Result<Var> {
        let first = *vars.first().ok_or(TensorError::Empty { op: "concat" })?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::Axis {
                op: "concat",
                axis,
                shape: base,
            });
        }
        let mut total = 0;
        for &v in vars {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: base,
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in vars {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        let rg = self.any_grad(vars);
        Ok(self.push(out, Op::Concat(vars.to_vec(), axis), rg))
    }

    /// `x[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(TensorError::Axis {
                op: "slice",
                axis,
                shape: t.shape().to_vec(),
            });
        }
        let (outer, len, inner) = split_axis(t.shape(), axis);
        if start > end || end > len {
            return Err(TensorError::SliceRange { start, end, len });
        }
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            data.extend_from_slice(&t.data()[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = end - start;
        let out = Tensor::new(shape, data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::Slice(x, axis, start, end), rg))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Sum along `axis`; the axis is removed.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(TensorError::Axis {
                op: "sum_axis",
                axis,
                shape: t.shape().to_vec(),
            });
        }
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    data[o * inner + i] += t.data()[(o * len + l) * inner + i];
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let out = Tensor::new(shape, data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::SumAxis(x, axis), rg))
    }

    /// Layer normalisation over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let n = tx.shape().last().copied().unwrap_or(0);
        if n == 0 || tg.shape() != [n] || tb.shape() != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: tx.shape().to_vec(),
                right: tg.shape().to_vec(),
            });
        }
        let (y, x_hat, inv_std) = kernels::layer_norm_raw(tx.data(), tg.data(), tb.data(), eps);
        let out = Tensor::new(tx.shape().to_vec(), y)?;
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                x_hat,
                inv_std,
            },
            rg,
        ))
    }

    /// Three-way pairwise sum `out[i,j,k] = a[i,j] + b[j,k] + c[i,k]`
    /// with `a: [I×J]`, `b: [J×K]`, `c: [I×K]`. All three may carry the same
    /// leading batch axis, giving `[B×I×J×K]`.
    pub fn cube(&mut self, a: Var, b: Var, c: Var) -> Result<Var> {
        let (ta, tb, tc) = (self.value(a), self.value(b), self.value(c));
        let dims = cube_dims(ta.shape(), tb.shape(), tc.shape()).ok_or_else(|| TensorError::ShapeMismatch {
            op: "cube",
            left: ta.shape().to_vec(),
            right: tb.shape().to_vec(),
        })?;
        let (batch, i_n, j_n, k_n) = dims;
        let mut data = Vec::with_capacity(batch * i_n * j_n * k_n);
        for bt in 0..batch {
            let (ad, bd, cd) = (
                &ta.data()[bt * i_n * j_n..],
                &tb.data()[bt * j_n * k_n..],
                &tc.data()[bt * i_n * k_n..],
            );
            for i in 0..i_n {
                for j in 0..j_n {
                    let aij = ad[i * j_n + j];
                    for k in 0..k_n {
                        data.push(aij + bd[j * k_n + k] + cd[i * k_n + k]);
                    }
                }
            }
        }
        let shape = if ta.rank() == 3 {
            vec![batch, i_n, j_n, k_n]
        } else {
            vec![i_n, j_n, k_n]
        };
        let out = Tensor::new(shape, data)?;
        let rg = self.any_grad(&[a, b, c]);
        Ok(self.push(out, Op::Cube(a, b, c), rg))
    }

    /// Batched matrix product over a leading batch axis:
    /// `[B×m×k]·[B×k×n]`, or `[B×m×k]·[B×n×k]ᵀ` when `transpose_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let mismatch = || TensorError::ShapeMismatch {
            op: "bmm",
            left: ta.shape().to_vec(),
            right: tb.shape().to_vec(),
        };
        let (&[batch, m, k], &[b2, r, c]) = (ta.shape(), tb.shape()) else {
            return Err(mismatch());
        };
        let (k2, n) = if transpose_b { (c, r) } else { (r, c) };
        if batch != b2 || k != k2 {
            return Err(mismatch());
        }
        let mut data = Vec::with_capacity(batch * m * n);
        for i in 0..batch {
            let am = &ta.data()[i * m * k..(i + 1) * m * k];
            let bm = &tb.data()[i * k * n..(i + 1) * k * n];
            if transpose_b {
                data.extend(kernels::matmul_nt_raw(am, bm, m, k, n));
            } else {
                data.extend(kernels::matmul_raw(am, bm, m, k, n));
            }
        }
        let out = Tensor::new([batch, m, n], data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Bmm(a, b, transpose_b), rg))
    }

    fn check_segments(&self, op: &'static str, x: Var, lengths: &[usize]) -> Result<usize> {
        let t = self.value(x);
        let total: usize = lengths.iter().sum();
        if t.rank() != 2 || t.shape()[0] != total {
            return Err(TensorError::ShapeMismatch {
                op,
                left: t.shape().to_vec(),
                right: vec![total],
            });
        }
        Ok(t.shape()[1])
    }

    /// Multi-head scaled dot-product self-attention inside consecutive row
    /// segments. `q`, `k`, `v` are `[N×d]` with `N = Σ lengths`; rows only
    /// attend to rows of their own segment. Head `h` uses columns
    /// `h·d/heads .. (h+1)·d/heads`.
    pub fn segment_attention(&mut self, q: Var, k: Var, v: Var, lengths: &[usize], heads: usize) -> Result<Var> {
        let d = self.check_segments("segment_attention", q, lengths)?;
        self.same_shape("segment_attention", q, k)?;
        self.same_shape("segment_attention", q, v)?;
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "segment_attention heads",
                left: vec![d],
                right: vec![heads],
            });
        }
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (tq, tk, tv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![T::zero(); tq.len()];
        let mut probs = Vec::with_capacity(lengths.iter().map(|l| l * l).sum::<usize>() * heads);
        let mut start = 0;
        for &len in lengths {
            for h in 0..heads {
                let col = h * dh;
                let mut scores = vec![T::zero(); len * len];
                for i in 0..len {
                    let qi = &tq[(start + i) * d + col..(start + i) * d + col + dh];
                    for j in 0..len {
                        let kj = &tk[(start + j) * d + col..(start + j) * d + col + dh];
                        let dot: T = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum();
                        scores[i * len + j] = dot * scale;
                    }
                }
                let p = kernels::softmax_rows_raw(&scores, len.max(1), None);
                for i in 0..len {
                    let orow = &mut out[(start + i) * d + col..(start + i) * d + col + dh];
                    for j in 0..len {
                        let pij = p[i * len + j];
                        let vj = &tv[(start + j) * d + col..(start + j) * d + col + dh];
                        for (o, &vv) in orow.iter_mut().zip(vj) {
                            *o += pij * vv;
                        }
                    }
                }
                probs.extend(p);
            }
            start += len;
        }
        let out = Tensor::new([start, d], out)?;
        let rg = self.any_grad(&[q, k, v]);
        Ok(self.push(
            out,
            Op::SegmentAttention {
                q,
                k,
                v,
                lengths: lengths.to_vec(),
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Mean of each consecutive row segment of `x: [N×d]`, giving
    /// `[lengths.len()×d]`. An empty segment yields a zero row.
    pub fn segment_mean(&mut self, x: Var, lengths: &[usize]) -> Result<Var> {
        let d = self.check_segments("segment_mean", x, lengths)?;
        let tx = self.value(x).data();
        let mut out = vec![T::zero(); lengths.len() * d];
        let mut start = 0;
        for (s, &len) in lengths.iter().enumerate() {
            let orow = &mut out[s * d..(s + 1) * d];
            for r in start..start + len {
                for (o, &v) in orow.iter_mut().zip(&tx[r * d..(r + 1) * d]) {
                    *o += v;
                }
            }
            if len > 0 {
                let inv = T::one() / T::of(len as f64);
                orow.iter_mut().for_each(|o| *o *= inv);
            }
            start += len;
        }
        let out = Tensor::new([lengths.len(), d], out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::SegmentMean(x, lengths.to_vec()), rg))
    }

    /// Elementwise max of each consecutive row segment (first row wins ties).
    /// An empty segment yields a zero row.
    pub fn segment_max(&mut self, x: Var, lengths: &[usize]) -> Result<Var> {
        let d = self.check_segments("segment_max", x, lengths)?;
        let tx = self.value(x).data();
        let mut out = vec![T::zero(); lengths.len() * d];
        let mut start = 0;
        for (s, &len) in lengths.iter().enumerate() {
            if len > 0 {
                let orow = &mut out[s * d..(s + 1) * d];
                orow.copy_from_slice(&tx[start * d..(start + 1) * d]);
                for r in start + 1..start + len {
                    for (o, &v) in orow.iter_mut().zip(&tx[r * d..(r + 1) * d]) {
                        if v > *o {
                            *o = v;
                        }
                    }
                }
            }
            start += len;
        }
        let out = Tensor::new([lengths.len(), d], out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::SegmentMax(x, lengths.to_vec()), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let mut params = ParamGrads::new(self.store.map_or(0, ParamStore::len));
        let leaves = self.backward_into(loss, &mut params)?;
        Ok(Gradients { leaves, params })
    }

    /// Like [`Tape::backward`], but adds parameter gradients into `params`
    /// instead of a fresh map. Returns gradients of requires-grad leaves.
    pub fn backward_into(
        &self,
        loss: Var,
        params: &mut ParamGrads<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let loss_shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut acc = Accumulator {
            nodes: &self.nodes,
            grads: (0..=loss.0).map(|_| None).collect(),
            params,
        };
        acc.grads[loss.0] = Some(Tensor::ones(loss_shape.to_vec()));
        let mut leaves: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = acc.grads[i].take() else {
                continue;
            };
            let out = self.value(Var(i));
            match &node.op {
                Op::Leaf => leaves[i] = Some(g),
                Op::Param(id) => acc.params.accumulate(*id, &g),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    if acc.wants(*a) {
                        let da = kernels::matmul_nt_raw(g.data(), tb.data(), m, n, k);
                        acc.add(*a, Tensor::new([m, k], da)?);
                    }
                    if acc.wants(*b) {
                        let db = kernels::matmul_tn_raw(ta.data(), g.data(), m, k, n);
                        acc.add(*b, Tensor::new([k, n], db)?);
                    }
                }
                Op::Transpose(x) => {
                    let (rows, cols) = (out.shape()[0], out.shape()[1]);
                    let dx = kernels::transpose_raw(g.data(), rows, cols);
                    acc.add(*x, Tensor::new([cols, rows], dx)?);
                }
                Op::Reshape(x) => {
                    let shape = self.shape(*x).to_vec();
                    acc.add(*x, g.reshape(shape)?);
                }
                Op::Add(a, b) => {
                    acc.add(*a, g.clone());
                    acc.add(*b, g);
                }
                Op::Sub(a, b) => {
                    acc.add(*a, g.clone());
                    let mut neg = g;
                    neg.scale_in_place(-T::one());
                    acc.add(*b, neg);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    if acc.wants(*a) {
                        acc.add(*a, zip_with(&g, tb, |x, y| x * y));
                    }
                    if acc.wants(*b) {
                        acc.add(*b, zip_with(&g, ta, |x, y| x * y));
                    }
                }
                Op::Scale(x, f) => {
                    let mut dx = g;
                    dx.scale_in_place(*f);
                    acc.add(*x, dx);
                }
                Op::AddBias(x, b) => {
                    let n = self.value(*b).numel();
                    if acc.wants(*b) {
                        let mut db = vec![T::zero(); n];
                        for row in g.data().chunks(n) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        acc.add(*b, Tensor::new([n], db)?);
                    }
                    acc.add(*x, g);
                }
                Op::Sigmoid(x) => {
                    acc.add(*x, zip_with(&g, out, |gv, y| gv * y * (T::one() - y)));
                }
                Op::Relu(x) => {
                    let tx = self.value(*x);
                    acc.add(*x, zip_with(&g, tx, |gv, xv| if xv > T::zero() { gv } else { T::zero() }));
                }
                Op::Ln(x) => {
                    let tx = self.value(*x);
                    acc.add(*x, zip_with(&g, tx, |gv, xv| gv / xv));
                }
                Op::Clamp(x, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let tx = self.value(*x);
                    acc.add(
                        *x,
                        zip_with(&g, tx, |gv, xv| if xv >= lo && xv <= hi { gv } else { T::zero() }),
                    );
                }
                Op::Softmax(x) => {
                    let n = *out.shape().last().expect("softmax output has an axis");
                    let mut dx = vec![T::zero(); g.numel()];
                    for ((grow, yrow), drow) in
                        g.data().chunks(n).zip(out.data().chunks(n)).zip(dx.chunks_mut(n))
                    {
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for ((d, &gv), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d = y * (gv - dot);
                        }
                    }
                    acc.add(*x, Tensor::new(out.shape().to_vec(), dx)?);
                }
                Op::Conv1d(seq, kernel) => {
                    let (ts, tk) = (self.value(*seq), self.value(*kernel));
                    let (batch, len, d_in, width, d_out) = kernels::conv1d_dims(ts, tk)?;
                    let positions = len - width + 1;
                    let (xs, ks, gs) = (ts.data(), tk.data(), g.data());
                    let want_seq = acc.wants(*seq);
                    let want_kernel = acc.wants(*kernel);
                    let mut dseq = vec![T::zero(); if want_seq { xs.len() } else { 0 }];
                    let mut dker = vec![T::zero(); if want_kernel { ks.len() } else { 0 }];
                    for b in 0..batch {
                        for t in 0..positions {
                            let grow = &gs[(b * positions + t) * d_out..(b * positions + t + 1) * d_out];
                            for s in 0..width {
                                let xi = (b * len + t + s) * d_in;
                                for i in 0..d_in {
                                    let kbase = (s * d_in + i) * d_out;
                                    if want_seq {
                                        let krow = &ks[kbase..kbase + d_out];
                                        let mut acc_v = T::zero();
                                        for (&gv, &kv) in grow.iter().zip(krow) {
                                            acc_v += gv * kv;
                                        }
                                        dseq[xi + i] += acc_v;
                                    }
                                    if want_kernel {
                                        let xv = xs[xi + i];
                                        for (d, &gv) in dker[kbase..kbase + d_out].iter_mut().zip(grow) {
                                            *d += xv * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if want_seq {
                        acc.add(*seq, Tensor::new(ts.shape().to_vec(), dseq)?);
                    }
                    if want_kernel {
                        acc.add(*kernel, Tensor::new(tk.shape().to_vec(), dker)?);
                    }
                }
                Op::MaxReduce(vars, winners) => {
                    for (idx, &v) in vars.iter().enumerate() {
                        if !acc.wants(v) {
                            continue;
                        }
                        let dv = g
                            .data()
                            .iter()
                            .zip(winners)
                            .map(|(&gv, &w)| if w == idx { gv } else { T::zero() })
                            .collect();
                        acc.add(v, Tensor::new(out.shape().to_vec(), dv)?);
                    }
                }
                Op::MaxAxis(x, src) => {
                    let tx = self.value(*x);
                    let mut dx = vec![T::zero(); tx.numel()];
                    for (&gv, &s) in g.data().iter().zip(src) {
                        dx[s] += gv;
                    }
                    acc.add(*x, Tensor::new(tx.shape().to_vec(), dx)?);
                }
                Op::Gather(table, indices) => acc.scatter_rows(*table, self.value(*table), indices, &g),
                Op::Concat(vars, axis) => {
                    let (outer, total, inner) = split_axis(out.shape(), *axis);
                    let mut offset = 0;
                    for &v in vars {
                        let shape = self.shape(v).to_vec();
                        let len = shape[*axis];
                        if acc.wants(v) {
                            let mut dv = Vec::with_capacity(outer * len * inner);
                            for o in 0..outer {
                                let start = (o * total + offset) * inner;
                                dv.extend_from_slice(&g.data()[start..start + len * inner]);
                            }
                            acc.add(v, Tensor::new(shape, dv)?);
                        }
                        offset += len;
                    }
                }
                Op::Slice(x, axis, start, end) => {
                    let tx = self.value(*x);
                    let (outer, len, inner) = split_axis(tx.shape(), *axis);
                    let width = (end - start) * inner;
                    let mut dx = vec![T::zero(); tx.numel()];
                    for o in 0..outer {
                        let dst = (o * len + start) * inner;
                        dx[dst..dst + width].copy_from_slice(&g.data()[o * width..(o + 1) * width]);
                    }
                    acc.add(*x, Tensor::new(tx.shape().to_vec(), dx)?);
                }
                Op::Sum(x) => {
                    let shape = self.shape(*x).to_vec();
                    acc.add(*x, Tensor::full(shape, g.item()));
                }
                Op::SumAxis(x, axis) => {
                    let shape = self.shape(*x).to_vec();
                    let (outer, len, inner) = split_axis(&shape, *axis);
                    let mut dx = vec![T::zero(); outer * len * inner];
                    for o in 0..outer {
                        for l in 0..len {
                            let dst = (o * len + l) * inner;
                            dx[dst..dst + inner].copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                        }
                    }
                    acc.add(*x, Tensor::new(shape, dx)?);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    x_hat,
                    inv_std,
                } => {
                    let tg = self.value(*gain);
                    let n = tg.numel();
                    let nf = T::of(n as f64);
                    if acc.wants(*gain) || acc.wants(*bias) {
                        let mut dgain = vec![T::zero(); n];
                        let mut dbias = vec![T::zero(); n];
                        for (grow, hrow) in g.data().chunks(n).zip(x_hat.chunks(n)) {
                            for j in 0..n {
                                dgain[j] += grow[j] * hrow[j];
                                dbias[j] += grow[j];
                            }
                        }
                        acc.add(*gain, Tensor::new([n], dgain)?);
                        acc.add(*bias, Tensor::new([n], dbias)?);
                    }
                    if acc.wants(*x) {
                        let mut dx = vec![T::zero(); g.numel()];
                        for (r, ((grow, hrow), drow)) in g
                            .data()
                            .chunks(n)
                            .zip(x_hat.chunks(n))
                            .zip(dx.chunks_mut(n))
                            .enumerate()
                        {
                            let dxhat: Vec<T> = grow.iter().zip(tg.data()).map(|(&a, &b)| a * b).collect();
                            let sum_d: T = dxhat.iter().copied().sum();
                            let sum_dh: T = dxhat.iter().zip(hrow).map(|(&a, &b)| a * b).sum();
                            for j in 0..n {
                                drow[j] = inv_std[r] / nf * (nf * dxhat[j] - sum_d - hrow[j] * sum_dh);
                            }
                        }
                        acc.add(*x, Tensor::new(self.shape(*x).to_vec(), dx)?);
                    }
                }
                Op::Bmm(a, b, transpose_b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (batch, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                    let n = out.shape()[2];
                    let mut da = Vec::with_capacity(ta.numel());
                    let mut db = Vec::with_capacity(tb.numel());
                    for i in 0..batch {
                        let am = &ta.data()[i * m * k..(i + 1) * m * k];
                        let bm = &tb.data()[i * k * n..(i + 1) * k * n];
                        let gm = &g.data()[i * m * n..(i + 1) * m * n];
                        if *transpose_b {
                            da.extend(kernels::matmul_raw(gm, bm, m, n, k));
                            db.extend(kernels::matmul_tn_raw(gm, am, m, n, k));
                        } else {
                            da.extend(kernels::matmul_nt_raw(gm, bm, m, n, k));
                            db.extend(kernels::matmul_tn_raw(am, gm, m, k, n));
                        }
                    }
                    acc.add(*a, Tensor::new(ta.shape().to_vec(), da)?);
                    acc.add(*b, Tensor::new(tb.shape().to_vec(), db)?);
                }
                Op::SegmentAttention {
                    q,
                    k,
                    v,
                    lengths,
                    heads,
                    probs,
                } => {
                    let (tq, tk, tv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                    let d = out.shape()[1];
                    let dh = d / heads;
                    let scale = T::one() / T::of(dh as f64).sqrt();
                    let gd = g.data();
                    let mut dq = vec![T::zero(); tq.len()];
                    let mut dk = vec![T::zero(); tk.len()];
                    let mut dv = vec![T::zero(); tv.len()];
                    let (mut start, mut pofs) = (0, 0);
                    for &len in lengths {
                        for h in 0..*heads {
                            let col = h * dh;
                            let p = &probs[pofs..pofs + len * len];
                            pofs += len * len;
                            let row = |r: usize| (start + r) * d + col;
                            // dP = dO·Vᵀ and dV = Pᵀ·dO
                            let mut dp = vec![T::zero(); len * len];
                            for i in 0..len {
                                let go = &gd[row(i)..row(i) + dh];
                                for j in 0..len {
                                    let vj = &tv[row(j)..row(j) + dh];
                                    dp[i * len + j] = go.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                                    let pij = p[i * len + j];
                                    for (o, &gv) in dv[row(j)..row(j) + dh].iter_mut().zip(go) {
                                        *o += pij * gv;
                                    }
                                }
                            }
                            // Softmax backward, then through the scaled scores.
                            for i in 0..len {
                                let prow = &p[i * len..(i + 1) * len];
                                let dprow = &dp[i * len..(i + 1) * len];
                                let dot: T = prow.iter().zip(dprow).map(|(&a, &b)| a * b).sum();
                                for j in 0..len {
                                    let ds = prow[j] * (dprow[j] - dot) * scale;
                                    if ds == T::zero() {
                                        continue;
                                    }
                                    for c in 0..dh {
                                        dq[row(i) + c] += ds * tk[row(j) + c];
                                        dk[row(j) + c] += ds * tq[row(i) + c];
                                    }
                                }
                            }
                        }
                        start += len;
                    }
                    let shape = out.shape().to_vec();
                    acc.add(*q, Tensor::new(shape.clone(), dq)?);
                    acc.add(*k, Tensor::new(shape.clone(), dk)?);
                    acc.add(*v, Tensor::new(shape, dv)?);
                }
                Op::SegmentMean(x, lengths) => {
                    let d = out.shape()[1];
                    let mut dx = vec![T::zero(); self.value(*x).numel()];
                    let mut start = 0;
                    for (s, &len) in lengths.iter().enumerate() {
                        if len > 0 {
                            let inv = T::one() / T::of(len as f64);
                            let grow = &g.data()[s * d..(s + 1) * d];
                            for r in start..start + len {
                                for (o, &gv) in dx[r * d..(r + 1) * d].iter_mut().zip(grow) {
                                    *o = gv * inv;
                                }
                            }
                        }
                        start += len;
                    }
                    acc.add(*x, Tensor::new(self.shape(*x).to_vec(), dx)?);
                }
                Op::SegmentMax(x, lengths) => {
                    let d = out.shape()[1];
                    let tx = self.value(*x).data();
                    let mut dx = vec![T::zero(); tx.len()];
                    let mut start = 0;
                    for (s, &len) in lengths.iter().enumerate() {
                        for c in 0..d {
                            let winner = (start..start + len).find(|&r| tx[r * d + c] == out.data()[s * d + c]);
                            if let Some(r) = winner {
                                dx[r * d + c] += g.data()[s * d + c];
                            }
                        }
                        start += len;
                    }
                    acc.add(*x, Tensor::new(self.shape(*x).to_vec(), dx)?);
                }
                Op::Cube(a, b, c) => {
                    let (ta, tb, tc) = (self.value(*a), self.value(*b), self.value(*c));
                    let (batch, i_n, j_n, k_n) =
                        cube_dims(ta.shape(), tb.shape(), tc.shape()).expect("validated in forward");
                    let mut da = vec![T::zero(); ta.numel()];
                    let mut db = vec![T::zero(); tb.numel()];
                    let mut dc = vec![T::zero(); tc.numel()];
                    for bt in 0..batch {
                        let gb = &g.data()[bt * i_n * j_n * k_n..];
                        for i in 0..i_n {
                            for j in 0..j_n {
                                for k in 0..k_n {
                                    let gv = gb[(i * j_n + j) * k_n + k];
                                    da[bt * i_n * j_n + i * j_n + j] += gv;
                                    db[bt * j_n * k_n + j * k_n + k] += gv;
                                    dc[bt * i_n * k_n + i * k_n + k] += gv;
                                }
                            }
                        }
                    }
                    acc.add(*a, Tensor::new(ta.shape().to_vec(), da)?);
                    acc.add(*b, Tensor::new(tb.shape().to_vec(), db)?);
                    acc.add(*c, Tensor::new(tc.shape().to_vec(), dc)?);
                }
            }
        }
        Ok(leaves)
    }
}

/// `(batch, I, J, K)` for cube operands, or `None` if they disagree.
fn cube_dims(a: &[usize], b: &[usize], c: &[usize]) -> Option<(usize, usize, usize, usize)> {
    match (a, b, c) {
        (&[i, j], &[j2, k], &[i2, k2]) if j == j2 && i == i2 && k == k2 => Some((1, i, j, k)),
        (&[n, i, j], &[n2, j2, k], &[n3, i2, k2])
            if n == n2 && n == n3 && j == j2 && i == i2 && k == k2 =>
        {
            Some((n, i, j, k))
        }
        _ => None,
    }
}

fn zip_with<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

struct Accumulator<'a, T: Real> {
    nodes: &'a [Node<T>],
    grads: Vec<Option<Tensor<T>>>,
    params: &'a mut ParamGrads<T>,
}

impl<T: Real> Accumulator<'_, T> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn add(&mut self, v: Var, g: Tensor<T>) {
        if !self.wants(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    /// Scatter-add rows of `g` into `table`'s gradient. Parameter tables are
    /// updated in place so untouched rows cost nothing.
    fn scatter_rows(&mut self, table: Var, value: &Tensor<T>, indices: &[usize], g: &Tensor<T>) {
        if !self.wants(table) {
            return;
        }
        let d = value.shape()[1];
        let dst = match self.nodes[table.0].op {
            Op::Param(id) => self.params.slot(id, value.shape()),
            _ => self.grads[table.0].get_or_insert_with(|| Tensor::zeros(value.shape().to_vec())),
        };
        let dst = dst.data_mut();
        for (r, &index) in indices.iter().enumerate() {
            for (o, &gv) in dst[index * d..(index + 1) * d].iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                *o += gv;
            }
        }
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    leaves: Vec<Option<Tensor<T>>>,
    params: ParamGrads<T>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf created with [`Tape::leaf`]; `None` if unreached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(id)
    }

    pub fn params(&self) -> &ParamGrads<T> {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads<T> {
        self.params
    }
}
