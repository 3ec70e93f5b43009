//! Forward kernels on plain tensors.
//!
//! These are the pure halves of the tape operations. They validate shapes and
//! never record anything, so they double as a no-gradient inference path.

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

/// `(outer, axis_len, inner)` view of a shape around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn matmul_raw<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `A · Bᵀ` with `A: [m×k]`, `B: [n×k]`.
pub(crate) fn matmul_nt_raw<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// `Aᵀ · B` with `A: [k×m]`, `B: [k×n]`.
pub(crate) fn matmul_tn_raw<T: Real>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &aip) in arow.iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw<T: Real>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

fn expect_rank<T>(op: &'static str, t: &Tensor<T>, rank: usize) -> Result<()>
where
    T: Real,
{
    if t.rank() != rank {
        return Err(TensorError::Rank {
            op,
            expected: rank,
            shape: t.shape().to_vec(),
        });
    }
    Ok(())
}

/// Standard matrix product of `[m×k]` and `[k×n]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("matmul", a, 2)?;
    expect_rank("matmul", b, 2)?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Tensor::new([m, n], matmul_raw(a.data(), b.data(), m, k, n))
}

pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| sigmoid_scalar(v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .map(|&v| if v > T::zero() { v } else { T::zero() })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Softmax over each contiguous row of length `n`. Masked-out positions
/// (`mask[j] == false`) get probability zero. A row with every position
/// masked is left as all zeros.
pub(crate) fn softmax_rows_raw<T: Real>(x: &[T], n: usize, mask: Option<&[bool]>) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, orow) in x.chunks(n).zip(out.chunks_mut(n)) {
        let keep = |j: usize| mask.map_or(true, |m| m[j]);
        let mut max = T::neg_infinity();
        for (j, &v) in row.iter().enumerate() {
            if keep(j) && v > max {
                max = v;
            }
        }
        if max == T::neg_infinity() {
            continue;
        }
        let mut total = T::zero();
        for (j, (&v, o)) in row.iter().zip(orow.iter_mut()).enumerate() {
            if keep(j) {
                *o = (v - max).exp();
                total += *o;
            }
        }
        for o in orow.iter_mut() {
            *o /= total;
        }
    }
    out
}

/// Numerically stable softmax of a non-empty vector.
pub fn softmax<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("softmax", x, 1)?;
    if x.numel() == 0 {
        return Err(TensorError::Empty { op: "softmax" });
    }
    Tensor::new(x.shape().to_vec(), softmax_rows_raw(x.data(), x.numel(), None))
}

/// Shapes of a conv1d call, normalised to a batch: `(batch, len, d_in, width, d_out)`.
pub(crate) fn conv1d_dims<T: Real>(
    seq: &Tensor<T>,
    kernel: &Tensor<T>,
) -> Result<(usize, usize, usize, usize, usize)> {
    expect_rank("conv1d", kernel, 3)?;
    let (batch, len, d_in) = match seq.shape() {
        [l, d] => (1, *l, *d),
        [b, l, d] => (*b, *l, *d),
        _ => {
            return Err(TensorError::Rank {
                op: "conv1d",
                expected: 2,
                shape: seq.shape().to_vec(),
            })
        }
    };
    let (width, k_in, d_out) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
    if k_in != d_in || width == 0 {
        return Err(TensorError::ShapeMismatch {
            op: "conv1d",
            left: seq.shape().to_vec(),
            right: kernel.shape().to_vec(),
        });
    }
    if len < width {
        return Err(TensorError::SequenceTooShort { len, width });
    }
    Ok((batch, len, d_in, width, d_out))
}

pub(crate) fn conv1d_raw<T: Real>(
    x: &[T],
    k: &[T],
    (batch, len, d_in, width, d_out): (usize, usize, usize, usize, usize),
) -> Vec<T> {
    let positions = len - width + 1;
    let mut out = vec![T::zero(); batch * positions * d_out];
    for b in 0..batch {
        for t in 0..positions {
            let orow = &mut out[(b * positions + t) * d_out..(b * positions + t + 1) * d_out];
            for s in 0..width {
                let xrow = &x[(b * len + t + s) * d_in..(b * len + t + s + 1) * d_in];
                for (i, &xv) in xrow.iter().enumerate() {
                    if xv == T::zero() {
                        continue;
                    }
                    let krow = &k[(s * d_in + i) * d_out..(s * d_in + i + 1) * d_out];
                    for (o, &kv) in orow.iter_mut().zip(krow) {
                        *o += xv * kv;
                    }
                }
            }
        }
    }
    out
}

/// Valid (unpadded) 1-D cross-correlation.
///
/// `seq` is `[L×d_in]` or batched `[B×L×d_in]`; `kernel` is `[w×d_in×d_out]`.
/// The output drops the batch axis when the input had none.
pub fn conv1d<T: Real>(seq: &Tensor<T>, kernel: &Tensor<T>) -> Result<Tensor<T>> {
    let dims = conv1d_dims(seq, kernel)?;
    let (batch, len, _, width, d_out) = dims;
    let data = conv1d_raw(seq.data(), kernel.data(), dims);
    let positions = len - width + 1;
    if seq.rank() == 2 {
        Tensor::new([positions, d_out], data)
    } else {
        Tensor::new([batch, positions, d_out], data)
    }
}

/// Elementwise maximum across `tensors`, or a copy of `fallback` when the
/// list is empty. Also returns, per element, which input won (first on ties).
pub(crate) fn max_reduce_raw<T: Real>(
    tensors: &[&Tensor<T>],
    fallback: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let Some(first) = tensors.first() else {
        return Ok((fallback.clone(), Vec::new()));
    };
    let mut values = first.data().to_vec();
    let mut winner = vec![0usize; values.len()];
    for (idx, t) in tensors.iter().enumerate().skip(1) {
        if t.shape() != first.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "max_reduce",
                left: first.shape().to_vec(),
                right: t.shape().to_vec(),
            });
        }
        for (e, &v) in t.data().iter().enumerate() {
            if v > values[e] {
                values[e] = v;
                winner[e] = idx;
            }
        }
    }
    Ok((Tensor::new(first.shape().to_vec(), values)?, winner))
}

pub fn max_reduce<T: Real>(tensors: &[&Tensor<T>], fallback: &Tensor<T>) -> Result<Tensor<T>> {
    max_reduce_raw(tensors, fallback).map(|(t, _)| t)
}

/// Maximum along `axis`, with the flat source index of each winner.
pub(crate) fn max_axis_raw<T: Real>(x: &[T], shape: &[usize], axis: usize) -> (Vec<T>, Vec<usize>) {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut values = vec![T::neg_infinity(); outer * inner];
    let mut src = vec![0usize; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let dst = o * inner + i;
            for l in 0..len {
                let at = (o * len + l) * inner + i;
                if l == 0 || x[at] > values[dst] {
                    values[dst] = x[at];
                    src[dst] = at;
                }
            }
        }
    }
    (values, src)
}

/// Row lookup: `[V×d]` table and `n` indices give `[n×d]`.
pub fn gather<T: Real>(table: &Tensor<T>, indices: &[usize]) -> Result<Tensor<T>> {
    expect_rank("gather", table, 2)?;
    let (rows, d) = (table.shape()[0], table.shape()[1]);
    let mut data = Vec::with_capacity(indices.len() * d);
    for &index in indices {
        if index >= rows {
            return Err(TensorError::IndexOutOfRange { index, rows });
        }
        data.extend_from_slice(&table.data()[index * d..(index + 1) * d]);
    }
    Tensor::new([indices.len(), d], data)
}

/// Layer normalisation over the last axis. Returns `(y, x_hat, inv_std)`.
pub(crate) fn layer_norm_raw<T: Real>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = gain.len();
    let rows = x.len() / n;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); rows];
    let nf = T::of(n as f64);
    for r in 0..rows {
        let row = &x[r * n..(r + 1) * n];
        let mean = row.iter().copied().sum::<T>() / nf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let rstd = T::one() / (var + eps).sqrt();
        inv_std[r] = rstd;
        for j in 0..n {
            let h = (row[j] - mean) * rstd;
            xhat[r * n + j] = h;
            y[r * n + j] = h * gain[j] + bias[j];
        }
    }
    (y, xhat, inv_std)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn matmul_identity_and_column() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(matmul(&a, &eye).unwrap(), a);
        let col = t(&[2, 1], &[5.0, 6.0]);
        assert_eq!(matmul(&a, &col).unwrap().data(), &[17.0, 39.0]);
        let zero = Tensor::<f64>::zeros([2, 3]);
        assert!(matmul(&a, &zero).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 3], &[0.0; 6]);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&t(&[2], &[0.0, 0.0])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&t(&[2], &[2f64.ln(), 0.0])).unwrap();
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-12);
        let s = softmax(&t(&[2], &[1000.0, 0.0])).unwrap();
        assert!(s.is_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1] < 1e-300);
        assert!(matches!(
            softmax(&Tensor::<f64>::zeros([0])),
            Err(TensorError::Empty { .. })
        ));
    }

    #[test]
    fn sigmoid_relu_examples() {
        let s = sigmoid(&t(&[3], &[0.0, 3f64.ln(), -800.0]));
        assert_eq!(s.data()[0], 0.5);
        assert!((s.data()[1] - 0.75).abs() < 1e-12);
        assert!(s.data()[2] >= 0.0 && s.is_finite());
        let r = relu(&t(&[3], &[-3.0, 3.0, 0.0]));
        assert_eq!(r.data(), &[0.0, 3.0, 0.0]);
    }

    #[test]
    fn conv1d_examples() {
        let seq = t(&[3, 1], &[1.0, 2.0, 3.0]);
        let k = t(&[2, 1, 1], &[1.0, 1.0]);
        assert_eq!(conv1d(&seq, &k).unwrap().data(), &[3.0, 5.0]);
        let zero = Tensor::<f64>::zeros([2, 1, 1]);
        assert_eq!(conv1d(&seq, &zero).unwrap().data(), &[0.0, 0.0]);
        let wide = t(&[3, 1, 1], &[1.0, 1.0, 1.0]);
        assert_eq!(conv1d(&seq, &wide).unwrap().shape(), &[1, 1]);
        let too_wide = Tensor::<f64>::zeros([4, 1, 1]);
        let err = conv1d(&seq, &too_wide).unwrap_err();
        assert!(err.to_string().contains("pad"));
    }

    #[test]
    fn max_reduce_examples() {
        let a = t(&[2], &[1.0, 5.0]);
        let b = t(&[2], &[3.0, 2.0]);
        let zero = Tensor::<f64>::zeros([2]);
        assert_eq!(max_reduce(&[&a, &b], &zero).unwrap().data(), &[3.0, 5.0]);
        assert_eq!(max_reduce(&[&a], &zero).unwrap(), a);
        assert_eq!(max_reduce(&[], &zero).unwrap(), zero);
        let (_, winners) = max_reduce_raw(&[&a, &a], &zero).unwrap();
        assert_eq!(winners, vec![0, 0]);
    }

    #[test]
    fn gather_examples() {
        let table = t(&[4, 2], &[0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5]);
        assert_eq!(gather(&table, &[2, 0]).unwrap().data(), &[2.0, 2.5, 0.0, 0.5]);
        assert_eq!(gather(&table, &[]).unwrap().shape(), &[0, 2]);
        assert_eq!(
            gather(&table, &[4]).unwrap_err(),
            TensorError::IndexOutOfRange { index: 4, rows: 4 }
        );
    }
}
