//! Forward kernels.
//!
//! Pure functions on tensors; the tape re-uses these for its forward pass.
//! All reductions accumulate in input order so results are bit-reproducible
//! run to run.

use crate::error::{Error, Result};
use crate::numerics::scalar::Scalar;
use crate::numerics::tensor::{for_each_index, Tensor};

/// Broadcast two shapes numpy-style: right-aligned, extent-1 axes stretch.
pub fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(Error::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
    }
    Ok(out)
}

/// Maps an output multi-index onto an operand's flat offset, where the
/// operand shape is right-aligned against the output shape and extent-1
/// axes repeat.
fn broadcast_offset(out_idx: &[usize], shape: &[usize], strides: &[usize]) -> usize {
    let skip = out_idx.len() - shape.len();
    let mut flat = 0;
    for (axis, &extent) in shape.iter().enumerate() {
        let i = if extent == 1 { 0 } else { out_idx[skip + axis] };
        flat += i * strides[axis];
    }
    flat
}

fn elementwise_broadcast<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    let shape = broadcast_shapes(op, a.shape(), b.shape())?;
    let (sa, sb) = (a.strides(), b.strides());
    let mut data = Vec::with_capacity(shape.iter().product());
    for_each_index(&shape, |idx| {
        let va = a.data()[broadcast_offset(idx, a.shape(), &sa)];
        let vb = b.data()[broadcast_offset(idx, b.shape(), &sb)];
        data.push(f(va, vb));
    });
    Tensor::from_vec(shape, data)
}

/// Broadcast elementwise addition.
pub fn add_broadcast<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    elementwise_broadcast("add_broadcast", a, b, |x, y| x + y)
}

/// Broadcast elementwise multiplication.
pub fn mul_broadcast<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    elementwise_broadcast("mul_broadcast", a, b, |x, y| x * y)
}

pub fn scale<T: Scalar>(x: &Tensor<T>, c: T) -> Tensor<T> {
    x.map(|v| v * c)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn sqrt_elem<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.sqrt())
}

/// Batched matrix product. Both operands need rank >= 2; the last two axes
/// multiply as [r, k] x [k, c] and any leading axes broadcast.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() < 2 || b.rank() < 2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (r, ka) = (a.shape()[a.rank() - 2], a.shape()[a.rank() - 1]);
    let (kb, c) = (b.shape()[b.rank() - 2], b.shape()[b.rank() - 1]);
    if ka != kb {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let batch = broadcast_shapes(
        "matmul",
        &a.shape()[..a.rank() - 2],
        &b.shape()[..b.rank() - 2],
    )?;

    let mut out_shape = batch.clone();
    out_shape.extend_from_slice(&[r, c]);
    let mut data = vec![T::zero(); out_shape.iter().product()];

    let a_batch_strides: Vec<usize> = a.strides()[..a.rank() - 2].to_vec();
    let b_batch_strides: Vec<usize> = b.strides()[..b.rank() - 2].to_vec();
    let a_shape_batch = &a.shape()[..a.rank() - 2];
    let b_shape_batch = &b.shape()[..b.rank() - 2];

    let mut out_off = 0;
    for_each_index(&batch, |idx| {
        let a_off = broadcast_offset(idx, a_shape_batch, &a_batch_strides);
        let b_off = broadcast_offset(idx, b_shape_batch, &b_batch_strides);
        let a_mat = &a.data()[a_off..a_off + r * ka];
        let b_mat = &b.data()[b_off..b_off + kb * c];
        let out_mat = &mut data[out_off..out_off + r * c];
        for i in 0..r {
            for j in 0..c {
                let mut acc = T::zero();
                for t in 0..ka {
                    acc = acc + a_mat[i * ka + t] * b_mat[t * c + j];
                }
                out_mat[i * c + j] = acc;
            }
        }
        out_off += r * c;
    });
    Tensor::from_vec(out_shape, data)
}

/// Swaps the last two axes.
pub fn transpose_last<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() < 2 {
        return Err(Error::ShapeExpectation {
            op: "transpose_last",
            expected: "rank >= 2".into(),
            got: x.shape().to_vec(),
        });
    }
    let (r, c) = (x.shape()[x.rank() - 2], x.shape()[x.rank() - 1]);
    let batch: usize = x.shape()[..x.rank() - 2].iter().product();
    let mut shape = x.shape().to_vec();
    let rank = shape.len();
    shape.swap(rank - 2, rank - 1);
    let mut data = vec![T::zero(); x.len()];
    for bi in 0..batch {
        let src = &x.data()[bi * r * c..(bi + 1) * r * c];
        let dst = &mut data[bi * r * c..(bi + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    Tensor::from_vec(shape, data)
}

/// Lane decomposition for reductions along `axis`: (outer, n, inner).
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, n, inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::AxisOutOfRange {
            op,
            axis,
            rank: shape.len(),
        });
    }
    Ok(())
}

/// Numerically stable softmax along `axis`: the lane maximum is subtracted
/// before exponentiation, so huge but equal inputs still produce uniform
/// outputs instead of NaN.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    check_axis("softmax", x.shape(), axis)?;
    let (outer, n, inner) = lanes(x.shape(), axis);
    let mut data = x.data().to_vec();
    for o in 0..outer {
        for i in 0..inner {
            let at = |t: usize| o * n * inner + t * inner + i;
            let mut max = T::neg_infinity();
            for t in 0..n {
                if data[at(t)] > max {
                    max = data[at(t)];
                }
            }
            let mut sum = T::zero();
            for t in 0..n {
                let e = (data[at(t)] - max).exp();
                data[at(t)] = e;
                sum = sum + e;
            }
            for t in 0..n {
                data[at(t)] = data[at(t)] / sum;
            }
        }
    }
    Tensor::from_vec(x.shape().to_vec(), data)
}

/// Normalizes the last axis to zero mean and unit variance, then applies the
/// elementwise affine `gain * x + bias`.
pub fn layer_normalize<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let m = *x.shape().last().ok_or(Error::ShapeExpectation {
        op: "layer_normalize",
        expected: "rank >= 1".into(),
        got: x.shape().to_vec(),
    })?;
    if gain.shape() != [m] || bias.shape() != [m] {
        return Err(Error::ShapeMismatch {
            op: "layer_normalize",
            lhs: x.shape().to_vec(),
            rhs: if gain.shape() != [m] {
                gain.shape().to_vec()
            } else {
                bias.shape().to_vec()
            },
        });
    }
    let rows = if m == 0 { 0 } else { x.len() / m };
    let mut data = vec![T::zero(); x.len()];
    let inv_m = T::one() / T::from_f64(m as f64);
    for row in 0..rows {
        let src = &x.data()[row * m..(row + 1) * m];
        let mut mean = T::zero();
        for &v in src {
            mean = mean + v;
        }
        mean = mean * inv_m;
        let mut var = T::zero();
        for &v in src {
            let d = v - mean;
            var = var + d * d;
        }
        var = var * inv_m;
        let inv_std = T::one() / (var + eps).sqrt();
        let dst = &mut data[row * m..(row + 1) * m];
        for j in 0..m {
            dst[j] = (src[j] - mean) * inv_std * gain.data()[j] + bias.data()[j];
        }
    }
    Tensor::from_vec(x.shape().to_vec(), data)
}

/// Mean along `axis`; the axis is removed from the shape.
pub fn mean_axis<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let summed = sum_axis(x, axis)?;
    let n = x.shape()[axis];
    Ok(scale(&summed, T::one() / T::from_f64(n as f64)))
}

/// Sum along `axis`; the axis is removed from the shape.
pub fn sum_axis<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    check_axis("sum_axis", x.shape(), axis)?;
    let (outer, n, inner) = lanes(x.shape(), axis);
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    let mut data = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for t in 0..n {
            for i in 0..inner {
                data[o * inner + i] = data[o * inner + i] + x.data()[o * n * inner + t * inner + i];
            }
        }
    }
    Tensor::from_vec(shape, data)
}

/// Sum of every element, as a rank-0 tensor.
pub fn sum_all<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut acc = T::zero();
    for &v in x.data() {
        acc = acc + v;
    }
    Tensor::scalar(acc)
}

/// All pairwise squared Euclidean distances between rows of `a` [p, m] and
/// rows of `b` [r, m], returned as [p, r]. Computed from explicit
/// differences, not the norm expansion, so nearby points do not suffer
/// cancellation.
pub fn euclidean_sq<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
        return Err(Error::ShapeMismatch {
            op: "euclidean_sq",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (p, m) = (a.shape()[0], a.shape()[1]);
    let r = b.shape()[0];
    let mut data = Vec::with_capacity(p * r);
    for i in 0..p {
        for j in 0..r {
            let mut acc = T::zero();
            for d in 0..m {
                let diff = a.data()[i * m + d] - b.data()[j * m + d];
                acc = acc + diff * diff;
            }
            data.push(acc);
        }
    }
    Tensor::from_vec(vec![p, r], data)
}

/// 2-D convolution over [B, H, W, C_in] with kernel [KH, KW, C_in, C_out],
/// stride 1, zero-padded so the spatial extent is preserved. Kernel extents
/// must be odd. Bias is applied separately as a broadcast add.
pub fn conv2d_same<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 4 || w.rank() != 4 || x.shape()[3] != w.shape()[2] {
        return Err(Error::ShapeMismatch {
            op: "conv2d_same",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let (b, h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kh, kw, cout) = (w.shape()[0], w.shape()[1], w.shape()[3]);
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::ShapeExpectation {
            op: "conv2d_same",
            expected: "odd kernel extents".into(),
            got: w.shape().to_vec(),
        });
    }
    let (ph, pw) = (kh / 2, kw / 2);
    let mut data = vec![T::zero(); b * h * wd * cout];
    let xi = |bi: usize, i: usize, j: usize, c: usize| ((bi * h + i) * wd + j) * cin + c;
    let wi = |di: usize, dj: usize, ci: usize, co: usize| ((di * kw + dj) * cin + ci) * cout + co;
    for bi in 0..b {
        for i in 0..h {
            for j in 0..wd {
                let out_base = ((bi * h + i) * wd + j) * cout;
                for di in 0..kh {
                    let si = i + di;
                    if si < ph || si - ph >= h {
                        continue;
                    }
                    for dj in 0..kw {
                        let sj = j + dj;
                        if sj < pw || sj - pw >= wd {
                            continue;
                        }
                        for ci in 0..cin {
                            let xv = x.data()[xi(bi, si - ph, sj - pw, ci)];
                            for co in 0..cout {
                                data[out_base + co] =
                                    data[out_base + co] + xv * w.data()[wi(di, dj, ci, co)];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![b, h, wd, cout], data)
}

/// 2x2 average pooling with stride 2 over [B, H, W, C]; H and W must be even.
pub fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 4 || x.shape()[1] % 2 != 0 || x.shape()[2] % 2 != 0 {
        return Err(Error::ShapeExpectation {
            op: "avg_pool2",
            expected: "[B, H, W, C] with even H and W".into(),
            got: x.shape().to_vec(),
        });
    }
    let (b, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut data = Vec::with_capacity(b * oh * ow * c);
    let xi = |bi: usize, i: usize, j: usize, ci: usize| ((bi * h + i) * w + j) * c + ci;
    for bi in 0..b {
        for i in 0..oh {
            for j in 0..ow {
                for ci in 0..c {
                    let s = x.data()[xi(bi, 2 * i, 2 * j, ci)]
                        + x.data()[xi(bi, 2 * i, 2 * j + 1, ci)]
                        + x.data()[xi(bi, 2 * i + 1, 2 * j, ci)]
                        + x.data()[xi(bi, 2 * i + 1, 2 * j + 1, ci)];
                    data.push(s * quarter);
                }
            }
        }
    }
    Tensor::from_vec(vec![b, oh, ow, c], data)
}

/// Mean over both spatial axes: [B, H, W, C] -> [B, C].
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(Error::ShapeExpectation {
            op: "global_avg_pool",
            expected: "[B, H, W, C]".into(),
            got: x.shape().to_vec(),
        });
    }
    let (b, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let inv = T::one() / T::from_f64((h * w) as f64);
    let mut data = vec![T::zero(); b * c];
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                for ci in 0..c {
                    data[bi * c + ci] =
                        data[bi * c + ci] + x.data()[((bi * h + i) * w + j) * c + ci];
                }
            }
        }
    }
    for v in data.iter_mut() {
        *v = *v * inv;
    }
    Tensor::from_vec(vec![b, c], data)
}
